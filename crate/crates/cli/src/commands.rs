use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context as _, Result};
use log::info;
use serde::Serialize;
use tte_core::dataset::{load_dataset, DatasetTable, FeatureKind, Manifest};
use tte_core::embed::{
    build_embedded_tensor, EmbedOptions, EmbeddedTensor, EmbeddingCache, EmbeddingProvider, HashProvider, HttpConfig,
    HttpProvider,
};
use tte_core::experiment::{read_results, run_cell, run_plan, CellSettings, ExperimentPlan, ResultsTable};
use tte_core::fixtures;
use tte_core::projection::{emit, project_columns, PlotFormat};
use tte_core::serializer::{serialize_dataset, SerializedCell, Template};
use tte_core::stats::{
    correlated_t_posterior, hierarchical_compare, ComparisonResult, DatasetComparison, DiffSample, PosteriorSummary,
};

use crate::config::ProviderKind;
use crate::{
    Command, CompareArgs, Context, EmbedArgs, EvaluateArgs, IngestArgs, ProjectArgs, SerializeArgs, TrainArgs,
    UsageError,
};

const DEFAULT_HASH_MODEL: &str = "hash-offline";
const DEFAULT_HASH_DIMENSION: usize = 768;

pub fn dispatch(ctx: &Context, command: Command) -> Result<()> {
    match command {
        Command::Ingest(a) => ingest(ctx, a),
        Command::Serialize(a) => serialize(ctx, a),
        Command::Embed(a) => embed(ctx, a),
        Command::Train(a) => train(ctx, a),
        Command::Evaluate(a) => evaluate(ctx, a),
        Command::Compare(a) => compare(ctx, a),
        Command::Project(a) => project(ctx, a),
    }
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// True when `path` exists and may not be overwritten.
fn keep_existing(ctx: &Context, path: &Path) -> bool {
    if path.exists() && !ctx.force {
        info!("{} exists, skipping (pass --force to overwrite)", path.display());
        return true;
    }
    false
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn load(path: &Path) -> Result<(Manifest, DatasetTable)> {
    load_dataset(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn template(ctx: &Context, flag: Option<&String>) -> Result<Template> {
    match flag.or(ctx.config.template.as_ref()) {
        Some(t) => Template::parse(t).map_err(|e| usage(format!("--template: {e}"))),
        None => Ok(Template::default()),
    }
}

#[derive(Serialize)]
struct Summary<'a> {
    name: &'a str,
    manifest: PathBuf,
    rows: usize,
    features: usize,
    categorical: usize,
    numeric: usize,
    classes: &'a [String],
    class_counts: Vec<usize>,
}

fn ingest(ctx: &Context, a: IngestArgs) -> Result<()> {
    let out = ctx.config.out_path(a.out.as_ref(), "datasets")?;
    let (manifest_path, table) = if let Some(name) = &a.fixture {
        let fx = match name.as_str() {
            "synthetic" => fixtures::synthetic_separable(),
            _ => fixtures::imbalanced_uninformative(),
        };
        let path = out.join(format!("{}.json", fx.manifest.name));
        if !keep_existing(ctx, &path) {
            fx.write(&out)?;
        }
        (path, fx.table()?)
    } else {
        let source = a.dataset.as_ref().expect("clap requires --dataset or --fixture");
        let (manifest, table) = load(source)?;
        let path = out.join(format!("{}.json", manifest.name));
        if !keep_existing(ctx, &path) {
            let csv_name = format!("{}.csv", manifest.name);
            let csv_path = out.join(&csv_name);
            if std::fs::canonicalize(&csv_path).ok() == std::fs::canonicalize(manifest.csv_path(source)).ok() {
                bail!("refusing to overwrite the source file {}", csv_path.display());
            }
            let mut w = create(&csv_path)?;
            table.write_csv(&mut w, b',')?;
            w.flush()?;
            let normalised = Manifest {
                csv: Some(csv_name),
                delimiter: None,
                ..manifest
            };
            std::fs::write(&path, serde_json::to_string_pretty(&normalised)? + "\n")?;
        }
        (path, table)
    };
    let summary = Summary {
        name: &table.name,
        manifest: manifest_path,
        rows: table.n_rows(),
        features: table.n_features(),
        categorical: table.n_kind(FeatureKind::Categorical),
        numeric: table.n_kind(FeatureKind::Numeric),
        classes: &table.class_names,
        class_counts: table.class_counts(),
    };
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

fn serialize(ctx: &Context, a: SerializeArgs) -> Result<()> {
    let (_, table) = load(&a.dataset)?;
    let out = ctx.config.out_path(a.out.as_ref(), &format!("{}.jsonl", table.name))?;
    if keep_existing(ctx, &out) {
        return Ok(());
    }
    let t = template(ctx, a.template.as_ref())?;
    let sd = serialize_dataset(&table, &t);
    let mut w = create(&out)?;
    for row in 0..sd.n_rows {
        for col in 0..sd.n_cols {
            let cell = SerializedCell {
                row,
                col,
                sentence: sd.sentence(row, col).to_string(),
            };
            serde_json::to_writer(&mut w, &cell)?;
            w.write_all(b"\n")?;
        }
    }
    w.flush()?;
    info!(
        "{}: {} sentences ({} distinct) -> {}",
        table.name,
        sd.grid.len(),
        sd.unique.len(),
        out.display()
    );
    Ok(())
}

fn provider(ctx: &Context, a: &EmbedArgs) -> Result<Box<dyn EmbeddingProvider>> {
    let p = &ctx.config.provider;
    let kind = a.provider.or(p.kind).unwrap_or(ProviderKind::Hash);
    let model_id = a.model_id.clone().or_else(|| p.model_id.clone());
    let dimension = a.dimension.or(p.dimension);
    Ok(match kind {
        ProviderKind::Hash => Box::new(HashProvider::new(
            model_id.unwrap_or_else(|| DEFAULT_HASH_MODEL.into()),
            dimension.unwrap_or(DEFAULT_HASH_DIMENSION),
        )?),
        ProviderKind::Http => {
            let endpoint = a
                .endpoint
                .clone()
                .or_else(|| p.endpoint.clone())
                .ok_or_else(|| usage("--endpoint is required for the http provider"))?;
            let model_id = model_id.ok_or_else(|| usage("--model-id is required for the http provider"))?;
            let dimension = dimension.ok_or_else(|| usage("--dimension is required for the http provider"))?;
            let mut config = HttpConfig::new(endpoint, model_id, dimension);
            config.api_key = std::env::var("EMBED_API_KEY").ok().or_else(|| p.api_key.clone());
            if let Some(t) = a.timeout_secs.or(p.timeout_secs) {
                config.timeout_secs = t;
            }
            Box::new(HttpProvider::new(config)?)
        }
    })
}

fn embed(ctx: &Context, a: EmbedArgs) -> Result<()> {
    let (_, table) = load(&a.dataset)?;
    let out = ctx.config.out_path(a.out.as_ref(), &format!("{}.emb", table.name))?;
    if keep_existing(ctx, &out) {
        return Ok(());
    }
    let provider = provider(ctx, &a)?;
    let t = template(ctx, a.template.as_ref())?;
    let cache = match &ctx.cache_dir {
        Some(dir) => Some(EmbeddingCache::open(dir, provider.model_id(), provider.dimension())?),
        None => None,
    };
    let defaults = EmbedOptions::default();
    let p = &ctx.config.provider;
    let options = EmbedOptions {
        batch_size: a.batch_size.or(p.batch_size).unwrap_or(defaults.batch_size),
        max_in_flight: a.max_in_flight.or(p.max_in_flight).unwrap_or(defaults.max_in_flight),
    };
    if options.batch_size == 0 || options.max_in_flight == 0 {
        return Err(usage("--batch-size and --max-in-flight must be at least 1"));
    }
    let tensor = build_embedded_tensor(&table, provider.as_ref(), cache.as_ref(), &t, options)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    tensor.save(&out)?;
    info!(
        "{}: {} x {} x {} from `{}` -> {} (checksum {})",
        table.name,
        tensor.n,
        tensor.m,
        tensor.d,
        tensor.model_id,
        out.display(),
        tensor.checksum()
    );
    Ok(())
}

fn load_embeddings(path: &Path, table: &DatasetTable) -> Result<EmbeddedTensor> {
    let e = EmbeddedTensor::load(path).with_context(|| format!("loading embeddings {}", path.display()))?;
    if (e.n, e.m) != (table.n_rows(), table.n_features()) {
        bail!(
            "{} holds {} x {} cells but `{}` is {} x {}",
            path.display(),
            e.n,
            e.m,
            table.name,
            table.n_rows(),
            table.n_features()
        );
    }
    Ok(e)
}

fn write_json<T: Serialize>(ctx: &Context, value: &T, out: Option<&PathBuf>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match out {
        Some(path) => {
            let mut w = create(path)?;
            writeln!(w, "{text}")?;
            w.flush()?;
            info!("wrote {}", path.display());
        }
        None => println!("{text}"),
    }
    let _ = ctx;
    Ok(())
}

fn train(ctx: &Context, a: TrainArgs) -> Result<()> {
    let out = a.out.clone().or_else(|| {
        let name = format!("train-{}-{}.json", a.arch, a.encoder);
        ctx.config.out_dir.as_ref().map(|d| d.join(name))
    });
    if out.as_deref().is_some_and(|p| keep_existing(ctx, p)) {
        return Ok(());
    }
    let (_, table) = load(&a.dataset)?;
    let embeddings = match (a.encoder, &a.embeddings) {
        (tte_core::models::EncoderMode::Llm, None) => {
            return Err(usage("--embeddings is required with --encoder llm"));
        }
        (tte_core::models::EncoderMode::Llm, Some(p)) => Some(load_embeddings(p, &table)?),
        _ => None,
    };
    let settings: CellSettings = ctx.config.settings.clone().unwrap_or_default();
    let seed = a.seed.unwrap_or_else(|| ctx.config.default_seed());
    let report = run_cell(&table, embeddings.as_ref(), a.arch, a.encoder, seed, &settings)?;
    info!(
        "{}/{}/{}/seed{}: {:.2}% test accuracy, best epoch {} of {}",
        table.name, a.arch, a.encoder, seed, report.test_accuracy, report.best_epoch, report.stopped_epoch
    );
    write_json(ctx, &report, out.as_ref())
}

fn evaluate(ctx: &Context, a: EvaluateArgs) -> Result<()> {
    let mut plan = ExperimentPlan::load(&a.plan).with_context(|| format!("loading plan {}", a.plan.display()))?;
    if let Some(w) = a.workers {
        plan.workers = w;
    }
    plan.validate().map_err(|e| usage(e.to_string()))?;
    let out = ctx.config.out_path(a.out.as_ref(), "results")?;
    let results = out.join("results.jsonl");
    if ctx.force && results.exists() {
        std::fs::remove_file(&results)?;
    }
    let outcome = run_plan(&plan, &out)?;
    info!(
        "{} cells trained, {} reused; tables in {}",
        outcome.trained,
        outcome.skipped,
        out.display()
    );
    print!("{}", outcome.table.to_markdown());
    Ok(())
}

fn verdict_line(label: &str, left: f64, rope: f64, right: f64) -> String {
    let word = if right >= left && right >= rope {
        "with-LLM better"
    } else if left >= rope {
        "base better"
    } else {
        "practically equivalent"
    };
    format!(
        "{label}: {word} (P(llm < base) = {left:.4}, P(rope) = {rope:.4}, P(llm > base) = {right:.4})"
    )
}

fn compare(ctx: &Context, a: CompareArgs) -> Result<()> {
    if !(a.rope >= 0.0) {
        return Err(usage("--rope must be non-negative"));
    }
    if a.rho.is_some_and(|r| !(0.0..1.0).contains(&r)) {
        return Err(usage("--rho must be in [0, 1)"));
    }
    if a.out.as_deref().is_some_and(|p| keep_existing(ctx, p)) {
        return Ok(());
    }
    let records = read_results(&a.results).with_context(|| format!("reading {}", a.results.display()))?;
    if records.is_empty() {
        bail!("{} holds no results", a.results.display());
    }
    let table = ResultsTable::from_records(&records);
    let samples: Vec<DiffSample> = table
        .differences
        .iter()
        .filter(|d| a.arch.is_none_or(|arch| d.arch == arch))
        .map(|d| DiffSample {
            dataset: if a.arch.is_some() {
                d.dataset.clone()
            } else {
                format!("{}/{}", d.dataset, d.arch)
            },
            diffs: d.diffs.clone(),
            n_train: d.n_train,
            n_test: d.n_test,
        })
        .collect();
    let seed = a.seed.unwrap_or_else(|| ctx.config.default_seed());
    let result = match samples.len() {
        0 => bail!("no (dataset, architecture) pair has both base and with-LLM results"),
        1 => {
            let s = &samples[0];
            let rho = a.rho.unwrap_or_else(|| s.rho());
            let post = correlated_t_posterior(&s.diffs, rho).with_context(|| s.dataset.clone())?;
            let summary = PosteriorSummary::new(post, a.rope)?;
            ComparisonResult {
                rope: a.rope,
                mc_samples: 0,
                seed,
                method: "single unit: correlated Bayesian t-test".into(),
                aggregate: tte_core::stats::RegionProbabilities {
                    p_left: summary.p_left,
                    p_rope: summary.p_rope,
                    p_right: summary.p_right,
                },
                per_dataset: vec![DatasetComparison {
                    dataset: s.dataset.clone(),
                    n: s.diffs.len(),
                    rho,
                    posterior: summary,
                }],
            }
        }
        _ => hierarchical_compare(&samples, a.rope, a.mc, seed, a.rho).map_err(|e| match e {
            tte_core::Error::Invalid(m) if m.contains("mc_samples") => usage(format!("--mc: {m}")),
            other => other.into(),
        })?,
    };
    write_json(ctx, &result, a.out.as_ref())?;
    for d in &result.per_dataset {
        info!("{}", verdict_line(&d.dataset, d.posterior.p_left, d.posterior.p_rope, d.posterior.p_right));
    }
    let g = &result.aggregate;
    println!("{}", verdict_line("aggregate", g.p_left, g.p_rope, g.p_right));
    Ok(())
}

fn project(ctx: &Context, a: ProjectArgs) -> Result<()> {
    let (_, table) = load(&a.dataset)?;
    let format: PlotFormat = a.format.into();
    let ext = match format {
        PlotFormat::Svg => "svg",
        PlotFormat::Csv => "csv",
    };
    let out = ctx.config.out_path(a.out.as_ref(), &format!("{}-projection.{ext}", table.name))?;
    let mut columns = Vec::with_capacity(a.columns.len());
    for name in &a.columns {
        let c = table.column_index(name).ok_or_else(|| {
            let known: Vec<&str> = table.schema.iter().map(|f| f.name.as_str()).collect();
            usage(format!("unknown column `{name}`; columns are {}", known.join(", ")))
        })?;
        columns.push(c);
    }
    let targets: Vec<PathBuf> = if a.per_feature {
        let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("projection");
        a.columns
            .iter()
            .map(|c| out.with_file_name(format!("{stem}-{c}.{ext}")))
            .collect()
    } else {
        vec![out.clone()]
    };
    if targets.iter().all(|p| keep_existing(ctx, p)) {
        return Ok(());
    }
    let tensor = load_embeddings(&a.embeddings, &table)?;
    let seed = a.seed.unwrap_or_else(|| ctx.config.default_seed());
    let projections = project_columns(&table, &tensor, &columns, a.max_unique, seed, !a.per_feature)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    for (i, (p, path)) in projections.iter().zip(&targets).enumerate() {
        let cols = if a.per_feature {
            a.columns[i].clone()
        } else {
            a.columns.join(", ")
        };
        emit(p, path, format, &format!("{}: {cols}", table.name))?;
        info!(
            "{} points, PC1 {:.1}% PC2 {:.1}% -> {}",
            p.coords.len(),
            100.0 * p.explained_variance[0],
            100.0 * p.explained_variance[1],
            path.display()
        );
    }
    Ok(())
}
