//! Seeds x architectures x encoder modes over a set of datasets, with a
//! resumable results log and Table-1-style summaries.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;

use serde::{Deserialize, Serialize};

use crate::dataset::{aggregate_runs, load_dataset, stratified_split, validation_split, DatasetTable, Standardizer};
use crate::embed::EmbeddedTensor;
use crate::error::{Error, Result};
use crate::models::{
    AdapterActivation, Architecture, BaseFeatures, EncoderMode, EncoderSpec, FeatureSource, Model, ModelConfig,
    Pooling,
};
use crate::seeds;
use crate::trainer::{train, TrainConfig, TrainReport};

/// Everything about a cell except its (dataset, arch, mode, seed) key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CellSettings {
    pub test_fraction: f64,
    pub val_fraction: f64,
    pub token_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub hidden: Vec<usize>,
    pub ffn_dim: Option<usize>,
    pub dropout: f64,
    pub adapter_activation: AdapterActivation,
    pub pooling: Pooling,
    pub train: TrainConfig,
    /// Learning rate for the FT-Transformer. Adam at 1e-3 blows up the
    /// 1024-wide attention stack within a few steps; `None` uses `train.lr`.
    pub transformer_lr: Option<f64>,
}

impl Default for CellSettings {
    fn default() -> Self {
        let m = ModelConfig::new(Architecture::Mlp, EncoderMode::Base);
        Self {
            test_fraction: 0.3,
            val_fraction: 0.2,
            token_dim: m.token_dim,
            heads: m.heads,
            layers: m.layers,
            hidden: m.hidden,
            ffn_dim: m.ffn_dim,
            dropout: m.dropout,
            adapter_activation: m.adapter_activation,
            pooling: m.pooling,
            train: TrainConfig::default(),
            transformer_lr: Some(1e-4),
        }
    }
}

impl CellSettings {
    pub fn lr_for(&self, architecture: Architecture) -> f64 {
        match (architecture, self.transformer_lr) {
            (Architecture::FtTransformer, Some(lr)) => lr,
            _ => self.train.lr,
        }
    }

    pub fn model_config(&self, architecture: Architecture, encoder_mode: EncoderMode) -> ModelConfig {
        ModelConfig {
            architecture,
            encoder_mode,
            token_dim: self.token_dim,
            heads: self.heads,
            layers: self.layers,
            hidden: self.hidden.clone(),
            ffn_dim: self.ffn_dim,
            dropout: self.dropout,
            adapter_activation: self.adapter_activation,
            pooling: self.pooling,
        }
    }
}

/// Fit / validation / test indices of one seed. Shared by every
/// architecture and encoder mode.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CellSplit {
    pub fit: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn cell_split(table: &DatasetTable, seed: u64, settings: &CellSettings) -> Result<CellSplit> {
    let split = stratified_split(table, settings.test_fraction, seeds::derive(seed, seeds::SPLIT))?;
    let (fit, val) = validation_split(
        &split.train,
        &table.labels,
        settings.val_fraction,
        seeds::derive(seed, seeds::VALIDATION),
    )?;
    Ok(CellSplit {
        fit,
        val,
        test: split.test,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellKey {
    pub dataset: String,
    pub arch: Architecture,
    pub mode: EncoderMode,
    pub seed: u64,
}

impl std::fmt::Display for CellKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}/{}/seed{}", self.dataset, self.arch, self.mode, self.seed)
    }
}

/// One line of `results.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    #[serde(flatten)]
    pub key: CellKey,
    pub n_train: usize,
    pub n_test: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<TrainReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl CellRecord {
    pub fn accuracy(&self) -> Option<f64> {
        self.report.as_ref().map(|r| r.test_accuracy)
    }
}

/// Train and test one cell.
pub fn run_cell(
    table: &DatasetTable,
    embeddings: Option<&EmbeddedTensor>,
    arch: Architecture,
    mode: EncoderMode,
    seed: u64,
    settings: &CellSettings,
) -> Result<TrainReport> {
    let split = cell_split(table, seed, settings)?;
    let (encoder, source) = match mode {
        EncoderMode::Base => {
            let standardizer = Standardizer::fit(table, &split.fit);
            let spec = EncoderSpec::fit_base(table, &split.fit, settings.token_dim);
            let features = BaseFeatures::new(table, &spec, &standardizer)?;
            (spec, FeatureSource::Base(features))
        }
        EncoderMode::Llm => {
            let e = embeddings.ok_or_else(|| Error::MissingEmbeddings {
                path: PathBuf::from(format!("{}.emb", table.name)),
                dataset: table.name.clone(),
            })?;
            if (e.n, e.m) != (table.n_rows(), table.n_features()) {
                return Err(Error::Config(format!(
                    "embeddings for `{}` have shape ({}, {}, {}), table is {} x {}",
                    e.dataset,
                    e.n,
                    e.m,
                    e.d,
                    table.n_rows(),
                    table.n_features()
                )));
            }
            (
                EncoderSpec::llm(table.n_features(), e.d, settings.token_dim),
                FeatureSource::Llm(e),
            )
        }
    };
    let model = Model::new(settings.model_config(arch, mode), encoder, table.n_classes())?;
    let mut store = model.init::<f32>(seeds::derive(seed, seeds::INIT))?;
    let config = TrainConfig {
        seed,
        lr: settings.lr_for(arch),
        ..settings.train.clone()
    };
    train(
        &model,
        &mut store,
        &source,
        &table.labels,
        &split.fit,
        &split.val,
        &split.test,
        &config,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanDataset {
    /// Path to the dataset manifest.
    pub manifest: PathBuf,
    /// Embedded tensor file, required for LLM cells.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embeddings: Option<PathBuf>,
}

fn default_archs() -> Vec<Architecture> {
    Architecture::ALL.to_vec()
}
fn default_modes() -> Vec<EncoderMode> {
    EncoderMode::ALL.to_vec()
}
fn default_seeds() -> Vec<u64> {
    (0..10).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub datasets: Vec<PlanDataset>,
    #[serde(default = "default_archs")]
    pub architectures: Vec<Architecture>,
    #[serde(default = "default_modes")]
    pub modes: Vec<EncoderMode>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub settings: CellSettings,
    /// Concurrent cells; 0 means one per available core.
    #[serde(default)]
    pub workers: usize,
}

impl ExperimentPlan {
    pub fn load(path: &Path) -> Result<Self> {
        let mut plan: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        // relative dataset paths are relative to the plan file
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        for d in &mut plan.datasets {
            if d.manifest.is_relative() {
                d.manifest = base.join(&d.manifest);
            }
            if let Some(e) = &mut d.embeddings {
                if e.is_relative() {
                    *e = base.join(&*e);
                }
            }
        }
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        let distinct: HashSet<u64> = self.seeds.iter().copied().collect();
        if distinct.len() != self.seeds.len() {
            return Err(Error::Config("plan seeds must be distinct".into()));
        }
        if self.datasets.is_empty() || self.architectures.is_empty() || self.modes.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("plan needs datasets, architectures, modes and seeds".into()));
        }
        self.settings.train.validate()
    }
}

pub fn read_results(path: &Path) -> Result<Vec<CellRecord>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let reader = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<CellRecord>(&line) {
            Ok(r) => out.push(r),
            Err(e) => log::warn!("{}: skipping unreadable line {}: {e}", path.display(), i + 1),
        }
    }
    Ok(out)
}

/// Latest successful record per key, falling back to the latest failure.
fn latest_records(records: Vec<CellRecord>) -> BTreeMap<CellKey, CellRecord> {
    let mut map: BTreeMap<CellKey, CellRecord> = BTreeMap::new();
    for r in records {
        let keep_old = map.get(&r.key).is_some_and(|old| old.report.is_some() && r.report.is_none());
        if !keep_old {
            map.insert(r.key.clone(), r);
        }
    }
    map
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableCell {
    pub dataset: String,
    pub arch: Architecture,
    pub mode: EncoderMode,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub runs: usize,
    pub failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AverageRow {
    pub arch: Architecture,
    pub mode: EncoderMode,
    /// Mean of the dataset means; `None` when any dataset cell is missing.
    pub mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffRow {
    pub dataset: String,
    pub arch: Architecture,
    pub seeds: Vec<u64>,
    /// LLM minus base accuracy per seed, in percentage points.
    pub diffs: Vec<f64>,
    pub n_train: usize,
    pub n_test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsTable {
    pub datasets: Vec<String>,
    pub architectures: Vec<Architecture>,
    pub modes: Vec<EncoderMode>,
    pub cells: Vec<TableCell>,
    pub averages: Vec<AverageRow>,
    pub differences: Vec<DiffRow>,
}

impl ResultsTable {
    pub fn from_records(records: &[CellRecord]) -> Self {
        let latest = latest_records(records.to_vec());
        let mut datasets: Vec<String> = Vec::new();
        for k in latest.keys() {
            if !datasets.contains(&k.dataset) {
                datasets.push(k.dataset.clone());
            }
        }
        let architectures: Vec<Architecture> =
            latest.keys().map(|k| k.arch).collect::<BTreeSet<_>>().into_iter().collect();
        let modes: Vec<EncoderMode> = latest.keys().map(|k| k.mode).collect::<BTreeSet<_>>().into_iter().collect();

        let mut cells = Vec::new();
        for ds in &datasets {
            for &arch in &architectures {
                for &mode in &modes {
                    let group: Vec<&CellRecord> = latest
                        .values()
                        .filter(|r| r.key.dataset == *ds && r.key.arch == arch && r.key.mode == mode)
                        .collect();
                    let accs: Vec<f64> = group.iter().filter_map(|r| r.accuracy()).collect();
                    let stats = aggregate_runs(&accs).ok();
                    cells.push(TableCell {
                        dataset: ds.clone(),
                        arch,
                        mode,
                        mean: stats.map(|s| s.0),
                        std: stats.map(|s| s.1),
                        runs: accs.len(),
                        failed: group.len() - accs.len(),
                    });
                }
            }
        }

        let mut averages = Vec::new();
        for &arch in &architectures {
            for &mode in &modes {
                let means: Option<Vec<f64>> = cells
                    .iter()
                    .filter(|c| c.arch == arch && c.mode == mode)
                    .map(|c| c.mean)
                    .collect();
                let mean = means.filter(|m| !m.is_empty()).map(|m| m.iter().sum::<f64>() / m.len() as f64);
                averages.push(AverageRow { arch, mode, mean });
            }
        }

        let mut differences = Vec::new();
        for ds in &datasets {
            for &arch in &architectures {
                let acc_of = |mode: EncoderMode| -> BTreeMap<u64, &CellRecord> {
                    latest
                        .values()
                        .filter(|r| r.key.dataset == *ds && r.key.arch == arch && r.key.mode == mode && r.report.is_some())
                        .map(|r| (r.key.seed, r))
                        .collect()
                };
                let base = acc_of(EncoderMode::Base);
                let llm = acc_of(EncoderMode::Llm);
                let mut row = DiffRow {
                    dataset: ds.clone(),
                    arch,
                    seeds: Vec::new(),
                    diffs: Vec::new(),
                    n_train: 0,
                    n_test: 0,
                };
                for (seed, b) in &base {
                    if let Some(l) = llm.get(seed) {
                        row.seeds.push(*seed);
                        row.diffs.push(l.accuracy().unwrap() - b.accuracy().unwrap());
                        row.n_train = b.n_train;
                        row.n_test = b.n_test;
                    }
                }
                if !row.seeds.is_empty() {
                    differences.push(row);
                }
            }
        }

        Self {
            datasets,
            architectures,
            modes,
            cells,
            averages,
            differences,
        }
    }

    pub fn cell(&self, dataset: &str, arch: Architecture, mode: EncoderMode) -> Option<&TableCell> {
        self.cells
            .iter()
            .find(|c| c.dataset == dataset && c.arch == arch && c.mode == mode)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["dataset", "architecture", "mode", "mean", "std", "runs", "failed"])?;
        let fmt = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x:.4}"));
        for c in &self.cells {
            w.write_record([
                c.dataset.clone(),
                c.arch.to_string(),
                c.mode.to_string(),
                fmt(c.mean),
                fmt(c.std),
                c.runs.to_string(),
                c.failed.to_string(),
            ])?;
        }
        for a in &self.averages {
            w.write_record([
                "average".to_string(),
                a.arch.to_string(),
                a.mode.to_string(),
                fmt(a.mean),
                String::new(),
                String::new(),
                String::new(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Invalid(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    /// Datasets as rows, `base | llm` column pairs per architecture.
    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        let _ = write!(s, "| Dataset |");
        for a in &self.architectures {
            for m in &self.modes {
                let _ = write!(s, " {} ({}) |", a.display_name(), m);
            }
        }
        s.push('\n');
        s.push_str("|---|");
        for _ in 0..self.architectures.len() * self.modes.len() {
            s.push_str("---:|");
        }
        s.push('\n');
        for ds in &self.datasets {
            let _ = write!(s, "| {ds} |");
            for &a in &self.architectures {
                for &m in &self.modes {
                    match self.cell(ds, a, m) {
                        Some(TableCell {
                            mean: Some(mean),
                            std: Some(std),
                            ..
                        }) => {
                            let _ = write!(s, " {mean:.2} ± {std:.2} |");
                        }
                        _ => s.push_str(" missing |"),
                    }
                }
            }
            s.push('\n');
        }
        s.push_str("| Average |");
        for &a in &self.architectures {
            for &m in &self.modes {
                match self.averages.iter().find(|r| r.arch == a && r.mode == m).and_then(|r| r.mean) {
                    Some(v) => {
                        let _ = write!(s, " {v:.2} |");
                    }
                    None => s.push_str(" missing |"),
                }
            }
        }
        s.push('\n');
        s
    }
}

struct LoadedDataset {
    table: DatasetTable,
    embeddings: Option<EmbeddedTensor>,
}

/// Outcome of [`run_plan`].
#[derive(Debug, Clone)]
pub struct PlanOutcome {
    pub table: ResultsTable,
    /// Cells trained in this invocation (zero on a fully memoised re-run).
    pub trained: usize,
    pub skipped: usize,
}

/// Run every missing cell of `plan`, appending to `<out>/results.jsonl`,
/// then write `table.csv` and `table.md`.
pub fn run_plan(plan: &ExperimentPlan, out: &Path) -> Result<PlanOutcome> {
    plan.validate()?;
    std::fs::create_dir_all(out)?;
    let results_path = out.join("results.jsonl");
    let previous = read_results(&results_path)?;
    let done: HashSet<CellKey> = previous
        .iter()
        .filter(|r| r.report.is_some())
        .map(|r| r.key.clone())
        .collect();

    let mut loaded = Vec::with_capacity(plan.datasets.len());
    for d in &plan.datasets {
        let (_, table) = load_dataset(&d.manifest)?;
        let embeddings = match &d.embeddings {
            Some(p) if plan.modes.contains(&EncoderMode::Llm) => {
                if !p.exists() {
                    return Err(Error::MissingEmbeddings {
                        path: p.clone(),
                        dataset: d.manifest.display().to_string(),
                    });
                }
                Some(EmbeddedTensor::load(p)?)
            }
            None if plan.modes.contains(&EncoderMode::Llm) => {
                return Err(Error::MissingEmbeddings {
                    path: PathBuf::from(format!("{}.emb", table.name)),
                    dataset: d.manifest.display().to_string(),
                })
            }
            _ => None,
        };
        loaded.push(LoadedDataset { table, embeddings });
    }

    let mut jobs = Vec::new();
    for (di, d) in loaded.iter().enumerate() {
        for &arch in &plan.architectures {
            for &mode in &plan.modes {
                for &seed in &plan.seeds {
                    let key = CellKey {
                        dataset: d.table.name.clone(),
                        arch,
                        mode,
                        seed,
                    };
                    if !done.contains(&key) {
                        jobs.push((di, key));
                    }
                }
            }
        }
    }
    let total = loaded.len() * plan.architectures.len() * plan.modes.len() * plan.seeds.len();
    let skipped = total - jobs.len();
    log::info!("{} cells to run, {skipped} already complete", jobs.len());

    let workers = if plan.workers == 0 {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    } else {
        plan.workers
    }
    .clamp(1, jobs.len().max(1));
    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel::<CellRecord>();
    let mut file = std::fs::OpenOptions::new().create(true).append(true).open(&results_path)?;
    let mut fresh = Vec::with_capacity(jobs.len());
    std::thread::scope(|scope| -> Result<()> {
        for _ in 0..workers {
            let tx = tx.clone();
            let (jobs, loaded, next) = (&jobs, &loaded, &next);
            scope.spawn(move || loop {
                let j = next.fetch_add(1, Ordering::SeqCst);
                let Some((di, key)) = jobs.get(j) else { break };
                let d = &loaded[*di];
                let split_sizes = cell_split(&d.table, key.seed, &plan.settings)
                    .map(|s| (s.fit.len() + s.val.len(), s.test.len()))
                    .unwrap_or((0, 0));
                let outcome = run_cell(
                    &d.table,
                    d.embeddings.as_ref(),
                    key.arch,
                    key.mode,
                    key.seed,
                    &plan.settings,
                );
                let record = CellRecord {
                    key: key.clone(),
                    n_train: split_sizes.0,
                    n_test: split_sizes.1,
                    error: outcome.as_ref().err().map(|e| e.to_string()),
                    report: outcome.ok(),
                };
                if tx.send(record).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        // the only writer of results.jsonl
        for record in rx {
            match (&record.report, &record.error) {
                (Some(r), _) => log::info!("{}: {:.2}% (best epoch {})", record.key, r.test_accuracy, r.best_epoch),
                (None, Some(e)) => log::error!("{}: {e}", record.key),
                _ => {}
            }
            writeln!(file, "{}", serde_json::to_string(&record)?)?;
            file.flush()?;
            fresh.push(record);
        }
        Ok(())
    })?;

    let mut all = previous;
    let trained = fresh.len();
    all.extend(fresh);
    let table = ResultsTable::from_records(&all);
    std::fs::write(out.join("table.csv"), table.to_csv()?)?;
    std::fs::write(out.join("table.md"), table.to_markdown())?;
    Ok(PlanOutcome {
        table,
        trained,
        skipped,
    })
}
