mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tte_core::models::{Architecture, EncoderMode};
use tte_core::projection::PlotFormat;

use config::{GlobalConfig, ProviderKind};

/// Tabular rows as sentences, frozen text embeddings, and neural
/// classifiers on top.
#[derive(Debug, Parser)]
#[command(name = "tte", version)]
pub struct Cli {
    /// JSON config file; flags and environment variables take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Embedding cache directory.
    #[arg(long, global = true, env = "TTE_CACHE_DIR")]
    cache_dir: Option<PathBuf>,
    /// Log filter, e.g. `info` or `tte_core=debug`.
    #[arg(long, global = true, env = "TTE_LOG")]
    log_level: Option<String>,
    /// Overwrite existing outputs instead of skipping.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Validate a dataset against its manifest and write a normalised copy.
    Ingest(IngestArgs),
    /// Write one JSON line `{row, col, sentence}` per cell.
    Serialize(SerializeArgs),
    /// Embed every cell and write the embedded tensor file.
    Embed(EmbedArgs),
    /// Train and test one (dataset, architecture, encoder, seed) cell.
    Train(TrainArgs),
    /// Run an experiment plan; resumes from existing results.
    Evaluate(EvaluateArgs),
    /// Bayesian comparison of with-LLM against base accuracies.
    Compare(CompareArgs),
    /// 2-D PCA of the embeddings of column values.
    Project(ProjectArgs),
}

#[derive(Debug, Args)]
struct IngestArgs {
    /// Dataset manifest (JSON).
    #[arg(long, required_unless_present = "fixture", conflicts_with = "fixture")]
    dataset: Option<PathBuf>,
    /// Write a bundled fixture instead.
    #[arg(long, value_parser = ["synthetic", "imbalanced"])]
    fixture: Option<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SerializeArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Sentence template with `{col}` and `{value}`.
    #[arg(long)]
    template: Option<String>,
    /// Output JSON-lines file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EmbedArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_enum)]
    provider: Option<ProviderKind>,
    /// Embeddings endpoint URL (http provider).
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    model_id: Option<String>,
    #[arg(long)]
    dimension: Option<usize>,
    /// Sentences per request.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Concurrent requests.
    #[arg(long)]
    max_in_flight: Option<usize>,
    #[arg(long)]
    timeout_secs: Option<u64>,
    #[arg(long)]
    template: Option<String>,
    /// Output tensor file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    arch: Architecture,
    #[arg(long, default_value = "base")]
    encoder: EncoderMode,
    /// Embedded tensor file, required for `--encoder llm`.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Report file; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// Experiment plan (JSON).
    #[arg(long)]
    plan: PathBuf,
    /// Output directory for results.jsonl, table.csv and table.md.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Concurrent cells; overrides the plan.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Debug, Args)]
struct CompareArgs {
    /// results.jsonl from `evaluate`.
    #[arg(long)]
    results: PathBuf,
    /// Half-width of the region of practical equivalence, in accuracy points.
    #[arg(long, default_value_t = tte_core::stats::DEFAULT_ROPE)]
    rope: f64,
    /// Monte Carlo draws for the aggregate.
    #[arg(long, default_value_t = tte_core::stats::DEFAULT_MC_SAMPLES)]
    mc: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// Only compare this architecture; by default every (dataset,
    /// architecture) pair is a unit.
    #[arg(long)]
    arch: Option<Architecture>,
    /// Correlation override; by default the test share of each dataset.
    #[arg(long)]
    rho: Option<f64>,
    /// JSON output file; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ProjectArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Comma-separated column names.
    #[arg(long, value_delimiter = ',', required = true)]
    columns: Vec<String>,
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long, default_value_t = 20)]
    max_unique: usize,
    #[arg(long, value_enum, default_value = "svg")]
    format: Format,
    #[arg(long)]
    seed: Option<u64>,
    /// One projection per column instead of a joint one.
    #[arg(long)]
    per_feature: bool,
    /// Output file; with --per-feature the column name is appended to the
    /// file stem.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum Format {
    Svg,
    Csv,
}

impl From<Format> for PlotFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Svg => PlotFormat::Svg,
            Format::Csv => PlotFormat::Csv,
        }
    }
}

/// Bad invocation detected after parsing; exits 1 like a clap error.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub struct Context {
    pub config: GlobalConfig,
    pub cache_dir: Option<PathBuf>,
    pub force: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let config = match GlobalConfig::load(cli.config.as_deref()) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let level = cli.log_level.clone().or_else(|| config.log_level.clone()).unwrap_or_else(|| "info".into());
    env_logger::Builder::new()
        .parse_filters(&level)
        .target(env_logger::Target::Stderr)
        .init();

    let ctx = Context {
        cache_dir: cli.cache_dir.clone().or_else(|| config.cache_dir.clone()),
        config,
        force: cli.force,
    };
    match commands::dispatch(&ctx, cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.downcast_ref::<UsageError>().is_some() => {
            eprintln!("error: {e}\n\nFor more information, try '--help'.");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
