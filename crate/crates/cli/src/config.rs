//! Config file plus the flag > env > file > default resolution.

use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Deserialize;
use tte_core::experiment::CellSettings;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    Hash,
    Http,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProviderConfig {
    pub kind: Option<ProviderKind>,
    pub endpoint: Option<String>,
    pub model_id: Option<String>,
    pub dimension: Option<usize>,
    pub batch_size: Option<usize>,
    pub max_in_flight: Option<usize>,
    pub timeout_secs: Option<u64>,
    pub api_key: Option<String>,
}

/// Contents of the `--config` JSON file. Every field is optional.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GlobalConfig {
    pub cache_dir: Option<PathBuf>,
    pub log_level: Option<String>,
    pub out_dir: Option<PathBuf>,
    pub seeds: Option<Vec<u64>>,
    pub template: Option<String>,
    pub provider: ProviderConfig,
    pub settings: Option<CellSettings>,
}

impl GlobalConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn default_seed(&self) -> u64 {
        self.seeds.as_ref().and_then(|s| s.first().copied()).unwrap_or(0)
    }

    /// Output path: the flag, else `default_name` inside the configured
    /// output directory.
    pub fn out_path(&self, flag: Option<&PathBuf>, default_name: &str) -> Result<PathBuf, crate::UsageError> {
        match (flag, &self.out_dir) {
            (Some(p), _) => Ok(p.clone()),
            (None, Some(dir)) => Ok(dir.join(default_name)),
            (None, None) => Err(crate::UsageError("--out is required (or set out_dir in the config file)".into())),
        }
    }
}
