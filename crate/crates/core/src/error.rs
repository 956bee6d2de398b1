use std::path::PathBuf;

use thiserror::Error;

use crate::embed::EmbedError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: row {row}: {detail}")]
    Structural {
        path: PathBuf,
        row: usize,
        detail: String,
    },

    #[error("manifest mismatch: {0}")]
    Manifest(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("split: {0}")]
    Split(String),

    #[error("configuration: {0}")]
    Config(String),

    #[error("non-finite training loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("embeddings file {path} not found; materialise it first with `tte embed --dataset <manifest> --out {path}`")]
    MissingEmbeddings { path: PathBuf, dataset: String },

    #[error(transparent)]
    Embed(#[from] EmbedError),

    #[error(transparent)]
    Engine(#[from] tte_engine::EngineError),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
