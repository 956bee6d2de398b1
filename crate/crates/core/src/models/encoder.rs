use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use tte_engine::{Scalar, Tensor};

use super::EncoderMode;
use crate::dataset::{DatasetTable, FeatureKind, Standardizer};
use crate::embed::EmbeddedTensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FeatureEncoder {
    Numeric,
    /// Lookup over `vocab`; row `vocab.len()` is the unknown-category row.
    Categorical { vocab: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub mode: EncoderMode,
    pub token_dim: usize,
    /// Width of the frozen embeddings (LLM mode only).
    pub source_dim: Option<usize>,
    pub features: Vec<FeatureEncoder>,
}

impl EncoderSpec {
    /// Learned encoders whose categorical vocabularies come from `fit_rows`.
    pub fn fit_base(table: &DatasetTable, fit_rows: &[usize], token_dim: usize) -> Self {
        let features = table
            .schema
            .iter()
            .map(|f| match f.kind {
                FeatureKind::Numeric => FeatureEncoder::Numeric,
                FeatureKind::Categorical => {
                    let vocab: BTreeSet<&str> = fit_rows.iter().map(|&i| table.cell(i, f.index).raw.as_str()).collect();
                    FeatureEncoder::Categorical {
                        vocab: vocab.into_iter().map(str::to_string).collect(),
                    }
                }
            })
            .collect();
        Self {
            mode: EncoderMode::Base,
            token_dim,
            source_dim: None,
            features,
        }
    }

    pub fn llm(n_features: usize, source_dim: usize, token_dim: usize) -> Self {
        Self {
            mode: EncoderMode::Llm,
            token_dim,
            source_dim: Some(source_dim),
            features: vec![FeatureEncoder::Numeric; n_features],
        }
    }

    pub fn n_features(&self) -> usize {
        self.features.len()
    }
}

/// Precomputed base-encoder inputs for every row of a table.
#[derive(Debug, Clone)]
pub struct BaseFeatures {
    n: usize,
    m: usize,
    /// Standardised value per cell (0 for categorical cells).
    z: Vec<f64>,
    /// Lookup row per cell (0 for numeric cells).
    ids: Vec<usize>,
}

impl BaseFeatures {
    pub fn new(table: &DatasetTable, spec: &EncoderSpec, standardizer: &Standardizer) -> Result<Self> {
        if spec.mode != EncoderMode::Base || spec.n_features() != table.n_features() {
            return Err(Error::Config(format!(
                "encoder for {} {} features cannot read a table with {}",
                spec.n_features(),
                spec.mode,
                table.n_features()
            )));
        }
        let (n, m) = (table.n_rows(), table.n_features());
        let lookups: Vec<Option<HashMap<&str, usize>>> = spec
            .features
            .iter()
            .map(|f| match f {
                FeatureEncoder::Numeric => None,
                FeatureEncoder::Categorical { vocab } => {
                    Some(vocab.iter().enumerate().map(|(k, v)| (v.as_str(), k)).collect())
                }
            })
            .collect();
        let mut z = vec![0.0; n * m];
        let mut ids = vec![0; n * m];
        for i in 0..n {
            for (col, lookup) in lookups.iter().enumerate() {
                match lookup {
                    None => z[i * m + col] = standardizer.transform(table, i, col),
                    Some(map) => {
                        let unk = map.len();
                        ids[i * m + col] = map.get(table.cell(i, col).raw.as_str()).copied().unwrap_or(unk);
                    }
                }
            }
        }
        Ok(Self { n, m, z, ids })
    }

    pub fn z(&self, row: usize, col: usize) -> f64 {
        self.z[row * self.m + col]
    }

    pub fn id(&self, row: usize, col: usize) -> usize {
        self.ids[row * self.m + col]
    }
}

/// One mini-batch of model input.
#[derive(Debug, Clone)]
pub enum Batch<T> {
    /// Feature-major: `z[m * B + b]`, `ids[m * B + b]`.
    Base { rows: usize, z: Vec<T>, ids: Vec<usize> },
    /// `[B, M, d]` frozen embeddings.
    Llm(Tensor<T>),
}

impl<T: Scalar> Batch<T> {
    pub fn rows(&self) -> usize {
        match self {
            Batch::Base { rows, .. } => *rows,
            Batch::Llm(t) => t.shape()[0],
        }
    }
}

/// Where a model's per-row input comes from.
#[derive(Debug, Clone)]
pub enum FeatureSource<'a> {
    Base(BaseFeatures),
    Llm(&'a EmbeddedTensor),
}

impl FeatureSource<'_> {
    pub fn n_rows(&self) -> usize {
        match self {
            FeatureSource::Base(b) => b.n,
            FeatureSource::Llm(e) => e.n,
        }
    }

    pub fn mode(&self) -> EncoderMode {
        match self {
            FeatureSource::Base(_) => EncoderMode::Base,
            FeatureSource::Llm(_) => EncoderMode::Llm,
        }
    }

    pub fn batch<T: Scalar>(&self, rows: &[usize]) -> Batch<T> {
        match self {
            FeatureSource::Base(f) => {
                let bsz = rows.len();
                let mut z = Vec::with_capacity(bsz * f.m);
                let mut ids = Vec::with_capacity(bsz * f.m);
                for col in 0..f.m {
                    for &r in rows {
                        z.push(T::lit(f.z(r, col)));
                        ids.push(f.id(r, col));
                    }
                }
                Batch::Base { rows: bsz, z, ids }
            }
            FeatureSource::Llm(e) => {
                let data = e.gather_rows(rows).into_iter().map(|x| T::lit(f64::from(x))).collect();
                Batch::Llm(Tensor::new([rows.len(), e.m, e.d], data).expect("gathered rows match shape"))
            }
        }
    }
}
