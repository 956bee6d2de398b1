//! Sentence embeddings: providers, the on-disk cache, and the embedded
//! tensor `E(X)`.

mod cache;
mod http;
mod tensor;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub use cache::{sentence_hash, EmbeddingCache};
pub use http::{HttpConfig, HttpProvider};
pub use tensor::{build_embedded_tensor, EmbeddedTensor, EmbedOptions};

#[derive(Debug, thiserror::Error)]
pub enum EmbedError {
    #[error("embedding batch {batch} failed after {attempts} attempt(s): {message}")]
    Transport {
        batch: usize,
        attempts: u32,
        message: String,
    },
    #[error("provider `{model_id}` declared dimension {expected} but returned {got} components")]
    DimensionMismatch {
        model_id: String,
        expected: usize,
        got: usize,
    },
    #[error("bad provider response: {0}")]
    BadResponse(String),
    #[error("embedding cache: {0}")]
    Cache(String),
    #[error("empty sentence batch")]
    EmptyBatch,
    #[error("embedding for cell (row {row}, col {col}) failed: {source}")]
    AtCell {
        row: usize,
        col: usize,
        #[source]
        source: Box<EmbedError>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Anything that maps sentences to fixed-width vectors.
pub trait EmbeddingProvider: Send + Sync {
    fn model_id(&self) -> &str;
    fn dimension(&self) -> usize;
    /// One vector per input sentence, in input order.
    fn embed_batch(&self, sentences: &[String]) -> Result<Vec<Vec<f32>>, EmbedError>;
}

/// Check a provider's output against its declared shape.
pub(crate) fn check_vectors(
    provider: &dyn EmbeddingProvider,
    n: usize,
    vectors: &[Vec<f32>],
) -> Result<(), EmbedError> {
    if vectors.len() != n {
        return Err(EmbedError::BadResponse(format!(
            "{} vectors for {n} sentences",
            vectors.len()
        )));
    }
    for v in vectors {
        if v.len() != provider.dimension() {
            return Err(EmbedError::DimensionMismatch {
                model_id: provider.model_id().to_string(),
                expected: provider.dimension(),
                got: v.len(),
            });
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(EmbedError::BadResponse("non-finite embedding component".into()));
        }
    }
    Ok(())
}

/// Deterministic offline provider: a hash of `(model_id, sentence)` seeds a
/// generator whose normal draws are normalised to unit length.
#[derive(Debug, Clone)]
pub struct HashProvider {
    model_id: String,
    dimension: usize,
}

impl HashProvider {
    pub fn new(model_id: impl Into<String>, dimension: usize) -> Result<Self, EmbedError> {
        if dimension == 0 {
            return Err(EmbedError::BadResponse("dimension must be positive".into()));
        }
        Ok(Self {
            model_id: model_id.into(),
            dimension,
        })
    }

    pub fn embed_one(&self, sentence: &str) -> Vec<f32> {
        let seed = fnv1a64(&[self.model_id.as_bytes(), &[0xff], sentence.as_bytes()]);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw: Vec<f64> = (0..self.dimension).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        raw.iter().map(|x| (x / norm) as f32).collect()
    }
}

impl EmbeddingProvider for HashProvider {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed_batch(&self, sentences: &[String]) -> Result<Vec<Vec<f32>>, EmbedError> {
        if sentences.is_empty() {
            return Err(EmbedError::EmptyBatch);
        }
        Ok(sentences.iter().map(|s| self.embed_one(s)).collect())
    }
}

pub(crate) fn fnv1a64(parts: &[&[u8]]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for part in parts {
        for &b in *part {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}
