//! Client for embeddings endpoints speaking `{model, input}` ->
//! `{data: [{embedding}]}`.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{check_vectors, EmbedError, EmbeddingProvider};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpConfig {
    pub endpoint: String,
    pub model_id: String,
    pub dimension: usize,
    #[serde(default, skip_serializing)]
    pub api_key: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default = "default_attempts")]
    pub max_attempts: u32,
    #[serde(default = "default_backoff")]
    pub initial_backoff_ms: u64,
}

fn default_timeout() -> u64 {
    30
}

fn default_attempts() -> u32 {
    4
}

fn default_backoff() -> u64 {
    500
}

impl HttpConfig {
    pub fn new(endpoint: impl Into<String>, model_id: impl Into<String>, dimension: usize) -> Self {
        Self {
            endpoint: endpoint.into(),
            model_id: model_id.into(),
            dimension,
            api_key: None,
            timeout_secs: default_timeout(),
            max_attempts: default_attempts(),
            initial_backoff_ms: default_backoff(),
        }
    }
}

#[derive(Serialize)]
struct Request<'a> {
    model: &'a str,
    input: &'a [String],
}

#[derive(Deserialize)]
struct Item {
    embedding: Vec<f32>,
    #[serde(default)]
    index: Option<usize>,
}

#[derive(Deserialize)]
struct Response {
    data: Vec<Item>,
}

pub struct HttpProvider {
    config: HttpConfig,
    agent: ureq::Agent,
}

impl std::fmt::Debug for HttpProvider {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpProvider")
            .field("endpoint", &self.config.endpoint)
            .field("model_id", &self.config.model_id)
            .field("dimension", &self.config.dimension)
            .finish()
    }
}

enum Failure {
    Retry(String),
    Fatal(EmbedError),
}

impl HttpProvider {
    pub fn new(config: HttpConfig) -> Result<Self, EmbedError> {
        if config.dimension == 0 {
            return Err(EmbedError::BadResponse("dimension must be positive".into()));
        }
        if config.max_attempts == 0 {
            return Err(EmbedError::BadResponse("max_attempts must be at least 1".into()));
        }
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self { config, agent })
    }

    fn attempt(&self, sentences: &[String]) -> Result<Vec<Vec<f32>>, Failure> {
        let mut req = self.agent.post(&self.config.endpoint).header("Content-Type", "application/json");
        if let Some(key) = &self.config.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(&Request {
                model: &self.config.model_id,
                input: sentences,
            })
            .map_err(|e| Failure::Retry(e.to_string()))?;
        let status = resp.status().as_u16();
        if status == 429 || status >= 500 {
            return Err(Failure::Retry(format!("HTTP {status}")));
        }
        if status >= 400 {
            let body = resp.body_mut().read_to_string().unwrap_or_default();
            return Err(Failure::Fatal(EmbedError::BadResponse(format!(
                "HTTP {status}: {}",
                body.chars().take(200).collect::<String>()
            ))));
        }
        let mut parsed: Response = resp
            .body_mut()
            .read_json()
            .map_err(|e| Failure::Fatal(EmbedError::BadResponse(e.to_string())))?;
        if parsed.data.iter().all(|d| d.index.is_some()) {
            parsed.data.sort_by_key(|d| d.index);
        }
        let vectors: Vec<Vec<f32>> = parsed.data.into_iter().map(|d| d.embedding).collect();
        check_vectors(self, sentences.len(), &vectors).map_err(Failure::Fatal)?;
        Ok(vectors)
    }

    /// `embed_batch` with the batch number carried into transport errors.
    pub fn embed_numbered(&self, batch: usize, sentences: &[String]) -> Result<Vec<Vec<f32>>, EmbedError> {
        if sentences.is_empty() {
            return Err(EmbedError::EmptyBatch);
        }
        let mut backoff = Duration::from_millis(self.config.initial_backoff_ms);
        let mut last = String::new();
        for attempt in 1..=self.config.max_attempts {
            match self.attempt(sentences) {
                Ok(v) => return Ok(v),
                Err(Failure::Fatal(e)) => return Err(e),
                Err(Failure::Retry(msg)) => {
                    log::warn!("embedding batch {batch}, attempt {attempt}: {msg}");
                    last = msg;
                    if attempt < self.config.max_attempts {
                        std::thread::sleep(backoff);
                        backoff *= 2;
                    }
                }
            }
        }
        Err(EmbedError::Transport {
            batch,
            attempts: self.config.max_attempts,
            message: last,
        })
    }
}

impl EmbeddingProvider for HttpProvider {
    fn model_id(&self) -> &str {
        &self.config.model_id
    }

    fn dimension(&self) -> usize {
        self.config.dimension
    }

    fn embed_batch(&self, sentences: &[String]) -> Result<Vec<Vec<f32>>, EmbedError> {
        self.embed_numbered(0, sentences)
    }
}
