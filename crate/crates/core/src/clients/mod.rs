//! External model roles and their implementations.
//!
//! Three roles sit behind traits:
//!
//! - [`Embedder`]: text and image encoders into a shared unit-norm space.
//! - [`Captioner`]: an (M)LLM that captions reference images and rewrites
//!   captions into pseudo-target descriptions.
//! - [`RelevanceScorer`]: an MLLM asked a Yes/No question per candidate,
//!   reporting `p(yes)`.
//!
//! Implementations compose as wrappers, outermost first:
//! [`Cached`] → [`Metered`] → [`Admission`] → mock or HTTP client. The
//! metered counter therefore counts only requests that miss the cache.

pub mod cache;
pub mod http;
pub mod limit;
pub mod mock;
pub mod yes_prob;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::vector::{EmbeddingVector, VectorError};

pub use cache::{CacheKey, Cached, ResponseCache};
pub use http::{HttpCaptioner, HttpEmbedder, HttpScorer};
pub use limit::{bounded_map, Admission, CallStats, Metered};
pub use mock::{DefaultScore, MockCaptioner, MockEmbedder, MockFixtures, MockScorer, ScoreFixture};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ClientError {
    #[error("endpoint unavailable: {0}")]
    EndpointUnavailable(String),
    #[error("request timed out: {0}")]
    Timeout(String),
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("embedding dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("completion was empty")]
    EmptyCompletion,
    #[error("answer is neither Yes nor No: {0:?}")]
    UnparseableAnswer(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("response cache: {0}")]
    Cache(String),
}

impl ClientError {
    /// Whether a retry might succeed.
    pub fn is_transient(&self) -> bool {
        matches!(
            self,
            ClientError::EndpointUnavailable(_) | ClientError::Timeout(_)
        )
    }
}

impl From<VectorError> for ClientError {
    fn from(e: VectorError) -> Self {
        match e {
            VectorError::DimensionMismatch { expected, found } => {
                ClientError::DimensionMismatch { expected, found }
            }
            other => ClientError::MalformedResponse(other.to_string()),
        }
    }
}

/// Model role, used in cache keys and call statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Embedder,
    Captioner,
    Scorer,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Embedder => "embedder",
            Role::Captioner => "captioner",
            Role::Scorer => "scorer",
        }
    }
}

pub trait Embedder: Send + Sync {
    fn model_id(&self) -> String;
    fn embed_text(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, ClientError>;
    fn embed_image(&self, image_refs: &[String]) -> Result<Vec<EmbeddingVector>, ClientError>;
}

pub trait Captioner: Send + Sync {
    fn model_id(&self) -> String;
    /// Returns exactly `n` non-empty completions for `prompt` about `image_ref`.
    fn caption(&self, image_ref: &str, prompt: &str, n: usize) -> Result<Vec<String>, ClientError>;
}

pub trait RelevanceScorer: Send + Sync {
    fn model_id(&self) -> String;
    /// Probability in `[0, 1]` that the answer to `prompt` is "Yes".
    fn score_yes_probability(&self, prompt: &str, image_refs: &[String]) -> Result<f64, ClientError>;
}

impl<T: Embedder + ?Sized> Embedder for Arc<T> {
    fn model_id(&self) -> String {
        (**self).model_id()
    }
    fn embed_text(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, ClientError> {
        (**self).embed_text(texts)
    }
    fn embed_image(&self, image_refs: &[String]) -> Result<Vec<EmbeddingVector>, ClientError> {
        (**self).embed_image(image_refs)
    }
}

impl<T: Captioner + ?Sized> Captioner for Arc<T> {
    fn model_id(&self) -> String {
        (**self).model_id()
    }
    fn caption(&self, image_ref: &str, prompt: &str, n: usize) -> Result<Vec<String>, ClientError> {
        (**self).caption(image_ref, prompt, n)
    }
}

impl<T: RelevanceScorer + ?Sized> RelevanceScorer for Arc<T> {
    fn model_id(&self) -> String {
        (**self).model_id()
    }
    fn score_yes_probability(&self, prompt: &str, image_refs: &[String]) -> Result<f64, ClientError> {
        (**self).score_yes_probability(prompt, image_refs)
    }
}

/// One handle per role.
#[derive(Clone)]
pub struct ModelClients {
    pub embedder: Arc<dyn Embedder>,
    pub captioner: Arc<dyn Captioner>,
    pub scorer: Arc<dyn RelevanceScorer>,
}

impl ModelClients {
    pub fn new(
        embedder: impl Embedder + 'static,
        captioner: impl Captioner + 'static,
        scorer: impl RelevanceScorer + 'static,
    ) -> Self {
        Self {
            embedder: Arc::new(embedder),
            captioner: Arc::new(captioner),
            scorer: Arc::new(scorer),
        }
    }
}

fn default_timeout_ms() -> u64 {
    60_000
}
fn default_max_parallel() -> usize {
    4
}
fn default_max_retries() -> u32 {
    2
}
fn default_max_batch() -> usize {
    64
}

/// Connection settings for one remote model role.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelEndpointConfig {
    pub base_url: String,
    pub model_id: String,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_max_parallel")]
    pub max_parallel: usize,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    /// Name of the environment variable holding the API key.
    #[serde(default)]
    pub api_key_env: String,
    /// Largest batch sent in one embeddings request.
    #[serde(default = "default_max_batch")]
    pub max_batch: usize,
    /// Sampling temperature for completions; `None` leaves the endpoint default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    /// Directory that relative image refs are resolved against.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_root: Option<String>,
}

impl ModelEndpointConfig {
    pub fn new(base_url: impl Into<String>, model_id: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model_id: model_id.into(),
            timeout_ms: default_timeout_ms(),
            max_parallel: default_max_parallel(),
            max_retries: default_max_retries(),
            api_key_env: String::new(),
            max_batch: default_max_batch(),
            temperature: None,
            image_root: None,
        }
    }

    pub fn validate(&self) -> Result<(), ClientError> {
        if self.max_parallel == 0 {
            return Err(ClientError::InvalidRequest("max_parallel must be >= 1".into()));
        }
        if self.timeout_ms == 0 {
            return Err(ClientError::InvalidRequest("timeout_ms must be > 0".into()));
        }
        if self.max_batch == 0 {
            return Err(ClientError::InvalidRequest("max_batch must be >= 1".into()));
        }
        if self.base_url.trim().is_empty() || self.model_id.trim().is_empty() {
            return Err(ClientError::InvalidRequest("base_url and model_id are required".into()));
        }
        Ok(())
    }
}

/// Checks a caption/completion batch: exactly `n` entries, none blank.
pub fn validate_completions(n: usize, out: Vec<String>) -> Result<Vec<String>, ClientError> {
    if out.iter().any(|s| s.trim().is_empty()) {
        return Err(ClientError::EmptyCompletion);
    }
    if out.len() != n {
        return Err(ClientError::MalformedResponse(format!(
            "expected {n} completions, got {}",
            out.len()
        )));
    }
    Ok(out)
}

/// Checks an embedding batch: one vector per input, one shared dimension.
pub fn validate_embeddings(
    expected_len: usize,
    out: Vec<EmbeddingVector>,
) -> Result<Vec<EmbeddingVector>, ClientError> {
    if out.len() != expected_len {
        return Err(ClientError::MalformedResponse(format!(
            "expected {expected_len} embeddings, got {}",
            out.len()
        )));
    }
    if let Some(first) = out.first() {
        let dim = first.dim();
        if let Some(bad) = out.iter().find(|v| v.dim() != dim) {
            return Err(ClientError::DimensionMismatch {
                expected: dim,
                found: bad.dim(),
            });
        }
    }
    Ok(out)
}

/// Checks a yes-probability lies in `[0, 1]` (with slack) and clamps the slack away.
pub fn validate_probability(p: f64) -> Result<f64, ClientError> {
    let slack = crate::vector::SCORE_SLACK;
    if !p.is_finite() || p < -slack || p > 1.0 + slack {
        return Err(ClientError::MalformedResponse(format!(
            "probability {p} outside [0, 1]"
        )));
    }
    Ok(p.clamp(0.0, 1.0))
}
