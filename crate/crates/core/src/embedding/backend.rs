use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::{EmbedError, Vector};
use crate::text;

/// An embedding function φ.
///
/// Implementations return raw vectors; callers go through [`embed`], which
/// normalizes input whitespace and output length.
pub trait Embedder: Send + Sync {
    /// Stable identifier; persisted indexes are keyed by it.
    fn id(&self) -> String;
    fn dimension(&self) -> usize;
    fn embed_raw(&self, text: &str) -> Result<Vector, EmbedError>;
}

/// Embeds `text` as a unit vector.
///
/// Input whitespace is collapsed first, so trailing spaces or line breaks
/// never change the vector. Empty input, or input the backend maps to a
/// zero vector, yields the constant unit vector `(1/√d, …, 1/√d)`.
pub fn embed(backend: &dyn Embedder, text: &str) -> Result<Vector, EmbedError> {
    let dim = backend.dimension();
    let normalized = text::collapse_whitespace(text);
    if normalized.is_empty() {
        return Ok(Vector::constant_unit(dim));
    }
    let raw = backend.embed_raw(&normalized)?;
    if raw.dim() != dim {
        return Err(EmbedError::DimensionMismatch { expected: dim, actual: raw.dim() });
    }
    Ok(raw.normalized().unwrap_or_else(|| Vector::constant_unit(dim)))
}

/// Model-free embedder for offline runs: each token is hashed into one of
/// `dim` signed buckets. Vectors share mass only when texts share tokens,
/// so rankings are lexical, not semantic.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dim: usize,
}

impl HashEmbedder {
    pub const DEFAULT_DIM: usize = 64;

    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self { dim }
    }

    /// Lowercases and strips leading/trailing punctuation.
    pub fn normalize_token(token: &str) -> String {
        token.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase()
    }

    /// Bucket index and sign for one normalized token.
    pub fn bucket(&self, token: &str) -> (usize, f64) {
        let h = Sha256::digest(token.as_bytes());
        let mut head = [0u8; 8];
        head.copy_from_slice(&h[..8]);
        let bucket = (u64::from_be_bytes(head) % self.dim as u64) as usize;
        let sign = if h[8] & 1 == 1 { -1.0 } else { 1.0 };
        (bucket, sign)
    }
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self::new(Self::DEFAULT_DIM)
    }
}

impl Embedder for HashEmbedder {
    fn id(&self) -> String {
        format!("hash-projection-{}", self.dim)
    }

    fn dimension(&self) -> usize {
        self.dim
    }

    fn embed_raw(&self, text: &str) -> Result<Vector, EmbedError> {
        let mut values = vec![0.0; self.dim];
        for token in text::tokenize(text) {
            let token = Self::normalize_token(&token);
            if token.is_empty() {
                continue;
            }
            let (b, sign) = self.bucket(&token);
            values[b] += sign;
        }
        Vector::new(values)
    }
}

/// Wraps an embedder and counts backend calls.
pub struct CountingEmbedder<E> {
    inner: E,
    calls: AtomicU64,
}

impl<E: Embedder> CountingEmbedder<E> {
    pub fn new(inner: E) -> Self {
        Self { inner, calls: AtomicU64::new(0) }
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }
}

impl<E: Embedder> Embedder for CountingEmbedder<E> {
    fn id(&self) -> String {
        self.inner.id()
    }

    fn dimension(&self) -> usize {
        self.inner.dimension()
    }

    fn embed_raw(&self, text: &str) -> Result<Vector, EmbedError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.embed_raw(text)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteEmbedderConfig {
    pub endpoint: String,
    pub model: String,
    pub dimension: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
    #[serde(default = "default_timeout_s")]
    pub timeout_s: u64,
}

fn default_timeout_s() -> u64 {
    60
}

/// OpenAI-style `/embeddings` client.
pub struct RemoteEmbedder {
    config: RemoteEmbedderConfig,
    agent: ureq::Agent,
    api_key: Option<String>,
}

impl RemoteEmbedder {
    pub fn new(config: RemoteEmbedderConfig) -> Result<Self, EmbedError> {
        let api_key = match &config.api_key_env {
            Some(var) => Some(
                std::env::var(var).map_err(|_| EmbedError::Config(format!("environment variable {var} is not set")))?,
            ),
            None => None,
        };
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_s)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self { config, agent, api_key })
    }
}

impl Embedder for RemoteEmbedder {
    fn id(&self) -> String {
        format!("remote:{}:{}", self.config.model, self.config.dimension)
    }

    fn dimension(&self) -> usize {
        self.config.dimension
    }

    fn embed_raw(&self, text: &str) -> Result<Vector, EmbedError> {
        let url = format!("{}/embeddings", self.config.endpoint.trim_end_matches('/'));
        let mut call = self.agent.post(&url);
        if let Some(key) = &self.api_key {
            call = call.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = call
            .send_json(&json!({"model": self.config.model, "input": text}))
            .map_err(|e| EmbedError::Transport(e.to_string()))?;
        let status = resp.status();
        let payload: Value = resp
            .body_mut()
            .read_json()
            .map_err(|e| EmbedError::Transport(format!("status {status}: {e}")))?;
        if !status.is_success() {
            return Err(EmbedError::Transport(format!("status {status}: {payload}")));
        }
        let values: Vec<f64> = payload["data"][0]["embedding"]
            .as_array()
            .ok_or_else(|| EmbedError::Transport("response has no data[0].embedding".into()))?
            .iter()
            .map(|v| v.as_f64().ok_or_else(|| EmbedError::Transport("non-numeric embedding entry".into())))
            .collect::<Result<_, _>>()?;
        Vector::new(values)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_unit_vectors() {
        let e = HashEmbedder::default();
        let a = embed(&e, "last aspirin dose").unwrap();
        let b = embed(&e, "last aspirin dose").unwrap();
        assert_eq!(a, b);
        assert!((a.norm() - 1.0).abs() < 1e-9);
        assert_eq!(a.dim(), 64);
    }

    /// Recomputes the single-token projection straight from SHA-256.
    #[test]
    fn trailing_whitespace_does_not_change_vector() {
        let e = HashEmbedder::default();
        let a = embed(&e, "aspirin").unwrap();
        let b = embed(&e, "aspirin ").unwrap();
        assert_eq!(a, b);

        let h = Sha256::digest(b"aspirin");
        let bucket = (u64::from_be_bytes(h[..8].try_into().unwrap()) % 64) as usize;
        let sign = if h[8] & 1 == 1 { -1.0 } else { 1.0 };
        let mut expected = vec![0.0; 64];
        expected[bucket] = sign;
        assert_eq!(a.as_slice(), expected.as_slice());
    }

    #[test]
    fn empty_text_is_constant_unit_vector() {
        let e = HashEmbedder::new(4);
        let v = embed(&e, "  \n ").unwrap();
        assert_eq!(v.as_slice(), &[0.5, 0.5, 0.5, 0.5]);
        // punctuation-only text hashes nothing
        assert_eq!(embed(&e, "...").unwrap(), v);
    }

    #[test]
    fn counting_wrapper_counts_backend_calls_only() {
        let e = CountingEmbedder::new(HashEmbedder::default());
        embed(&e, "a").unwrap();
        embed(&e, "").unwrap();
        assert_eq!(e.calls(), 1);
    }
}
