//! Embeddings, cosine similarity and an exact top-k vector index.
//!
//! Both table selection and note retrieval rank with [`VectorIndex::top_k`].
//! Search is exhaustive; ties are broken by ascending key so results never
//! depend on insertion order.

mod backend;

use std::cmp::Ordering;
use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use backend::{embed, CountingEmbedder, Embedder, HashEmbedder, RemoteEmbedder, RemoteEmbedderConfig};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmbedError {
    #[error("vector has a non-finite entry at {0}")]
    NonFinite(usize),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("zero-norm vector")]
    ZeroNorm,
    #[error("duplicate index key `{0}`")]
    DuplicateKey(String),
    #[error("embedding transport error: {0}")]
    Transport(String),
    #[error("embedding backend configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Vector(Vec<f64>);

impl Vector {
    pub fn new(values: Vec<f64>) -> Result<Self, EmbedError> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(EmbedError::NonFinite(i));
        }
        Ok(Self(values))
    }

    /// `(1/√d, …, 1/√d)`.
    pub fn constant_unit(dim: usize) -> Self {
        Self(vec![1.0 / (dim as f64).sqrt(); dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Unit-length copy, or `None` for a zero vector.
    pub fn normalized(&self) -> Option<Self> {
        let n = self.norm();
        if n == 0.0 {
            return None;
        }
        Some(Self(self.0.iter().map(|x| x / n).collect()))
    }
}

impl TryFrom<Vec<f64>> for Vector {
    type Error = EmbedError;

    fn try_from(values: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(values)
    }
}

impl From<Vector> for Vec<f64> {
    fn from(v: Vector) -> Self {
        v.0
    }
}

/// `dot(u, v) / (‖u‖ ‖v‖)`, clamped to `[-1, 1]`.
pub fn cosine(u: &Vector, v: &Vector) -> Result<f64, EmbedError> {
    if u.dim() != v.dim() {
        return Err(EmbedError::DimensionMismatch { expected: u.dim(), actual: v.dim() });
    }
    let dot: f64 = u.0.iter().zip(&v.0).map(|(a, b)| a * b).sum();
    let nu = u.norm();
    let nv = v.norm();
    if nu == 0.0 || nv == 0.0 {
        return Err(EmbedError::ZeroNorm);
    }
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub key: String,
    pub vector: Vector,
    pub payload_digest: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VectorIndex {
    dimension: Option<usize>,
    entries: Vec<IndexEntry>,
    #[serde(skip)]
    keys: HashSet<String>,
}

impl VectorIndex {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dimension(&self) -> Option<usize> {
        self.dimension
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn insert(&mut self, key: impl Into<String>, vector: Vector, payload_digest: impl Into<String>) -> Result<(), EmbedError> {
        let key = key.into();
        if let Some(d) = self.dimension {
            if d != vector.dim() {
                return Err(EmbedError::DimensionMismatch { expected: d, actual: vector.dim() });
            }
        }
        if self.keys.contains(&key) {
            return Err(EmbedError::DuplicateKey(key));
        }
        self.dimension = Some(vector.dim());
        self.keys.insert(key.clone());
        self.entries.push(IndexEntry { key, vector, payload_digest: payload_digest.into() });
        Ok(())
    }

    /// Rebuilds the key set after deserialization and checks invariants.
    pub fn reindex(&mut self) -> Result<(), EmbedError> {
        let entries = std::mem::take(&mut self.entries);
        let dimension = self.dimension;
        *self = Self::default();
        for e in entries {
            self.insert(e.key, e.vector, e.payload_digest)?;
        }
        if self.dimension.is_none() {
            self.dimension = dimension;
        }
        Ok(())
    }

    /// The `k` best entries by cosine similarity to `query`.
    pub fn top_k(&self, query: &Vector, k: usize) -> Result<Vec<(String, f64)>, EmbedError> {
        self.top_k_where(query, k, |_| true)
    }

    /// Like [`VectorIndex::top_k`], restricted to entries whose key passes
    /// `keep`.
    pub fn top_k_where<F>(&self, query: &Vector, k: usize, keep: F) -> Result<Vec<(String, f64)>, EmbedError>
    where
        F: Fn(&str) -> bool,
    {
        if let Some(d) = self.dimension {
            if d != query.dim() {
                return Err(EmbedError::DimensionMismatch { expected: d, actual: query.dim() });
            }
        }
        if k == 0 {
            return Ok(Vec::new());
        }
        let mut scored = Vec::with_capacity(self.entries.len());
        for e in self.entries.iter().filter(|e| keep(&e.key)) {
            scored.push((e.key.as_str(), cosine(query, &e.vector)?));
        }
        let order = |a: &(&str, f64), b: &(&str, f64)| rank_order(*a, *b);
        if scored.len() > k {
            scored.select_nth_unstable_by(k - 1, order);
            scored.truncate(k);
        }
        scored.sort_unstable_by(order);
        Ok(scored.into_iter().map(|(key, s)| (key.to_owned(), s)).collect())
    }
}

/// Score descending, then key ascending.
pub fn rank_order(a: (&str, f64), b: (&str, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(x: &[f64]) -> Vector {
        Vector::new(x.to_vec()).unwrap()
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine(&v(&[1.0, 0.0]), &v(&[1.0, 0.0])).unwrap(), 1.0);
        assert_eq!(cosine(&v(&[1.0, 0.0]), &v(&[0.0, 1.0])).unwrap(), 0.0);
        // dot = 2 + 2 + 4 = 8, norms 3 and 3
        let expected = 8.0 / (3.0 * 3.0);
        let got = cosine(&v(&[1.0, 2.0, 2.0]), &v(&[2.0, 1.0, 2.0])).unwrap();
        assert!((got - expected).abs() < 1e-15);
    }

    #[test]
    fn cosine_errors() {
        assert_eq!(
            cosine(&v(&[1.0]), &v(&[1.0, 0.0])),
            Err(EmbedError::DimensionMismatch { expected: 1, actual: 2 })
        );
        assert_eq!(cosine(&v(&[0.0, 0.0]), &v(&[1.0, 0.0])), Err(EmbedError::ZeroNorm));
    }

    #[test]
    fn non_finite_rejected() {
        assert_eq!(Vector::new(vec![1.0, f64::NAN]), Err(EmbedError::NonFinite(1)));
    }

    fn small_index() -> VectorIndex {
        let mut idx = VectorIndex::new();
        idx.insert("c", v(&[1.0, 0.0]), "").unwrap();
        idx.insert("a", v(&[0.0, 1.0]), "").unwrap();
        idx.insert("b", v(&[1.0, 0.0]), "").unwrap();
        idx
    }

    #[test]
    fn top_k_edge_cases() {
        let idx = small_index();
        let q = v(&[1.0, 0.0]);
        assert!(idx.top_k(&q, 0).unwrap().is_empty());
        let all = idx.top_k(&q, 10).unwrap();
        assert_eq!(all.iter().map(|r| r.0.as_str()).collect::<Vec<_>>(), ["b", "c", "a"]);
        assert_eq!(idx.top_k(&q, 1).unwrap(), vec![("b".to_string(), 1.0)]);
    }

    #[test]
    fn index_rejects_duplicates_and_mixed_dimensions() {
        let mut idx = small_index();
        assert_eq!(idx.insert("a", v(&[1.0, 1.0]), ""), Err(EmbedError::DuplicateKey("a".into())));
        assert!(matches!(idx.insert("z", v(&[1.0]), ""), Err(EmbedError::DimensionMismatch { .. })));
        assert!(matches!(idx.top_k(&v(&[1.0]), 1), Err(EmbedError::DimensionMismatch { .. })));
    }

    #[test]
    fn serde_round_trip_restores_keys() {
        let idx = small_index();
        let json = serde_json::to_string(&idx).unwrap();
        let mut back: VectorIndex = serde_json::from_str(&json).unwrap();
        back.reindex().unwrap();
        assert_eq!(back, idx);
        assert!(back.insert("a", v(&[1.0, 1.0]), "").is_err());
    }
}
