//! Embedding providers, cosine similarity, and the flat retrieval index.

mod index;
mod providers;

pub use index::{build_index, group_by_intent, IntentGroup, IntentGroupSet, Neighbor, RetrievalSet, VectorIndex};
pub use providers::{HashEmbedder, MemoProvider, PrecomputedStore, RemoteEmbedder};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("embedding provider unavailable: {0}")]
    ProviderUnavailable(String),
    #[error("no precomputed embedding for text: {0:?}")]
    MissingEmbedding(String),
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("embedding for {0:?} is zero or non-finite")]
    InvalidVector(String),
    #[error("cannot build an index over an empty train split")]
    EmptyTrain,
    #[error("unknown train utterance id {0}")]
    UnknownId(usize),
}

/// A finite, nonzero embedding. Constructors reject zero and non-finite
/// vectors so similarity math never has to re-check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self, EmbedError> {
        if values.is_empty()
            || values.iter().any(|v| !v.is_finite())
            || values.iter().all(|v| *v == 0.0)
        {
            return Err(EmbedError::InvalidVector(format!(
                "{} entries",
                values.len()
            )));
        }
        Ok(Self { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Unit-length copy; valid because construction rejects zero vectors.
    pub fn normalized(&self) -> Vec<f64> {
        let norm = self.norm();
        self.values.iter().map(|v| v / norm).collect()
    }
}

/// Cosine similarity, clamped to [-1, 1] against float drift. Negative
/// zero is canonicalized so equal-by-value similarities compare equal.
pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, EmbedError> {
    if a.dim() != b.dim() {
        return Err(EmbedError::DimensionMismatch {
            left: a.dim(),
            right: b.dim(),
        });
    }
    let dot: f64 = a
        .values
        .iter()
        .zip(&b.values)
        .map(|(x, y)| x * y)
        .sum();
    Ok(clamp_similarity(dot / (a.norm() * b.norm())))
}

pub(crate) fn clamp_similarity(raw: f64) -> f64 {
    let clamped = raw.clamp(-1.0, 1.0);
    if clamped == 0.0 {
        0.0
    } else {
        clamped
    }
}

/// Anything that can turn texts into embeddings: a remote HTTP service, a
/// file-backed store of precomputed vectors, or the deterministic hash mock.
pub trait EmbeddingProvider: Send + Sync {
    /// One vector per input text, in input order.
    fn embed(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbedError>;

    /// Short human-readable description for provenance output.
    fn describe(&self) -> String;
}

/// Batch-embed helper mirroring the provider call.
pub fn embed_text(
    provider: &dyn EmbeddingProvider,
    texts: &[&str],
) -> Result<Vec<EmbeddingVector>, EmbedError> {
    provider.embed(texts)
}
