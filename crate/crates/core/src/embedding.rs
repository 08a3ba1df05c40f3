//! Deterministic text vectors shared by retrieval, refinement, and consolidation.
//!
//! The reference embedder is a hashed bag of words: lowercase, split on
//! non-alphanumeric boundaries, FNV-1a each token into one of `dim` signed
//! buckets, accumulate, L2-normalize. It is not a semantic model; it exists so
//! every pipeline stage runs deterministically with no external service.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default embedding width when no store config overrides it.
pub const DEFAULT_DIMENSION: usize = 256;

#[derive(Debug, Error, PartialEq)]
pub enum VectorError {
    #[error("vector dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// Dense vector; invariant: all-zero, or L2 norm within 1e-6 of 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    /// Zero vector of the given width (the embedding of empty text).
    pub fn zeros(dim: usize) -> Self {
        EmbeddingVector(vec![0.0; dim])
    }

    /// Normalizes raw components to unit length; an all-zero input stays zero.
    pub fn normalized(raw: Vec<f64>) -> Self {
        let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            EmbeddingVector(raw)
        } else {
            EmbeddingVector(raw.into_iter().map(|x| x / norm).collect())
        }
    }

    /// Wraps components that are already normalized (or zero).
    pub fn from_components(components: Vec<f64>) -> Self {
        EmbeddingVector(components)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|x| *x == 0.0)
    }

    pub fn l2_norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Rounds every component to 9 significant decimal digits.
    ///
    /// Graphs store quantized vectors so snapshots and event logs round-trip
    /// bit-exactly while staying byte-canonical.
    pub fn quantized(&self) -> Self {
        EmbeddingVector(self.0.iter().map(|x| quantize_component(*x)).collect())
    }
}

fn quantize_component(x: f64) -> f64 {
    if x == 0.0 {
        return 0.0;
    }
    // 9 significant digits: one leading digit plus 8 after the point.
    format!("{x:.8e}").parse().expect("formatted float reparses")
}

/// Lowercases and splits on non-alphanumeric boundaries; drops empty tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_owned)
        .collect()
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for b in bytes {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

/// Hashed bag-of-words embedding: bucket = hash mod dim, sign from the top
/// hash bit, accumulated then L2-normalized. Empty text embeds to zero.
pub fn embed(text: &str, dim: usize) -> EmbeddingVector {
    assert!(dim > 0, "embedding dimension must be positive");
    let mut raw = vec![0.0_f64; dim];
    for token in tokenize(text) {
        let hash = fnv1a64(token.as_bytes());
        let bucket = (hash % dim as u64) as usize;
        let sign = if hash & (1 << 63) == 0 { 1.0 } else { -1.0 };
        raw[bucket] += sign;
    }
    EmbeddingVector::normalized(raw)
}

/// Cosine similarity in [-1, 1]; defined as 0 when either vector is zero.
pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, VectorError> {
    if a.dim() != b.dim() {
        return Err(VectorError::DimensionMismatch {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    let na = a.l2_norm();
    let nb = b.l2_norm();
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    let dot: f64 = a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Whitespace token count; the unit used for context budgets and skill length.
pub fn token_length(text: &str) -> usize {
    text.split_whitespace().count()
}
