//! Rationale embeddings and cosine similarity.
//!
//! Vectors are stored as received (f32, unnormalized unless the provider
//! normalizes); similarity accumulates in f64 so the symmetry property is
//! exact. Zero vectors are a hard error rather than a defaulted
//! similarity, since a silent 0 would corrupt argmin selection.

use serde::{Deserialize, Serialize};

use crate::cache::sha256_hex;
use crate::gateway::{EmbeddingProvider, GatewayError};

/// Norm tolerance for flagging a vector as unit-length.
const NORM_EPSILON: f64 = 1e-6;

#[derive(Debug, thiserror::Error)]
pub enum EmbedError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("zero vector has no direction; cosine undefined")]
    ZeroVector,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// A fixed-dimension embedding of one rationale text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RationaleEmbedding {
    /// Digest of the source rationale text.
    pub source_hash: String,
    pub vector: Vec<f32>,
    pub dimension: usize,
    pub normalized: bool,
}

impl RationaleEmbedding {
    pub fn new(source_text: &str, vector: Vec<f32>) -> Self {
        let norm = norm_f64(&vector);
        Self {
            source_hash: sha256_hex(source_text.as_bytes()),
            dimension: vector.len(),
            normalized: (norm - 1.0).abs() < NORM_EPSILON,
            vector,
        }
    }

    /// Test/report helper for building an embedding straight from numbers.
    pub fn from_vector(vector: Vec<f32>) -> Self {
        let norm = norm_f64(&vector);
        Self {
            source_hash: String::new(),
            dimension: vector.len(),
            normalized: (norm - 1.0).abs() < NORM_EPSILON,
            vector,
        }
    }
}

fn norm_f64(v: &[f32]) -> f64 {
    v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
}

/// Embeds texts in order through the provider (cache-backed), verifying
/// that every returned vector shares one dimension.
pub fn embed(
    texts: &[String],
    embedder: &EmbeddingProvider,
) -> Result<Vec<RationaleEmbedding>, EmbedError> {
    if texts.is_empty() {
        return Ok(Vec::new());
    }
    let vectors = embedder.embed_cached(texts)?;
    let expected = vectors.first().map(|v| v.len()).unwrap_or(0);
    let mut out = Vec::with_capacity(vectors.len());
    for (text, vector) in texts.iter().zip(vectors) {
        if vector.len() != expected {
            return Err(EmbedError::DimensionMismatch {
                expected,
                got: vector.len(),
            });
        }
        out.push(RationaleEmbedding::new(text, vector));
    }
    Ok(out)
}

/// Cosine similarity (u·v)/(‖u‖‖v‖), accumulated in f64.
pub fn cosine(u: &RationaleEmbedding, v: &RationaleEmbedding) -> Result<f64, EmbedError> {
    if u.dimension != v.dimension {
        return Err(EmbedError::DimensionMismatch {
            expected: u.dimension,
            got: v.dimension,
        });
    }
    let mut dot = 0.0f64;
    let mut nu = 0.0f64;
    let mut nv = 0.0f64;
    for (&a, &b) in u.vector.iter().zip(&v.vector) {
        let (a, b) = (a as f64, b as f64);
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    if nu == 0.0 || nv == 0.0 {
        return Err(EmbedError::ZeroVector);
    }
    Ok(dot / (nu.sqrt() * nv.sqrt()))
}
