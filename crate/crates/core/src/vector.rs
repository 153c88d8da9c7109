//! Unit-norm embedding vectors and the two primitives everything else is
//! built on: normalization and the dot product.
//!
//! Components are stored as `f32`; all accumulation happens in `f64`.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Norms at or below this are treated as zero.
pub const ZERO_NORM_EPS: f64 = 1e-12;

/// Slack allowed on every `[-1, 1]` / `[0, 1]` / unit-norm range check.
pub const SCORE_SLACK: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum VectorError {
    #[error("vector has no components")]
    Empty,
    #[error("vector norm is zero (<= 1e-12)")]
    ZeroVector,
    #[error("vector component {index} is not finite")]
    NonFinite { index: usize },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
}

/// A fixed-dimension, unit-L2-norm vector with finite components.
///
/// The only ways to obtain one are [`normalize`] and [`EmbeddingVector::from_unit_f32`],
/// so holders can rely on the invariant.
#[derive(Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct EmbeddingVector {
    values: Vec<f32>,
}

impl EmbeddingVector {
    /// Wraps stored `f32` components. Rows already unit norm (within
    /// [`SCORE_SLACK`]) keep their exact bits; anything else is renormalized.
    pub fn from_unit_f32(values: Vec<f32>) -> Result<Self, VectorError> {
        check_finite(values.iter().map(|&x| x as f64))?;
        let norm = l2_norm(values.iter().map(|&x| x as f64));
        if norm <= ZERO_NORM_EPS {
            return Err(VectorError::ZeroVector);
        }
        if (norm - 1.0).abs() > SCORE_SLACK {
            return normalize_f32(&values);
        }
        Ok(Self { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.values
    }

    pub fn into_inner(self) -> Vec<f32> {
        self.values
    }

    pub fn norm(&self) -> f64 {
        l2_norm(self.values.iter().map(|&x| x as f64))
    }
}

impl fmt::Debug for EmbeddingVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "EmbeddingVector(dim={}, ", self.dim())?;
        f.debug_list().entries(self.values.iter().take(4)).finish()?;
        if self.dim() > 4 {
            write!(f, "..")?;
        }
        write!(f, ")")
    }
}

impl<'de> Deserialize<'de> for EmbeddingVector {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = Vec::<f64>::deserialize(d)?;
        normalize(&raw).map_err(serde::de::Error::custom)
    }
}

fn check_finite(values: impl Iterator<Item = f64>) -> Result<(), VectorError> {
    for (index, x) in values.enumerate() {
        if !x.is_finite() {
            return Err(VectorError::NonFinite { index });
        }
    }
    Ok(())
}

fn l2_norm(values: impl Iterator<Item = f64>) -> f64 {
    values.map(|x| x * x).sum::<f64>().sqrt()
}

/// Scales `raw` to unit L2 norm, computing in `f64` and storing as `f32`.
pub fn normalize(raw: &[f64]) -> Result<EmbeddingVector, VectorError> {
    if raw.is_empty() {
        return Err(VectorError::Empty);
    }
    check_finite(raw.iter().copied())?;
    let norm = l2_norm(raw.iter().copied());
    if norm <= ZERO_NORM_EPS {
        return Err(VectorError::ZeroVector);
    }
    Ok(EmbeddingVector {
        values: raw.iter().map(|&x| (x / norm) as f32).collect(),
    })
}

/// [`normalize`] for `f32` input.
pub fn normalize_f32(raw: &[f32]) -> Result<EmbeddingVector, VectorError> {
    let wide: Vec<f64> = raw.iter().map(|&x| x as f64).collect();
    normalize(&wide)
}

/// Dot product of two stored rows, accumulated in `f64`. Lane `j` sums
/// elements `i` with `i % 4 == j`; lanes are combined as `(l0 + l1) + (l2 + l3)`.
/// The order is fixed, so results are reproducible and symmetric in `a`, `b`.
#[inline]
pub fn dot_slices(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [0.0f64; 4];
    let (ca, ra) = a.split_at(a.len() / 4 * 4);
    let (cb, rb) = b.split_at(ca.len());
    for (x, y) in ca.chunks_exact(4).zip(cb.chunks_exact(4)) {
        for j in 0..4 {
            lanes[j] += x[j] as f64 * y[j] as f64;
        }
    }
    for (j, (x, y)) in ra.iter().zip(rb).enumerate() {
        lanes[j] += *x as f64 * *y as f64;
    }
    (lanes[0] + lanes[1]) + (lanes[2] + lanes[3])
}

/// Cosine similarity of two unit vectors.
pub fn dot(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, VectorError> {
    if a.dim() != b.dim() {
        return Err(VectorError::DimensionMismatch {
            expected: a.dim(),
            found: b.dim(),
        });
    }
    Ok(dot_slices(&a.values, &b.values))
}

/// Mean of the inputs, renormalized. Used to collapse several description
/// embeddings into one query vector.
pub fn ensemble_embed(vectors: &[EmbeddingVector]) -> Result<EmbeddingVector, VectorError> {
    let first = vectors.first().ok_or(VectorError::Empty)?;
    let dim = first.dim();
    let mut sum = vec![0.0f64; dim];
    for v in vectors {
        if v.dim() != dim {
            return Err(VectorError::DimensionMismatch {
                expected: dim,
                found: v.dim(),
            });
        }
        for (s, &x) in sum.iter_mut().zip(v.as_slice()) {
            *s += x as f64;
        }
    }
    let n = vectors.len() as f64;
    for s in &mut sum {
        *s /= n;
    }
    normalize(&sum)
}
