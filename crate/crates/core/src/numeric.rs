//! Small shared numeric helpers.

use ndarray::{Array1, ArrayView1};

use crate::error::{Error, Result};

/// Minimum norm below which a vector is considered directionless.
pub const NORM_EPS: f64 = 1e-12;

/// L2-normalize a vector. Errors on (near-)zero vectors, which have no direction.
pub fn l2_normalize(v: &ArrayView1<f64>) -> Result<Array1<f64>> {
    let norm = v.dot(v).sqrt();
    if !norm.is_finite() {
        return Err(Error::numeric("non-finite norm during normalization"));
    }
    if norm < NORM_EPS {
        return Err(Error::numeric(
            "cannot normalize a zero vector (no direction)",
        ));
    }
    Ok(v.mapv(|x| x / norm))
}

/// Numerically stable softmax over a slice of logits.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// log(softmax(logits)[target]) computed without forming the probabilities.
pub fn log_softmax_at(logits: &[f64], target: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse: f64 = logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln() + max;
    logits[target] - lse
}

/// Dot product of two equal-length vectors; both are expected unit norm
/// by callers that interpret the result as cosine similarity.
pub fn dot(a: &ArrayView1<f64>, b: &ArrayView1<f64>) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::input(format!(
            "dimension mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(a.dot(b))
}

/// True when every element is finite.
pub fn all_finite<'a, I: IntoIterator<Item = &'a f64>>(values: I) -> bool {
    values.into_iter().all(|v| v.is_finite())
}
