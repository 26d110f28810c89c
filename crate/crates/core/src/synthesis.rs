//! Pooling of masked patch features and outlier synthesis by cross-class
//! convex mixing.

use std::collections::BTreeSet;

use ndarray::Array1;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::PatchGrid;
use crate::error::{Error, Result};
use crate::numeric::l2_normalize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolSource {
    Foreground,
    Background,
}

/// Mean-pooled, normalized patch feature for one image region.
#[derive(Debug, Clone)]
pub struct PooledFeature {
    pub vector: Array1<f64>,
    pub class_id: usize,
    pub source: PoolSource,
}

/// Convex mix of two foreground features from distinct classes. The stored
/// vector is the raw mix; it is normalized when it enters similarity
/// computations.
#[derive(Debug, Clone)]
pub struct SyntheticOutlier {
    pub vector: Array1<f64>,
    pub lambda: f64,
    pub class_a: usize,
    pub class_b: usize,
}

impl SyntheticOutlier {
    pub fn normalized_vector(&self) -> Result<Array1<f64>> {
        l2_normalize(&self.vector.view())
    }
}

/// How the mixing coefficient is drawn for each pair.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "lowercase")]
pub enum LambdaPolicy {
    Fixed { value: f64 },
    Uniform { lo: f64, hi: f64 },
}

impl Default for LambdaPolicy {
    /// Near-midpoint draws keep outliers away from either parent mode.
    fn default() -> Self {
        LambdaPolicy::Uniform { lo: 0.4, hi: 0.6 }
    }
}

impl LambdaPolicy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            LambdaPolicy::Fixed { value } => {
                if !(0.0..=1.0).contains(&value) {
                    return Err(Error::config(format!(
                        "synthesis.lambda.value: must be in [0, 1], got {value}"
                    )));
                }
            }
            LambdaPolicy::Uniform { lo, hi } => {
                if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
                    return Err(Error::config(format!(
                        "synthesis.lambda: need 0 <= lo <= hi <= 1, got lo={lo} hi={hi}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        match *self {
            LambdaPolicy::Fixed { value } => value,
            LambdaPolicy::Uniform { lo, hi } => {
                if lo == hi {
                    lo
                } else {
                    rng.gen_range(lo..hi)
                }
            }
        }
    }
}

/// Arithmetic mean of the patch embeddings over a region, L2-normalized.
pub fn masked_pool(patches: &PatchGrid, region: &BTreeSet<(usize, usize)>) -> Result<Array1<f64>> {
    if region.is_empty() {
        return Err(Error::input("cannot pool an empty region"));
    }
    let mut acc = Array1::<f64>::zeros(patches.dim());
    for &(i, j) in region {
        if i >= patches.rows() || j >= patches.cols() {
            return Err(Error::input(format!(
                "region cell ({i},{j}) outside {}x{} grid",
                patches.rows(),
                patches.cols()
            )));
        }
        acc += &patches.cell(i, j);
    }
    acc.mapv_inplace(|x| x / region.len() as f64);
    l2_normalize(&acc.view())
}

/// Mix every ordered pair of foreground features from distinct classes.
/// Returns an empty set (with a warning) when fewer than two classes are
/// present, in which case the outlier loss falls back to background
/// features alone.
pub fn synthesize_outliers(
    pooled: &[PooledFeature],
    policy: &LambdaPolicy,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<SyntheticOutlier>> {
    policy.validate()?;
    let foreground: Vec<&PooledFeature> = pooled
        .iter()
        .filter(|f| f.source == PoolSource::Foreground)
        .collect();
    let classes: BTreeSet<usize> = foreground.iter().map(|f| f.class_id).collect();
    if classes.len() < 2 {
        log::warn!(
            "outlier synthesis needs two distinct classes, found {}; skipping",
            classes.len()
        );
        return Ok(Vec::new());
    }
    let mut outliers = Vec::new();
    for a in &foreground {
        for b in &foreground {
            if a.class_id == b.class_id {
                continue;
            }
            let lambda = policy.sample(rng);
            let vector = &a.vector * lambda + &b.vector * (1.0 - lambda);
            outliers.push(SyntheticOutlier {
                vector,
                lambda,
                class_a: a.class_id,
                class_b: b.class_id,
            });
        }
    }
    Ok(outliers)
}
