//! Inference-time scoring and detection metrics.
//!
//! Test images are scored by their maximum class softmax probability over
//! temperature-scaled image/text similarities; higher means more ID-like.
//! Separation is measured by AUROC computed from the Mann-Whitney U
//! statistic with midrank tie handling, treating ID as the positive class.

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, Image, ImageFeature};
use crate::error::{Error, Result};
use crate::numeric::softmax;
use crate::textbank::TextEmbeddings;

/// Whether the unknown prompt participates in the softmax denominator at
/// inference. The maximum (and the argmax) is always taken over ID classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum UnknownMode {
    #[default]
    Exclude,
    Include,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoredSample {
    pub score: f64,
    pub predicted_class: usize,
    pub is_id: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetAuroc {
    pub dataset: String,
    pub auroc: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_dataset: Vec<DatasetAuroc>,
    pub average_auroc: f64,
    pub id_accuracy: f64,
}

/// Maximum class softmax score and the predicted ID class.
pub fn mcm_score(
    feature: &ImageFeature,
    embeddings: &TextEmbeddings,
    tau: f64,
    mode: UnknownMode,
) -> Result<(f64, usize)> {
    if !(tau > 0.0) {
        return Err(Error::input(format!("temperature must be > 0, got {tau}")));
    }
    let sims = crate::textbank::similarity(feature, embeddings)?;
    let m = embeddings.num_id_classes();
    let count = match mode {
        UnknownMode::Exclude => m,
        UnknownMode::Include => m + 1,
    };
    let logits: Vec<f64> = sims.iter().take(count).map(|&s| s / tau).collect();
    let probs = softmax(&logits);
    let (mut best_class, mut best_prob) = (0usize, f64::NEG_INFINITY);
    for (c, &p) in probs.iter().take(m).enumerate() {
        if p > best_prob {
            best_prob = p;
            best_class = c;
        }
    }
    Ok((best_prob, best_class))
}

fn check_scores(name: &str, scores: &[f64]) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::input(format!("{name} score list must not be empty")));
    }
    if !crate::numeric::all_finite(scores.iter()) {
        return Err(Error::numeric(format!("{name} scores contain non-finite values")));
    }
    Ok(())
}

/// Probability that a random ID score exceeds a random OOD score, ties
/// counted half. Computed from the rank-sum statistic with midranks.
pub fn auroc(scores_id: &[f64], scores_ood: &[f64]) -> Result<f64> {
    check_scores("ID", scores_id)?;
    check_scores("OOD", scores_ood)?;
    let n_id = scores_id.len();
    let n_ood = scores_ood.len();
    let mut all: Vec<(f64, bool)> = scores_id
        .iter()
        .map(|&s| (s, true))
        .chain(scores_ood.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut rank_sum_id = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        // 1-based ranks i+1 ..= j+1 share the midrank.
        let midrank = (i + j + 2) as f64 / 2.0;
        for item in &all[i..=j] {
            if item.1 {
                rank_sum_id += midrank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_id - (n_id * (n_id + 1)) as f64 / 2.0;
    Ok(u / (n_id as f64 * n_ood as f64))
}

/// Score every test image and aggregate AUROC per OOD dataset plus ID top-1
/// accuracy. Scoring uses the pooled global image feature.
pub fn evaluate(
    backbone: &Backbone,
    embeddings: &TextEmbeddings,
    tau: f64,
    mode: UnknownMode,
    id_test: &[(Image, usize)],
    ood_tests: &[(String, Vec<Image>)],
) -> Result<(MetricsReport, Vec<ScoredSample>)> {
    if id_test.is_empty() {
        return Err(Error::input("ID test set must not be empty"));
    }
    let mut scored = Vec::new();
    let mut id_scores = Vec::with_capacity(id_test.len());
    let mut correct = 0usize;
    for (image, label) in id_test {
        let feature = backbone.encode_image(image)?;
        let (score, predicted) = mcm_score(&feature, embeddings, tau, mode)?;
        if predicted == *label {
            correct += 1;
        }
        id_scores.push(score);
        scored.push(ScoredSample {
            score,
            predicted_class: predicted,
            is_id: true,
        });
    }
    let id_accuracy = correct as f64 / id_test.len() as f64;

    let mut per_dataset = Vec::with_capacity(ood_tests.len());
    for (name, images) in ood_tests {
        if images.is_empty() {
            return Err(Error::input(format!("OOD dataset {name:?} is empty")));
        }
        let mut ood_scores = Vec::with_capacity(images.len());
        for image in images {
            let feature = backbone.encode_image(image)?;
            let (score, predicted) = mcm_score(&feature, embeddings, tau, mode)?;
            ood_scores.push(score);
            scored.push(ScoredSample {
                score,
                predicted_class: predicted,
                is_id: false,
            });
        }
        per_dataset.push(DatasetAuroc {
            dataset: name.clone(),
            auroc: auroc(&id_scores, &ood_scores)?,
        });
    }
    let average_auroc = if per_dataset.is_empty() {
        f64::NAN
    } else {
        per_dataset.iter().map(|d| d.auroc).sum::<f64>() / per_dataset.len() as f64
    };
    Ok((
        MetricsReport {
            per_dataset,
            average_auroc,
            id_accuracy,
        },
        scored,
    ))
}
