//! Unknown-aware training objective and the prompt-context optimization loop.
//!
//! ID features pooled from foreground regions are pushed toward their class
//! prompt; synthesized outliers and pooled background features are pushed
//! toward the "unknown" prompt. Both terms are softmax cross-entropy over all
//! M+1 prompts at the backbone temperature. An entropy-maximization loss over
//! the M ID classes is kept as an ablation baseline.

use ndarray::{Array1, Array2, ArrayView1};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, Image, PatchGrid, SurgeryConfig};
use crate::error::{Error, Result};
use crate::masking::{
    discrepancy_partition, similarity_map, topk_partition, DiscrepancyConfig, SimilarityMap,
};
use crate::numeric::softmax;
use crate::synthesis::{masked_pool, synthesize_outliers, LambdaPolicy, PooledFeature, PoolSource};
use crate::textbank::{
    embed_prompts_with_cache, prompts_backward, template_embeddings, PromptBank, TextEmbeddings,
};

/// Per-step (or per-epoch) loss summary. `total = id_loss + beta_loss * ood_loss`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub id_loss: f64,
    pub ood_loss: f64,
    pub beta_loss: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Weight on the outlier loss term.
    pub beta_loss: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            learning_rate: 0.002,
            batch_size: 8,
            beta_loss: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("train.epochs: must be >= 1"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::config(format!(
                "train.learning_rate: must be > 0, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size: must be >= 1"));
        }
        if !(self.beta_loss >= 0.0) {
            return Err(Error::config(format!(
                "train.beta_loss: must be >= 0, got {}",
                self.beta_loss
            )));
        }
        Ok(())
    }
}

/// Which loss supervises the outlier features.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OodLossKind {
    UnknownPrompt,
    EntropyMax,
}

/// Pipeline composition used by training and the ablation command.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Discrepancy masking, outlier synthesis, unknown-prompt loss.
    Full,
    /// Whole-image pooling; mixing operates on unmasked features.
    NoMasking,
    /// Outlier loss over background features only.
    NoSynthesis,
    /// Entropy maximization instead of the unknown-prompt loss.
    EntropyLoss,
    /// Rank-based foreground selection instead of discrepancy masking.
    TopkMasking { k: usize },
}

impl Variant {
    pub fn ood_loss_kind(&self) -> OodLossKind {
        match self {
            Variant::EntropyLoss => OodLossKind::EntropyMax,
            _ => OodLossKind::UnknownPrompt,
        }
    }

    pub fn label(&self) -> String {
        match self {
            Variant::Full => "full".to_string(),
            Variant::NoMasking => "no_masking".to_string(),
            Variant::NoSynthesis => "no_synthesis".to_string(),
            Variant::EntropyLoss => "entropy_loss".to_string(),
            Variant::TopkMasking { k } => format!("topk_masking_k{k}"),
        }
    }
}

fn cross_entropy(sims: &ArrayView1<f64>, target: usize, tau: f64) -> (f64, Array1<f64>) {
    let logits: Vec<f64> = sims.iter().map(|&s| s / tau).collect();
    let loss = -crate::numeric::log_softmax_at(&logits, target);
    let probs = softmax(&logits);
    let mut d_sims = Array1::from_vec(probs);
    d_sims[target] -= 1.0;
    d_sims.mapv_inplace(|x| x / tau);
    (loss, d_sims)
}

fn negative_entropy(sims: &ArrayView1<f64>, tau: f64) -> (f64, Array1<f64>) {
    let logits: Vec<f64> = sims.iter().map(|&s| s / tau).collect();
    let probs = softmax(&logits);
    let loss: f64 = probs.iter().map(|&p| p * p.ln()).sum();
    let d_sims = Array1::from_shape_fn(probs.len(), |m| probs[m] * (probs[m].ln() - loss) / tau);
    (loss, d_sims)
}

/// Cross-entropy of an ID feature toward its true class over all M+1 prompts.
pub fn id_loss(
    feature: &ArrayView1<f64>,
    embeddings: &TextEmbeddings,
    true_class: usize,
    tau: f64,
) -> Result<f64> {
    if true_class >= embeddings.num_id_classes() {
        return Err(Error::input(format!(
            "true_class {true_class} out of range: ID samples never target the unknown prompt"
        )));
    }
    let sims = embeddings.matrix().dot(feature);
    if feature.len() != embeddings.dim() {
        return Err(Error::input("feature dim mismatch"));
    }
    Ok(cross_entropy(&sims.view(), true_class, tau).0)
}

/// Cross-entropy of an outlier feature toward the unknown prompt.
pub fn ood_loss(feature: &ArrayView1<f64>, embeddings: &TextEmbeddings, tau: f64) -> Result<f64> {
    if feature.len() != embeddings.dim() {
        return Err(Error::input("feature dim mismatch"));
    }
    let sims = embeddings.matrix().dot(feature);
    let target = embeddings.num_prompts() - 1;
    Ok(cross_entropy(&sims.view(), target, tau).0)
}

/// Negative Shannon entropy of the M-class softmax; minimizing it maximizes
/// entropy. Ablation baseline only.
pub fn entropy_max_loss(
    feature: &ArrayView1<f64>,
    embeddings: &TextEmbeddings,
    tau: f64,
) -> Result<f64> {
    if feature.len() != embeddings.dim() {
        return Err(Error::input("feature dim mismatch"));
    }
    let m = embeddings.num_id_classes();
    let sims = embeddings
        .matrix()
        .slice(ndarray::s![..m, ..])
        .dot(feature);
    Ok(negative_entropy(&sims.view(), tau).0)
}

/// One batch of pooled features entering the objective.
#[derive(Debug, Clone, Default)]
pub struct LossBatch {
    /// Unit feature and true class per ID sample.
    pub id_features: Vec<(Array1<f64>, usize)>,
    /// Unit features supervised as outliers (synthesized and background).
    pub ood_features: Vec<Array1<f64>>,
}

/// Batch loss plus its gradient with respect to the normalized prompt rows.
/// ID and OOD terms are each averaged over their own count before weighting,
/// keeping the two magnitudes comparable across variable outlier counts.
pub fn loss_and_embedding_grads(
    embeddings: &TextEmbeddings,
    batch: &LossBatch,
    beta_loss: f64,
    kind: OodLossKind,
    tau: f64,
) -> Result<(LossReport, Array2<f64>)> {
    if batch.id_features.is_empty() {
        return Err(Error::input("batch must contain at least one ID feature"));
    }
    let m = embeddings.num_id_classes();
    let mut d_rows = Array2::<f64>::zeros((embeddings.num_prompts(), embeddings.dim()));
    let n_id = batch.id_features.len() as f64;
    let mut id_acc = 0.0;
    for (feature, label) in &batch.id_features {
        if *label >= m {
            return Err(Error::input(format!(
                "label {label} out of range: ID samples never target the unknown prompt"
            )));
        }
        let sims = embeddings.matrix().dot(feature);
        let (loss, d_sims) = cross_entropy(&sims.view(), *label, tau);
        id_acc += loss;
        for p in 0..embeddings.num_prompts() {
            let w = d_sims[p] / n_id;
            d_rows.row_mut(p).scaled_add(w, &feature.view());
        }
    }
    let id_mean = id_acc / n_id;

    let mut ood_mean = 0.0;
    if !batch.ood_features.is_empty() {
        let n_ood = batch.ood_features.len() as f64;
        let mut ood_acc = 0.0;
        for feature in &batch.ood_features {
            match kind {
                OodLossKind::UnknownPrompt => {
                    let sims = embeddings.matrix().dot(feature);
                    let (loss, d_sims) = cross_entropy(&sims.view(), m, tau);
                    ood_acc += loss;
                    for p in 0..embeddings.num_prompts() {
                        let w = beta_loss * d_sims[p] / n_ood;
                        d_rows.row_mut(p).scaled_add(w, &feature.view());
                    }
                }
                OodLossKind::EntropyMax => {
                    let sims = embeddings.matrix().slice(ndarray::s![..m, ..]).dot(feature);
                    let (loss, d_sims) = negative_entropy(&sims.view(), tau);
                    ood_acc += loss;
                    for p in 0..m {
                        let w = beta_loss * d_sims[p] / n_ood;
                        d_rows.row_mut(p).scaled_add(w, &feature.view());
                    }
                }
            }
        }
        ood_mean = ood_acc / n_ood;
    }

    let report = LossReport {
        id_loss: id_mean,
        ood_loss: ood_mean,
        beta_loss,
        total: id_mean + beta_loss * ood_mean,
    };
    if !report.total.is_finite() {
        return Err(Error::numeric(format!(
            "non-finite loss: id={} ood={}",
            report.id_loss, report.ood_loss
        )));
    }
    Ok((report, d_rows))
}

/// Batch loss and its gradient with respect to the shared prompt context.
pub fn batch_loss_with_context_grad(
    backbone: &Backbone,
    bank: &PromptBank,
    batch: &LossBatch,
    beta_loss: f64,
    kind: OodLossKind,
) -> Result<(LossReport, Array2<f64>)> {
    let fwd = embed_prompts_with_cache(bank, backbone)?;
    let (report, d_rows) =
        loss_and_embedding_grads(&fwd.embeddings, batch, beta_loss, kind, bank.temperature())?;
    let d_ctx = prompts_backward(backbone, &fwd, &d_rows)?;
    Ok((report, d_ctx))
}

/// Batch loss alone, for finite-difference checks.
pub fn batch_loss(
    backbone: &Backbone,
    bank: &PromptBank,
    batch: &LossBatch,
    beta_loss: f64,
    kind: OodLossKind,
) -> Result<LossReport> {
    let fwd = embed_prompts_with_cache(bank, backbone)?;
    loss_and_embedding_grads(&fwd.embeddings, batch, beta_loss, kind, bank.temperature())
        .map(|(r, _)| r)
}

/// Frozen per-sample state computed once per episode: both patch grids and
/// the unmodified-path similarity map against the fixed template prompt.
pub struct PreparedSample {
    pub label: usize,
    pub plain: PatchGrid,
    pub surgery: PatchGrid,
    pub clip_map: SimilarityMap,
}

pub fn prepare_sample(
    backbone: &Backbone,
    image: &Image,
    label: usize,
    surgery_cfg: &SurgeryConfig,
    template: &Array2<f64>,
) -> Result<PreparedSample> {
    let plain = backbone.plain_patch_embeddings(image)?;
    let surgery = backbone.surgery_patch_embeddings(image, surgery_cfg)?;
    let clip_map = similarity_map(&plain, &template.row(label))?;
    Ok(PreparedSample {
        label,
        plain,
        surgery,
        clip_map,
    })
}

/// Pool features for one batch under the chosen variant and synthesize
/// outliers. Foreground/background selection follows the current (learnable)
/// text embeddings; pooled values come from the unmodified path, matching
/// the representation scored at inference. Also returns the synthesized
/// outliers with their mixing provenance for inspection.
pub fn extract_features(
    samples: &[&PreparedSample],
    embeddings: &TextEmbeddings,
    variant: Variant,
    discrepancy: &DiscrepancyConfig,
    lambda: &LambdaPolicy,
    rng: &mut ChaCha8Rng,
) -> Result<(LossBatch, Vec<crate::synthesis::SyntheticOutlier>)> {
    let mut batch = LossBatch::default();
    let mut pooled = Vec::new();
    for sample in samples {
        let partition = match variant {
            Variant::NoMasking => crate::masking::RegionPartition::with_all_foreground(
                sample.plain.rows(),
                sample.plain.cols(),
            ),
            Variant::TopkMasking { k } => {
                topk_partition(&sample.plain, embeddings, sample.label, k)?
            }
            Variant::Full | Variant::NoSynthesis | Variant::EntropyLoss => {
                let smap = similarity_map(&sample.surgery, &embeddings.row(sample.label))?;
                discrepancy_partition(&smap, &sample.clip_map, discrepancy)?
            }
        };
        let fg = masked_pool(&sample.plain, partition.foreground())?;
        batch.id_features.push((fg.clone(), sample.label));
        pooled.push(PooledFeature {
            vector: fg,
            class_id: sample.label,
            source: PoolSource::Foreground,
        });
        let background = partition.background();
        if !background.is_empty() {
            batch.ood_features.push(masked_pool(&sample.plain, &background)?);
        }
    }
    let mut outliers = Vec::new();
    if variant != Variant::NoSynthesis {
        outliers = synthesize_outliers(&pooled, lambda, rng)?;
        for outlier in &outliers {
            batch.ood_features.push(outlier.normalized_vector()?);
        }
    }
    Ok((batch, outliers))
}

/// Everything the training loop needs beyond the episode itself.
#[derive(Debug, Clone)]
pub struct TrainSettings {
    pub train: TrainConfig,
    pub surgery: SurgeryConfig,
    pub discrepancy: DiscrepancyConfig,
    pub lambda: LambdaPolicy,
    pub variant: Variant,
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.surgery.context.validate()?;
        self.surgery.attention.validate()?;
        self.discrepancy.validate()?;
        self.lambda.validate()
    }
}

/// Optimize the shared prompt context on a few-shot episode with SGD under
/// cosine learning-rate decay. Only the context changes; the backbone is
/// frozen throughout. Returns the per-epoch loss history.
pub fn train(
    backbone: &Backbone,
    bank: &mut PromptBank,
    samples: &[(Image, usize)],
    settings: &TrainSettings,
) -> Result<Vec<LossReport>> {
    settings.validate()?;
    if samples.is_empty() {
        return Err(Error::input("episode must contain at least one sample"));
    }
    for (_, label) in samples {
        if *label >= bank.num_id_classes() {
            return Err(Error::input(format!(
                "label {label} out of range for {} classes",
                bank.num_id_classes()
            )));
        }
    }
    let template = template_embeddings(backbone, bank.class_names())?;
    let prepared: Vec<PreparedSample> = samples
        .iter()
        .map(|(image, label)| prepare_sample(backbone, image, *label, &settings.surgery, &template))
        .collect::<Result<_>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(settings.train.seed);
    let cfg = &settings.train;
    let kind = settings.variant.ood_loss_kind();
    let steps_per_epoch = prepared.len().div_ceil(cfg.batch_size);
    let total_steps = (cfg.epochs * steps_per_epoch) as f64;
    let mut step = 0usize;
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..prepared.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_acc = LossReport {
            id_loss: 0.0,
            ood_loss: 0.0,
            beta_loss: cfg.beta_loss,
            total: 0.0,
        };
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch_samples: Vec<&PreparedSample> = chunk.iter().map(|&i| &prepared[i]).collect();
            let fwd = embed_prompts_with_cache(bank, backbone)?;
            let (batch, _) = extract_features(
                &batch_samples,
                &fwd.embeddings,
                settings.variant,
                &settings.discrepancy,
                &settings.lambda,
                &mut rng,
            )?;
            let (report, d_rows) = loss_and_embedding_grads(
                &fwd.embeddings,
                &batch,
                cfg.beta_loss,
                kind,
                bank.temperature(),
            )
            .map_err(|e| match e {
                Error::Numeric(msg) => {
                    Error::numeric(format!("diverged at epoch {epoch} step {step}: {msg}"))
                }
                other => other,
            })?;
            let d_ctx = prompts_backward(backbone, &fwd, &d_rows)?;
            let lr = cfg.learning_rate
                * 0.5
                * (1.0 + (std::f64::consts::PI * step as f64 / total_steps).cos());
            bank.context_mut().scaled_add(-lr, &d_ctx);
            if !crate::numeric::all_finite(bank.context().iter()) {
                return Err(Error::numeric(format!(
                    "non-finite context after update at epoch {epoch} step {step}"
                )));
            }
            epoch_acc.id_loss += report.id_loss;
            epoch_acc.ood_loss += report.ood_loss;
            epoch_acc.total += report.total;
            batches += 1;
            step += 1;
        }
        let n = batches as f64;
        history.push(LossReport {
            id_loss: epoch_acc.id_loss / n,
            ood_loss: epoch_acc.ood_loss / n,
            beta_loss: cfg.beta_loss,
            total: epoch_acc.total / n,
        });
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{Backbone, ToyBackbone, ToyConfig};

    /// Build a unit feature and unit embedding rows realizing the given
    /// similarity values exactly (requires |s| <= 1).
    fn realize_sims(sims: &[f64]) -> (Array1<f64>, TextEmbeddings) {
        let dim = sims.len() + 2;
        let mut feature = Array1::<f64>::zeros(dim);
        feature[0] = 1.0;
        let mut rows = Array2::<f64>::zeros((sims.len(), dim));
        for (m, &s) in sims.iter().enumerate() {
            assert!(s.abs() <= 1.0);
            rows[(m, 0)] = s;
            rows[(m, m + 1)] = (1.0 - s * s).sqrt();
        }
        (feature, TextEmbeddings::from_matrix(rows).unwrap())
    }

    #[test]
    fn id_loss_uniform_is_log_m_plus_one() {
        for m in [1usize, 2, 5, 10] {
            let sims = vec![0.25; m + 1];
            let (f, emb) = realize_sims(&sims);
            let loss = id_loss(&f.view(), &emb, 0, 1.0).unwrap();
            assert!(
                (loss - ((m + 1) as f64).ln()).abs() < 1e-9,
                "M={m}: {loss}"
            );
        }
    }

    #[test]
    fn id_loss_saturates_to_zero() {
        let (f, emb) = realize_sims(&[1.0, 0.0, 0.0]);
        let loss = id_loss(&f.view(), &emb, 0, 0.01).unwrap();
        assert!(loss < 1e-6);
    }

    #[test]
    fn id_loss_two_logit_hand_value() {
        // sims (1.0, 0.5) at tau=1: -ln(e / (e + e^0.5)) = 0.474077...
        let (f, emb) = realize_sims(&[1.0, 0.5]);
        let loss = id_loss(&f.view(), &emb, 0, 1.0).unwrap();
        let oracle = -(1f64.exp() / (1f64.exp() + 0.5f64.exp())).ln();
        assert!((loss - oracle).abs() < 1e-12);
        assert!((loss - 0.4741).abs() < 5e-5);
    }

    #[test]
    fn id_loss_rejects_unknown_target() {
        let (f, emb) = realize_sims(&[0.1, 0.2, 0.3]);
        // 3 rows = 2 ID classes + unknown; targeting index 2 must fail.
        assert!(matches!(
            id_loss(&f.view(), &emb, 2, 1.0),
            Err(Error::InputContract(_))
        ));
    }

    #[test]
    fn ood_loss_uniform_and_hand_value() {
        let sims = vec![-0.3; 4];
        let (f, emb) = realize_sims(&sims);
        let loss = ood_loss(&f.view(), &emb, 1.0).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-9);

        let (f, emb) = realize_sims(&[0.2, 0.1, 0.9]);
        let loss = ood_loss(&f.view(), &emb, 1.0).unwrap();
        let oracle = -(0.9f64.exp() / (0.2f64.exp() + 0.1f64.exp() + 0.9f64.exp())).ln();
        assert!((loss - oracle).abs() < 1e-12);
    }

    #[test]
    fn ood_loss_saturates_toward_unknown() {
        let (f, emb) = realize_sims(&[0.0, 0.0, 1.0]);
        let loss = ood_loss(&f.view(), &emb, 0.01).unwrap();
        assert!(loss < 1e-6);
    }

    #[test]
    fn entropy_loss_uniform_and_deterministic_limits() {
        // Uniform M-class softmax: loss = -ln(M).
        let (f, emb) = realize_sims(&[0.4, 0.4, 0.4, 0.0]);
        let loss = entropy_max_loss(&f.view(), &emb, 1.0).unwrap();
        assert!((loss - (-(3f64.ln()))).abs() < 1e-9);
        // Near one-hot: entropy tends to zero from below.
        let (f, emb) = realize_sims(&[1.0, -1.0, 0.0]);
        let loss = entropy_max_loss(&f.view(), &emb, 0.01).unwrap();
        assert!(loss.abs() < 1e-6);
        assert!(loss <= 0.0);
    }

    #[test]
    fn entropy_loss_hand_value() {
        // Probabilities (0.8, 0.2) require (s1-s2)/tau = ln 4.
        let s = [0.8, 0.1, 0.0];
        let tau = (s[0] - s[1]) / 4f64.ln();
        let (f, emb) = realize_sims(&s);
        let loss = entropy_max_loss(&f.view(), &emb, tau).unwrap();
        let oracle = 0.8 * 0.8f64.ln() + 0.2 * 0.2f64.ln();
        assert!((loss - oracle).abs() < 1e-9);
        assert!((loss - (-0.5004)).abs() < 5e-5);
    }

    #[test]
    fn losses_are_shift_invariant_in_sims() {
        let base = [0.1, -0.2, 0.3];
        let shifted: Vec<f64> = base.iter().map(|s| s + 0.4).collect();
        let (f1, e1) = realize_sims(&base);
        let (f2, e2) = realize_sims(&shifted);
        let a = id_loss(&f1.view(), &e1, 1, 0.7).unwrap();
        let b = id_loss(&f2.view(), &e2, 1, 0.7).unwrap();
        assert!((a - b).abs() < 1e-6);
        let a = ood_loss(&f1.view(), &e1, 0.7).unwrap();
        let b = ood_loss(&f2.view(), &e2, 0.7).unwrap();
        assert!((a - b).abs() < 1e-6);
    }

    #[test]
    fn losses_are_nonnegative() {
        for sims in [
            vec![0.9, -0.9],
            vec![0.0, 0.0, 0.0],
            vec![0.5, 0.5, -0.5, 0.25],
        ] {
            let (f, emb) = realize_sims(&sims);
            assert!(id_loss(&f.view(), &emb, 0, 0.3).unwrap() >= 0.0);
            assert!(ood_loss(&f.view(), &emb, 0.3).unwrap() >= 0.0);
        }
    }

    fn toy_setup() -> (Backbone, PromptBank) {
        let b = Backbone::Toy(ToyBackbone::new(ToyConfig::default()).unwrap());
        let names: Vec<String> = ["cat", "dog", "bird"].iter().map(|s| s.to_string()).collect();
        let bank = PromptBank::new(&b, &names, 4, 0).unwrap();
        (b, bank)
    }

    fn synthetic_batch(dim: usize) -> LossBatch {
        let mk = |seed: u64| {
            let raw = Array1::from_shape_fn(dim, |d| ((d as u64 * 31 + seed * 17) % 13) as f64 - 6.0);
            crate::numeric::l2_normalize(&raw.view()).unwrap()
        };
        LossBatch {
            id_features: vec![(mk(1), 0), (mk(2), 1), (mk(3), 2)],
            ood_features: vec![mk(4), mk(5)],
        }
    }

    #[test]
    fn report_total_identity_holds() {
        let (b, bank) = toy_setup();
        let batch = synthetic_batch(16);
        for beta in [0.0, 0.5, 1.0, 2.0] {
            let report = batch_loss(&b, &bank, &batch, beta, OodLossKind::UnknownPrompt).unwrap();
            assert!((report.total - (report.id_loss + beta * report.ood_loss)).abs() < 1e-6);
        }
    }

    #[test]
    fn context_gradient_matches_finite_differences() {
        let (b, mut bank) = toy_setup();
        let batch = synthetic_batch(16);
        for kind in [OodLossKind::UnknownPrompt, OodLossKind::EntropyMax] {
            let (_, grad) = batch_loss_with_context_grad(&b, &bank, &batch, 0.8, kind).unwrap();
            let h = 1e-4;
            for &(i, j) in &[(0, 3), (1, 7), (2, 11), (3, 15)] {
                let orig = bank.context()[(i, j)];
                bank.context_mut()[(i, j)] = orig + h;
                let up = batch_loss(&b, &bank, &batch, 0.8, kind).unwrap().total;
                bank.context_mut()[(i, j)] = orig - h;
                let down = batch_loss(&b, &bank, &batch, 0.8, kind).unwrap().total;
                bank.context_mut()[(i, j)] = orig;
                let fd = (up - down) / (2.0 * h);
                let rel = (grad[(i, j)] - fd).abs() / fd.abs().max(1e-10);
                assert!(rel < 1e-4, "{kind:?} rel err {rel} at ({i},{j})");
            }
        }
    }

    #[test]
    fn beta_zero_still_records_ood_loss() {
        let (b, bank) = toy_setup();
        let batch = synthetic_batch(16);
        let report = batch_loss(&b, &bank, &batch, 0.0, OodLossKind::UnknownPrompt).unwrap();
        assert!(report.ood_loss > 0.0);
        assert!((report.total - report.id_loss).abs() < 1e-12);
    }

    #[test]
    fn invalid_train_config_names_field() {
        let bad = TrainConfig {
            learning_rate: -1.0,
            ..TrainConfig::default()
        };
        let err = bad.validate().unwrap_err();
        assert!(err.to_string().contains("train.learning_rate"));
    }

    #[test]
    fn empty_id_batch_rejected() {
        let (b, bank) = toy_setup();
        let batch = LossBatch::default();
        assert!(matches!(
            batch_loss(&b, &bank, &batch, 1.0, OodLossKind::UnknownPrompt),
            Err(Error::InputContract(_))
        ));
    }

    #[test]
    fn grad_targets_only_id_rows_for_entropy() {
        let (b, bank) = toy_setup();
        let batch = LossBatch {
            id_features: vec![(synthetic_batch(16).id_features[0].0.clone(), 0)],
            ood_features: vec![synthetic_batch(16).ood_features[0].clone()],
        };
        let fwd = embed_prompts_with_cache(&bank, &b).unwrap();
        // With beta very large, the OOD term dominates; entropy must leave the
        // unknown row untouched relative to the unknown-prompt loss.
        let (_, d_unknown) = loss_and_embedding_grads(
            &fwd.embeddings,
            &LossBatch {
                id_features: batch.id_features.clone(),
                ood_features: batch.ood_features.clone(),
            },
            1e6,
            OodLossKind::EntropyMax,
            bank.temperature(),
        )
        .unwrap();
        let unknown_row_norm: f64 = d_unknown
            .row(bank.unknown_index())
            .iter()
            .map(|x| x * x)
            .sum();
        // Only the (small) ID term touches the unknown row.
        assert!(unknown_row_norm.sqrt() < 1e3);
    }
}
