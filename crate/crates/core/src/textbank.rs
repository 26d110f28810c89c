//! Prompt bank: M class prompts plus the "unknown" prompt, sharing one
//! learnable context block, embedded through the frozen text tower.

use ndarray::{Array1, Array2, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::backbone::{Backbone, ImageFeature, PromptCache};
use crate::error::{Error, Result};
use crate::numeric::l2_normalize;

/// Fixed literal class name used for the extra prompt.
pub const UNKNOWN_TOKEN: &str = "unknown";

/// Default number of learnable context tokens.
pub const DEFAULT_TOKEN_LEN: usize = 16;

/// Standard deviation for context initialization.
pub const CONTEXT_INIT_SIGMA: f64 = 0.02;

pub struct PromptBank {
    class_names: Vec<String>,
    context: Array2<f64>,
    temperature: f64,
}

impl PromptBank {
    /// Build a bank for the given ID classes, with a Gaussian-initialized
    /// shared context. The unknown prompt always exists; it is appended
    /// internally and cannot be removed.
    pub fn new(
        backbone: &Backbone,
        class_names: &[String],
        token_len: usize,
        seed: u64,
    ) -> Result<Self> {
        if class_names.is_empty() {
            return Err(Error::input("class name list must not be empty"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for name in class_names {
            if name.trim().is_empty() {
                return Err(Error::input("class names must be non-empty"));
            }
            if !seen.insert(name) {
                return Err(Error::input(format!("duplicate class name {name:?}")));
            }
            backbone.check_token(name)?;
        }
        backbone.check_token(UNKNOWN_TOKEN)?;
        if token_len == 0 {
            return Err(Error::config("prompts.token_len: must be >= 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, CONTEXT_INIT_SIGMA).expect("valid sigma");
        let context =
            Array2::from_shape_fn((token_len, backbone.token_dim()), |_| normal.sample(&mut rng));
        Ok(PromptBank {
            class_names: class_names.to_vec(),
            context,
            temperature: backbone.temperature(),
        })
    }

    /// Restore a bank from serialized state.
    pub fn from_state(
        class_names: Vec<String>,
        context: Array2<f64>,
        temperature: f64,
    ) -> Result<Self> {
        if class_names.is_empty() {
            return Err(Error::input("class name list must not be empty"));
        }
        if !(temperature > 0.0) {
            return Err(Error::input("temperature must be > 0"));
        }
        Ok(PromptBank {
            class_names,
            context,
            temperature,
        })
    }

    pub fn num_id_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Total prompts: ID classes plus the unknown prompt.
    pub fn num_prompts(&self) -> usize {
        self.class_names.len() + 1
    }

    /// Row index of the unknown prompt (always the last row).
    pub fn unknown_index(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn prompt_name(&self, index: usize) -> &str {
        if index < self.class_names.len() {
            &self.class_names[index]
        } else {
            UNKNOWN_TOKEN
        }
    }

    pub fn token_len(&self) -> usize {
        self.context.nrows()
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn context(&self) -> &Array2<f64> {
        &self.context
    }

    pub fn context_mut(&mut self) -> &mut Array2<f64> {
        &mut self.context
    }
}

/// Row-normalized text embeddings, one row per prompt; the last row is the
/// unknown prompt.
#[derive(Debug, Clone)]
pub struct TextEmbeddings {
    matrix: Array2<f64>,
}

impl TextEmbeddings {
    /// Wrap a matrix whose rows are already unit norm.
    pub fn from_matrix(matrix: Array2<f64>) -> Result<Self> {
        for (i, row) in matrix.rows().into_iter().enumerate() {
            let norm = row.dot(&row).sqrt();
            if (norm - 1.0).abs() > 1e-5 {
                return Err(Error::input(format!(
                    "row {i} has norm {norm}, expected unit norm"
                )));
            }
        }
        Ok(TextEmbeddings { matrix })
    }

    pub fn num_prompts(&self) -> usize {
        self.matrix.nrows()
    }

    /// ID classes only, excluding the unknown row.
    pub fn num_id_classes(&self) -> usize {
        self.matrix.nrows() - 1
    }

    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn row(&self, index: usize) -> ArrayView1<'_, f64> {
        self.matrix.row(index)
    }

    pub fn unknown_row(&self) -> ArrayView1<'_, f64> {
        self.matrix.row(self.matrix.nrows() - 1)
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.matrix
    }
}

/// Forward state kept for backpropagation into the shared context.
pub struct PromptsForward {
    pub embeddings: TextEmbeddings,
    unnormalized: Vec<Array1<f64>>,
    caches: Vec<PromptCache>,
}

/// Embed all M+1 prompts, keeping per-prompt caches for the backward pass.
pub fn embed_prompts_with_cache(bank: &PromptBank, backbone: &Backbone) -> Result<PromptsForward> {
    let mut rows = Array2::<f64>::zeros((bank.num_prompts(), backbone.embed_dim()));
    let mut unnormalized = Vec::with_capacity(bank.num_prompts());
    let mut caches = Vec::with_capacity(bank.num_prompts());
    for m in 0..bank.num_prompts() {
        let fwd = backbone.prompt_forward(bank.context(), bank.prompt_name(m))?;
        let normalized = l2_normalize(&fwd.embedding.view())?;
        rows.row_mut(m).assign(&normalized);
        unnormalized.push(fwd.embedding);
        caches.push(fwd.cache);
    }
    Ok(PromptsForward {
        embeddings: TextEmbeddings { matrix: rows },
        unnormalized,
        caches,
    })
}

/// Embed all prompts without keeping gradient state.
pub fn embed_prompts(bank: &PromptBank, backbone: &Backbone) -> Result<TextEmbeddings> {
    embed_prompts_with_cache(bank, backbone).map(|f| f.embeddings)
}

/// Gradient of a loss with respect to the shared context, given gradients
/// with respect to the normalized embedding rows.
pub fn prompts_backward(
    backbone: &Backbone,
    forward: &PromptsForward,
    d_rows: &Array2<f64>,
) -> Result<Array2<f64>> {
    if d_rows.nrows() != forward.embeddings.num_prompts()
        || d_rows.ncols() != forward.embeddings.dim()
    {
        return Err(Error::input("gradient shape does not match embeddings"));
    }
    let mut d_context: Option<Array2<f64>> = None;
    for m in 0..forward.embeddings.num_prompts() {
        let e = &forward.unnormalized[m];
        let norm = e.dot(e).sqrt();
        let g = forward.embeddings.row(m);
        let dg = d_rows.row(m);
        // d/de of e/||e||: (dg - g <g, dg>) / ||e||
        let inner = g.dot(&dg);
        let d_unnorm: Array1<f64> = (&dg - &g.mapv(|x| x * inner)) / norm;
        let dc = backbone.prompt_backward(&forward.caches[m], &d_unnorm)?;
        d_context = Some(match d_context {
            Some(acc) => acc + dc,
            None => dc,
        });
    }
    Ok(d_context.expect("at least one prompt"))
}

/// Template used for the frozen-backbone similarity map.
pub const FIXED_TEMPLATE: &str = "a photo of a";

/// Per-class embeddings under the fixed template with no learnable context,
/// one unit row per ID class. These stay constant while the bank trains.
pub fn template_embeddings(backbone: &Backbone, class_names: &[String]) -> Result<Array2<f64>> {
    let empty = Array2::zeros((0, backbone.token_dim()));
    let mut rows = Array2::zeros((class_names.len(), backbone.embed_dim()));
    for (m, name) in class_names.iter().enumerate() {
        let fwd = backbone.prompt_forward(&empty, &format!("{FIXED_TEMPLATE} {name}"))?;
        rows.row_mut(m)
            .assign(&l2_normalize(&fwd.embedding.view())?);
    }
    Ok(rows)
}

/// Cosine similarity of a normalized image feature against every prompt row.
pub fn similarity(feature: &ImageFeature, embeddings: &TextEmbeddings) -> Result<Array1<f64>> {
    if !feature.normalized {
        return Err(Error::input("image feature must be normalized"));
    }
    if feature.vector.len() != embeddings.dim() {
        return Err(Error::input(format!(
            "feature dim {} does not match embedding dim {}",
            feature.vector.len(),
            embeddings.dim()
        )));
    }
    Ok(embeddings.matrix.dot(&feature.vector))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{Backbone, ToyBackbone, ToyConfig};
    use ndarray::array;

    fn toy() -> Backbone {
        Backbone::Toy(ToyBackbone::new(ToyConfig::default()).unwrap())
    }

    fn names(list: &[&str]) -> Vec<String> {
        list.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn bank_always_has_unknown_row() {
        let b = toy();
        let bank = PromptBank::new(&b, &names(&["cat", "dog", "bird"]), 4, 0).unwrap();
        assert_eq!(bank.num_prompts(), 4);
        assert_eq!(bank.unknown_index(), 3);
        assert_eq!(bank.prompt_name(3), UNKNOWN_TOKEN);
        let emb = embed_prompts(&bank, &b).unwrap();
        assert_eq!(emb.num_prompts(), 4);
        assert_eq!(emb.num_id_classes(), 3);
    }

    #[test]
    fn rows_are_unit_norm_and_deterministic() {
        let b = toy();
        let bank = PromptBank::new(&b, &names(&["cat", "dog"]), 4, 7).unwrap();
        let e1 = embed_prompts(&bank, &b).unwrap();
        let e2 = embed_prompts(&bank, &b).unwrap();
        assert_eq!(e1.matrix(), e2.matrix());
        for row in e1.matrix().rows() {
            assert!((row.dot(&row).sqrt() - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn duplicate_or_empty_names_rejected() {
        let b = toy();
        assert!(PromptBank::new(&b, &names(&["cat", "cat"]), 4, 0).is_err());
        assert!(PromptBank::new(&b, &names(&[]), 4, 0).is_err());
        assert!(PromptBank::new(&b, &names(&["  "]), 4, 0).is_err());
    }

    #[test]
    fn unrepresentable_name_is_config_error() {
        let b = toy();
        assert!(matches!(
            PromptBank::new(&b, &names(&["naïve"]), 4, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn similarity_against_known_rows() {
        let emb = TextEmbeddings::from_matrix(array![[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let f = ImageFeature {
            vector: array![1.0, 0.0],
            normalized: true,
        };
        let sims = similarity(&f, &emb).unwrap();
        assert!((sims[0] - 1.0).abs() < 1e-6);
        assert!(sims[1].abs() < 1e-6);
    }

    #[test]
    fn similarity_self_and_orthogonal() {
        let b = toy();
        let bank = PromptBank::new(&b, &names(&["cat", "dog"]), 4, 3).unwrap();
        let emb = embed_prompts(&bank, &b).unwrap();
        let f = ImageFeature {
            vector: emb.row(1).to_owned(),
            normalized: true,
        };
        let sims = similarity(&f, &emb).unwrap();
        assert!((sims[1] - 1.0).abs() < 1e-6);
        for &s in sims.iter() {
            assert!((-1.0 - 1e-9..=1.0 + 1e-9).contains(&s));
        }
    }

    #[test]
    fn similarity_dimension_mismatch_is_input_error() {
        let emb = TextEmbeddings::from_matrix(array![[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let f = ImageFeature {
            vector: array![1.0, 0.0, 0.0],
            normalized: true,
        };
        assert!(matches!(
            similarity(&f, &emb),
            Err(Error::InputContract(_))
        ));
    }

    #[test]
    fn prenormalization_scale_is_absorbed() {
        let b = toy();
        let bank = PromptBank::new(&b, &names(&["cat"]), 4, 1).unwrap();
        let emb = embed_prompts(&bank, &b).unwrap();
        let raw = array![0.3, -0.7, 0.2, 0.1, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.5];
        let f1 = ImageFeature::normalized(&raw.view()).unwrap();
        let scaled = raw.mapv(|x| x * 37.5);
        let f2 = ImageFeature::normalized(&scaled.view()).unwrap();
        let s1 = similarity(&f1, &emb).unwrap();
        let s2 = similarity(&f2, &emb).unwrap();
        for (a, b) in s1.iter().zip(s2.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn context_gradient_matches_finite_differences() {
        let b = toy();
        let mut bank = PromptBank::new(&b, &names(&["cat", "dog"]), 3, 5).unwrap();
        // Scalar probe over the normalized rows.
        let probe = Array2::from_shape_fn((3, 16), |(m, d)| ((m * 5 + d) % 7) as f64 * 0.2 - 0.5);
        let fwd = embed_prompts_with_cache(&bank, &b).unwrap();
        let analytic = prompts_backward(&b, &fwd, &probe).unwrap();
        let h = 1e-5;
        for &(i, j) in &[(0, 2), (1, 9), (2, 15)] {
            let orig = bank.context()[(i, j)];
            bank.context_mut()[(i, j)] = orig + h;
            let up: f64 = (embed_prompts(&bank, &b).unwrap().matrix() * &probe).sum();
            bank.context_mut()[(i, j)] = orig - h;
            let down: f64 = (embed_prompts(&bank, &b).unwrap().matrix() * &probe).sum();
            bank.context_mut()[(i, j)] = orig;
            let fd = (up - down) / (2.0 * h);
            let rel = (analytic[(i, j)] - fd).abs() / fd.abs().max(1e-8);
            assert!(rel < 1e-4, "rel err {rel} at ({i},{j})");
        }
    }
}
