//! Vision-language backbone adapter.
//!
//! Exposes patch-level value tokens, pooled image features and prompt text
//! embeddings behind one interface with two implementations: a deterministic
//! toy encoder for desk-scale runs and a pretrained transformer loaded from
//! a weights file. The two feature-path modifications that feed the masking
//! stage, neighborhood context incorporation and value-value attention, are
//! standalone grid operations so they can be tested in isolation.

pub mod nn;
pub mod tokenizer;
pub mod toy;
pub mod vit;
pub mod weights;

use ndarray::{Array1, Array2, Array3, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{all_finite, l2_normalize};

pub use toy::{ToyBackbone, ToyConfig};
pub use vit::{VitBackbone, VitConfig};

/// Preprocessed image tensor, channels x height x width.
#[derive(Debug, Clone)]
pub struct Image {
    pub data: Array3<f64>,
}

impl Image {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        if !all_finite(data.iter()) {
            return Err(Error::numeric("image tensor contains non-finite values"));
        }
        Ok(Image { data })
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }
}

/// rows x cols grid of dim-dimensional patch embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    values: Array3<f64>,
}

impl PatchGrid {
    pub fn new(values: Array3<f64>) -> Result<Self> {
        let shape = values.shape();
        if shape[0] == 0 || shape[1] == 0 || shape[2] == 0 {
            return Err(Error::input("patch grid dimensions must all be >= 1"));
        }
        if !all_finite(values.iter()) {
            return Err(Error::numeric("patch grid contains non-finite values"));
        }
        Ok(PatchGrid { values })
    }

    pub fn rows(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn cell(&self, row: usize, col: usize) -> ArrayView1<'_, f64> {
        self.values.slice(ndarray::s![row, col, ..])
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.values
    }

    /// Cell indices in row-major order.
    pub fn cells(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let cols = self.cols();
        (0..self.rows()).flat_map(move |i| (0..cols).map(move |j| (i, j)))
    }
}

/// Pooled global image embedding.
#[derive(Debug, Clone)]
pub struct ImageFeature {
    pub vector: Array1<f64>,
    pub normalized: bool,
}

impl ImageFeature {
    /// Build a unit-norm feature from an arbitrary vector.
    pub fn normalized(vector: &ArrayView1<f64>) -> Result<Self> {
        Ok(ImageFeature {
            vector: l2_normalize(vector)?,
            normalized: true,
        })
    }
}

/// Border handling for the 3x3 neighborhood kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    #[default]
    Replicate,
    Zero,
}

/// Weight and border mode for neighborhood context incorporation.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ContextConfig {
    /// Weight on the 3x3 neighborhood mean added to each patch token.
    pub beta_ctx: f64,
    #[serde(default)]
    pub padding: Padding,
}

impl Default for ContextConfig {
    fn default() -> Self {
        ContextConfig {
            beta_ctx: 0.1,
            padding: Padding::Replicate,
        }
    }
}

impl ContextConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta_ctx >= 0.0) {
            return Err(Error::config(format!(
                "context.beta_ctx: must be >= 0, got {}",
                self.beta_ctx
            )));
        }
        Ok(())
    }
}

/// Logit scaling for value-value attention.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct VVAttentionConfig {
    pub scale: f64,
}

impl VVAttentionConfig {
    /// The backbone's native attention scaling, 1/sqrt(head dim).
    pub fn native(head_dim: usize) -> Self {
        VVAttentionConfig {
            scale: 1.0 / (head_dim as f64).sqrt(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) {
            return Err(Error::config(format!(
                "vv_attention.scale: must be > 0, got {}",
                self.scale
            )));
        }
        Ok(())
    }
}

/// Adds the beta-weighted 3x3 neighborhood mean to every patch token,
/// channelwise. The kernel weights every neighbor (and the cell itself)
/// at 1/9; borders follow `cfg.padding`.
pub fn patch_context_incorporate(grid: &PatchGrid, cfg: &ContextConfig) -> Result<PatchGrid> {
    cfg.validate()?;
    let (rows, cols, dim) = (grid.rows(), grid.cols(), grid.dim());
    let src = grid.values();
    let mut out = Array3::<f64>::zeros((rows, cols, dim));
    for i in 0..rows {
        for j in 0..cols {
            for di in -1i64..=1 {
                for dj in -1i64..=1 {
                    let (ni, nj) = (i as i64 + di, j as i64 + dj);
                    match cfg.padding {
                        Padding::Replicate => {
                            let ci = ni.clamp(0, rows as i64 - 1) as usize;
                            let cj = nj.clamp(0, cols as i64 - 1) as usize;
                            for d in 0..dim {
                                out[(i, j, d)] += src[(ci, cj, d)];
                            }
                        }
                        Padding::Zero => {
                            if ni >= 0 && nj >= 0 && (ni as usize) < rows && (nj as usize) < cols {
                                for d in 0..dim {
                                    out[(i, j, d)] += src[(ni as usize, nj as usize, d)];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out.mapv_inplace(|x| x / 9.0);
    let result = src + &out.mapv(|m| m * cfg.beta_ctx);
    PatchGrid::new(result)
}

/// Self-attention where both the weights and the mixed values come from the
/// value tokens: out_i = sum_j softmax_j(scale * <v_i, v_j>) v_j. Patches are
/// flattened row-major into the token sequence and reshaped back afterwards.
pub fn vv_attention(grid: &PatchGrid, cfg: &VVAttentionConfig) -> Result<PatchGrid> {
    cfg.validate()?;
    let (rows, cols, dim) = (grid.rows(), grid.cols(), grid.dim());
    let n = rows * cols;
    let tokens = grid
        .values()
        .to_shape((n, dim))
        .map_err(|e| Error::input(format!("cannot flatten grid: {e}")))?
        .to_owned();
    let logits = tokens.dot(&tokens.t()) * cfg.scale;
    if !all_finite(logits.iter()) {
        return Err(Error::numeric("non-finite attention logits"));
    }
    let mut out = Array2::<f64>::zeros((n, dim));
    for (i, row) in logits.rows().into_iter().enumerate() {
        let weights = crate::numeric::softmax(row.as_slice().expect("contiguous row"));
        for (j, &w) in weights.iter().enumerate() {
            for d in 0..dim {
                out[(i, d)] += w * tokens[(j, d)];
            }
        }
    }
    let reshaped = out
        .into_shape_with_order((rows, cols, dim))
        .map_err(|e| Error::numeric(format!("reshape failed: {e}")))?;
    PatchGrid::new(reshaped)
}

/// The two grid transforms applied on the surgery path, in application order.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SurgeryConfig {
    pub context: ContextConfig,
    pub attention: VVAttentionConfig,
}

/// Forward pass over the text tower for one prompt; holds what the
/// corresponding backward needs.
pub struct PromptForward {
    /// Unnormalized prompt embedding in the joint space.
    pub embedding: Array1<f64>,
    pub cache: PromptCache,
}

pub enum PromptCache {
    Toy(toy::ToyPromptCache),
    Vit(vit::VitPromptCache),
}

/// Backbone selection: toy for desk-scale work, pretrained transformer
/// weights for real runs. Forward passes are read-only over frozen weights.
pub enum Backbone {
    Toy(ToyBackbone),
    Vit(VitBackbone),
}

impl Backbone {
    pub fn patch_shape(&self) -> (usize, usize) {
        match self {
            Backbone::Toy(b) => b.patch_shape(),
            Backbone::Vit(b) => b.patch_shape(),
        }
    }

    /// Dimensionality of the value tokens returned by `encode_patches`.
    pub fn visual_width(&self) -> usize {
        match self {
            Backbone::Toy(b) => b.visual_width(),
            Backbone::Vit(b) => b.visual_width(),
        }
    }

    /// Dimensionality of the joint image/text embedding space.
    pub fn embed_dim(&self) -> usize {
        match self {
            Backbone::Toy(b) => b.embed_dim(),
            Backbone::Vit(b) => b.embed_dim(),
        }
    }

    /// Per-head dimensionality of the visual attention, used for the native
    /// value-value attention scale.
    pub fn head_dim(&self) -> usize {
        match self {
            Backbone::Toy(b) => b.visual_width(),
            Backbone::Vit(b) => b.head_dim(),
        }
    }

    /// Dimensionality of text token embeddings (the space the learnable
    /// prompt context lives in).
    pub fn token_dim(&self) -> usize {
        match self {
            Backbone::Toy(b) => b.token_dim(),
            Backbone::Vit(b) => b.token_dim(),
        }
    }

    /// Pixels per patch side in the expected input image.
    pub fn patch_px(&self) -> usize {
        match self {
            Backbone::Toy(b) => b.config().patch_px,
            Backbone::Vit(b) => b.patch_px(),
        }
    }

    /// The backbone's frozen softmax temperature.
    pub fn temperature(&self) -> f64 {
        match self {
            Backbone::Toy(b) => b.temperature(),
            Backbone::Vit(b) => b.temperature(),
        }
    }

    /// Value tokens of the final visual attention block, as a grid.
    pub fn encode_patches(&self, image: &Image) -> Result<PatchGrid> {
        match self {
            Backbone::Toy(b) => b.encode_patches(image),
            Backbone::Vit(b) => b.encode_patches(image),
        }
    }

    /// Map value tokens into the joint embedding space.
    pub fn project_patches(&self, grid: &PatchGrid) -> Result<PatchGrid> {
        match self {
            Backbone::Toy(b) => b.project_patches(grid),
            Backbone::Vit(b) => b.project_patches(grid),
        }
    }

    /// Per-patch embeddings in the joint space from the unmodified forward
    /// path (original attention, no context incorporation).
    pub fn plain_patch_embeddings(&self, image: &Image) -> Result<PatchGrid> {
        match self {
            Backbone::Toy(b) => b.plain_patch_embeddings(image),
            Backbone::Vit(b) => b.plain_patch_embeddings(image),
        }
    }

    /// Pooled, L2-normalized global image embedding.
    pub fn encode_image(&self, image: &Image) -> Result<ImageFeature> {
        match self {
            Backbone::Toy(b) => b.encode_image(image),
            Backbone::Vit(b) => b.encode_image(image),
        }
    }

    /// Patch embeddings after the full surgery path: context incorporation,
    /// value-value attention, projection to the joint space.
    pub fn surgery_patch_embeddings(&self, image: &Image, cfg: &SurgeryConfig) -> Result<PatchGrid> {
        let values = self.encode_patches(image)?;
        let mixed = patch_context_incorporate(&values, &cfg.context)?;
        let attended = vv_attention(&mixed, &cfg.attention)?;
        self.project_patches(&attended)
    }

    /// Encode one prompt: the learnable context block followed by the class
    /// name tokens, through the frozen text tower. Differentiable in `context`.
    pub fn prompt_forward(&self, context: &Array2<f64>, class_name: &str) -> Result<PromptForward> {
        match self {
            Backbone::Toy(b) => b.prompt_forward(context, class_name),
            Backbone::Vit(b) => b.prompt_forward(context, class_name),
        }
    }

    /// Gradient of a loss with respect to the context block, given the
    /// gradient with respect to the unnormalized prompt embedding.
    pub fn prompt_backward(&self, cache: &PromptCache, d_embedding: &Array1<f64>) -> Result<Array2<f64>> {
        match (self, cache) {
            (Backbone::Toy(b), PromptCache::Toy(c)) => b.prompt_backward(c, d_embedding),
            (Backbone::Vit(b), PromptCache::Vit(c)) => b.prompt_backward(c, d_embedding),
            _ => Err(Error::input("prompt cache does not match backbone kind")),
        }
    }

    /// Validate that a class name is representable by the text tokenizer.
    pub fn check_token(&self, token: &str) -> Result<()> {
        match self {
            Backbone::Toy(b) => b.check_token(token),
            Backbone::Vit(b) => b.check_token(token),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array3, Axis};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid_from_fn(rows: usize, cols: usize, dim: usize, f: impl Fn(usize, usize, usize) -> f64) -> PatchGrid {
        PatchGrid::new(Array3::from_shape_fn((rows, cols, dim), |(i, j, d)| f(i, j, d))).unwrap()
    }

    /// Nested-loop 3x3 averaging oracle, independent of the implementation.
    pub(crate) fn conv_oracle(grid: &PatchGrid, cfg: &ContextConfig) -> Array3<f64> {
        let (rows, cols, dim) = (grid.rows(), grid.cols(), grid.dim());
        let src = grid.values();
        let mut out = Array3::<f64>::zeros((rows, cols, dim));
        for i in 0..rows as i64 {
            for j in 0..cols as i64 {
                for d in 0..dim {
                    let mut acc = 0.0;
                    for di in -1..=1i64 {
                        for dj in -1..=1i64 {
                            let (ni, nj) = (i + di, j + dj);
                            acc += match cfg.padding {
                                Padding::Replicate => {
                                    let ci = ni.clamp(0, rows as i64 - 1) as usize;
                                    let cj = nj.clamp(0, cols as i64 - 1) as usize;
                                    src[(ci, cj, d)]
                                }
                                Padding::Zero => {
                                    if ni >= 0 && nj >= 0 && ni < rows as i64 && nj < cols as i64 {
                                        src[(ni as usize, nj as usize, d)]
                                    } else {
                                        0.0
                                    }
                                }
                            };
                        }
                    }
                    out[(i as usize, j as usize, d)] =
                        src[(i as usize, j as usize, d)] + cfg.beta_ctx * acc / 9.0;
                }
            }
        }
        out
    }

    #[test]
    fn context_zero_beta_is_identity() {
        let grid = grid_from_fn(4, 5, 3, |i, j, d| (i * 31 + j * 7 + d) as f64 * 0.13 - 1.0);
        let cfg = ContextConfig {
            beta_ctx: 0.0,
            padding: Padding::Replicate,
        };
        let out = patch_context_incorporate(&grid, &cfg).unwrap();
        assert_eq!(out.values(), grid.values());
    }

    #[test]
    fn context_constant_grid_scales_by_one_plus_beta() {
        let c = -2.75;
        let beta = 0.37;
        let grid = grid_from_fn(5, 4, 2, |_, _, _| c);
        let cfg = ContextConfig {
            beta_ctx: beta,
            padding: Padding::Replicate,
        };
        let out = patch_context_incorporate(&grid, &cfg).unwrap();
        for v in out.values().iter() {
            assert!((v - c * (1.0 + beta)).abs() < 1e-12);
        }
    }

    #[test]
    fn context_center_cell_matches_hand_value() {
        // 3x3 single-channel grid 1..9, replicate padding, beta 0.1:
        // neighborhood mean at the center is 5, so the center becomes 5.5.
        let grid = grid_from_fn(3, 3, 1, |i, j, _| (i * 3 + j + 1) as f64);
        let cfg = ContextConfig {
            beta_ctx: 0.1,
            padding: Padding::Replicate,
        };
        let out = patch_context_incorporate(&grid, &cfg).unwrap();
        assert!((out.values()[(1, 1, 0)] - 5.5).abs() < 1e-12);
        let oracle = conv_oracle(&grid, &cfg);
        for (a, b) in out.values().iter().zip(oracle.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn context_matches_oracle_both_paddings() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &padding in &[Padding::Replicate, Padding::Zero] {
            for _ in 0..20 {
                let rows = rng.gen_range(1..8);
                let cols = rng.gen_range(1..8);
                let dim = rng.gen_range(1..5);
                let grid = PatchGrid::new(Array3::from_shape_fn((rows, cols, dim), |_| {
                    rng.gen_range(-2.0..2.0)
                }))
                .unwrap();
                let cfg = ContextConfig {
                    beta_ctx: rng.gen_range(0.0..1.0),
                    padding,
                };
                let out = patch_context_incorporate(&grid, &cfg).unwrap();
                let oracle = conv_oracle(&grid, &cfg);
                for (a, b) in out.values().iter().zip(oracle.iter()) {
                    assert!((a - b).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn context_is_linear_in_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = ContextConfig::default();
        let g1 = PatchGrid::new(Array3::from_shape_fn((4, 4, 3), |_| rng.gen_range(-1.0..1.0))).unwrap();
        let g2 = PatchGrid::new(Array3::from_shape_fn((4, 4, 3), |_| rng.gen_range(-1.0..1.0))).unwrap();
        let (a, b) = (0.7, -1.3);
        let lhs = patch_context_incorporate(
            &PatchGrid::new(g1.values() * a + g2.values() * b).unwrap(),
            &cfg,
        )
        .unwrap();
        let r1 = patch_context_incorporate(&g1, &cfg).unwrap();
        let r2 = patch_context_incorporate(&g2, &cfg).unwrap();
        let rhs = r1.values() * a + r2.values() * b;
        for (x, y) in lhs.values().iter().zip(rhs.iter()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn vv_single_token_is_identity() {
        let grid = grid_from_fn(1, 1, 4, |_, _, d| d as f64 - 1.5);
        let out = vv_attention(&grid, &VVAttentionConfig { scale: 1.0 }).unwrap();
        for (a, b) in out.values().iter().zip(grid.values().iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn vv_two_token_hand_oracle() {
        // v1=(1,0), v2=(0,1), scale=1. Row logits are [1,0] and [0,1], so each
        // output is w*self + (1-w)*other with w = e/(e+1).
        let mut values = Array3::zeros((1, 2, 2));
        values[(0, 0, 0)] = 1.0;
        values[(0, 1, 1)] = 1.0;
        let grid = PatchGrid::new(values).unwrap();
        let out = vv_attention(&grid, &VVAttentionConfig { scale: 1.0 }).unwrap();
        let w = std::f64::consts::E / (std::f64::consts::E + 1.0);
        assert!((out.values()[(0, 0, 0)] - w).abs() < 1e-12);
        assert!((out.values()[(0, 0, 1)] - (1.0 - w)).abs() < 1e-12);
        assert!((out.values()[(0, 1, 0)] - (1.0 - w)).abs() < 1e-12);
        assert!((out.values()[(0, 1, 1)] - w).abs() < 1e-12);
    }

    #[test]
    fn vv_output_in_convex_hull() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let grid = PatchGrid::new(Array3::from_shape_fn((3, 4, 5), |_| rng.gen_range(-3.0..3.0))).unwrap();
        let out = vv_attention(&grid, &VVAttentionConfig { scale: 0.5 }).unwrap();
        let flat = grid.values().to_shape((12, 5)).unwrap().to_owned();
        for d in 0..5 {
            let col = flat.index_axis(Axis(1), d);
            let min = col.iter().cloned().fold(f64::INFINITY, f64::min);
            let max = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for (i, j) in out.cells() {
                let v = out.values()[(i, j, d)];
                assert!(v >= min - 1e-6 && v <= max + 1e-6);
            }
        }
    }

    #[test]
    fn vv_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // 1 x n grid so a token permutation is a column permutation.
        let n = 6;
        let dim = 3;
        let grid = PatchGrid::new(Array3::from_shape_fn((1, n, dim), |_| rng.gen_range(-1.0..1.0))).unwrap();
        let cfg = VVAttentionConfig { scale: 0.7 };
        let out = vv_attention(&grid, &cfg).unwrap();
        let perm: Vec<usize> = vec![3, 0, 5, 1, 4, 2];
        let permuted = PatchGrid::new(Array3::from_shape_fn((1, n, dim), |(_, j, d)| {
            grid.values()[(0, perm[j], d)]
        }))
        .unwrap();
        let out_perm = vv_attention(&permuted, &cfg).unwrap();
        for j in 0..n {
            for d in 0..dim {
                assert!((out_perm.values()[(0, j, d)] - out.values()[(0, perm[j], d)]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn vv_rows_sum_to_one_is_preserved_for_constant_grid() {
        // All tokens identical: attention must return the same constant grid.
        let grid = grid_from_fn(2, 3, 4, |_, _, d| 0.3 * d as f64 + 0.1);
        let out = vv_attention(&grid, &VVAttentionConfig { scale: 2.0 }).unwrap();
        for (a, b) in out.values().iter().zip(grid.values().iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        let grid = grid_from_fn(2, 2, 2, |_, _, _| 0.0);
        let bad_ctx = ContextConfig {
            beta_ctx: -0.1,
            padding: Padding::Replicate,
        };
        assert!(matches!(
            patch_context_incorporate(&grid, &bad_ctx),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            vv_attention(&grid, &VVAttentionConfig { scale: 0.0 }),
            Err(Error::Config(_))
        ));
    }
}
