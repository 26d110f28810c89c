//! Deterministic desk-scale backbone.
//!
//! The visual side is a bias-free linear patch encoder: value tokens are
//! linear in the pixels, so a zero image yields a zero grid and every
//! forward is a pure function of the input and the seed. The text side is a
//! two-layer tanh network over mean-pooled token embeddings, small enough to
//! hand-differentiate exactly.

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::all_finite;

use super::{Image, ImageFeature, PatchGrid, PromptCache, PromptForward};

const ALPHABET: &str = "abcdefghijklmnopqrstuvwxyz0123456789 -_";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToyConfig {
    pub grid_rows: usize,
    pub grid_cols: usize,
    /// Pixels per patch side; expected image is grid_rows*patch_px high.
    pub patch_px: usize,
    pub channels: usize,
    pub visual_width: usize,
    pub embed_dim: usize,
    pub token_dim: usize,
    pub text_hidden: usize,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            grid_rows: 4,
            grid_cols: 4,
            patch_px: 4,
            channels: 3,
            visual_width: 16,
            embed_dim: 16,
            token_dim: 16,
            text_hidden: 32,
            temperature: 0.1,
            seed: 0,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("backbone.toy.grid_rows", self.grid_rows),
            ("backbone.toy.grid_cols", self.grid_cols),
            ("backbone.toy.patch_px", self.patch_px),
            ("backbone.toy.channels", self.channels),
            ("backbone.toy.visual_width", self.visual_width),
            ("backbone.toy.embed_dim", self.embed_dim),
            ("backbone.toy.token_dim", self.token_dim),
            ("backbone.toy.text_hidden", self.text_hidden),
        ] {
            if v == 0 {
                return Err(Error::config(format!("{name}: must be >= 1")));
            }
        }
        if !(self.temperature > 0.0) {
            return Err(Error::config(format!(
                "backbone.toy.temperature: must be > 0, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

pub struct ToyBackbone {
    cfg: ToyConfig,
    /// visual_width x (channels * patch_px^2), bias-free.
    patch_embed: Array2<f64>,
    /// embed_dim x visual_width, bias-free.
    proj: Array2<f64>,
    /// One embedding row per alphabet symbol.
    token_table: Array2<f64>,
    /// text_hidden x 2*token_dim: the tower sees mean-pooled context and
    /// mean-pooled name tokens as separate halves, so a shared context
    /// cannot wash out per-class name information.
    w1: Array2<f64>,
    /// embed_dim x text_hidden.
    w2: Array2<f64>,
}

fn seeded_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let normal = Normal::new(0.0, 1.0 / (cols as f64).sqrt()).expect("valid std");
    Array2::from_shape_fn((rows, cols), |_| normal.sample(rng))
}

pub struct ToyPromptCache {
    hidden: Array1<f64>,
    token_len: usize,
    token_dim: usize,
}

impl ToyBackbone {
    pub fn new(cfg: ToyConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let patch_dim = cfg.channels * cfg.patch_px * cfg.patch_px;
        let patch_embed = seeded_matrix(&mut rng, cfg.visual_width, patch_dim);
        let proj = seeded_matrix(&mut rng, cfg.embed_dim, cfg.visual_width);
        let token_table = seeded_matrix(&mut rng, ALPHABET.len(), cfg.token_dim);
        let w1 = seeded_matrix(&mut rng, cfg.text_hidden, 2 * cfg.token_dim);
        let w2 = seeded_matrix(&mut rng, cfg.embed_dim, cfg.text_hidden);
        Ok(ToyBackbone {
            cfg,
            patch_embed,
            proj,
            token_table,
            w1,
            w2,
        })
    }

    pub fn config(&self) -> &ToyConfig {
        &self.cfg
    }

    pub fn patch_shape(&self) -> (usize, usize) {
        (self.cfg.grid_rows, self.cfg.grid_cols)
    }

    pub fn visual_width(&self) -> usize {
        self.cfg.visual_width
    }

    pub fn embed_dim(&self) -> usize {
        self.cfg.embed_dim
    }

    pub fn token_dim(&self) -> usize {
        self.cfg.token_dim
    }

    pub fn temperature(&self) -> f64 {
        self.cfg.temperature
    }

    pub fn expected_image_shape(&self) -> (usize, usize, usize) {
        (
            self.cfg.channels,
            self.cfg.grid_rows * self.cfg.patch_px,
            self.cfg.grid_cols * self.cfg.patch_px,
        )
    }

    pub fn encode_patches(&self, image: &Image) -> Result<PatchGrid> {
        let (c, h, w) = self.expected_image_shape();
        if image.channels() != c || image.height() != h || image.width() != w {
            return Err(Error::input(format!(
                "expected {c}x{h}x{w} image, got {}x{}x{}",
                image.channels(),
                image.height(),
                image.width()
            )));
        }
        let p = self.cfg.patch_px;
        let mut grid = ndarray::Array3::<f64>::zeros((
            self.cfg.grid_rows,
            self.cfg.grid_cols,
            self.cfg.visual_width,
        ));
        let mut flat = Array1::<f64>::zeros(c * p * p);
        for gi in 0..self.cfg.grid_rows {
            for gj in 0..self.cfg.grid_cols {
                let mut k = 0;
                for ch in 0..c {
                    for pi in 0..p {
                        for pj in 0..p {
                            flat[k] = image.data[(ch, gi * p + pi, gj * p + pj)];
                            k += 1;
                        }
                    }
                }
                let token = self.patch_embed.dot(&flat);
                if !all_finite(token.iter()) {
                    return Err(Error::numeric("non-finite activation in patch encoder"));
                }
                grid.slice_mut(ndarray::s![gi, gj, ..]).assign(&token);
            }
        }
        PatchGrid::new(grid)
    }

    pub fn project_patches(&self, grid: &PatchGrid) -> Result<PatchGrid> {
        if grid.dim() != self.cfg.visual_width {
            return Err(Error::input(format!(
                "grid dim {} does not match visual width {}",
                grid.dim(),
                self.cfg.visual_width
            )));
        }
        let mut out = ndarray::Array3::<f64>::zeros((grid.rows(), grid.cols(), self.cfg.embed_dim));
        for (i, j) in grid.cells() {
            let projected = self.proj.dot(&grid.cell(i, j));
            out.slice_mut(ndarray::s![i, j, ..]).assign(&projected);
        }
        PatchGrid::new(out)
    }

    pub fn plain_patch_embeddings(&self, image: &Image) -> Result<PatchGrid> {
        let values = self.encode_patches(image)?;
        self.project_patches(&values)
    }

    pub fn encode_image(&self, image: &Image) -> Result<ImageFeature> {
        let grid = self.plain_patch_embeddings(image)?;
        let n = (grid.rows() * grid.cols()) as f64;
        let mut pooled = Array1::<f64>::zeros(self.cfg.embed_dim);
        for (i, j) in grid.cells() {
            pooled += &grid.cell(i, j);
        }
        pooled.mapv_inplace(|x| x / n);
        ImageFeature::normalized(&pooled.view())
    }

    fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        let lowered = text.to_lowercase();
        let mut ids = Vec::with_capacity(lowered.len());
        for ch in lowered.chars() {
            match ALPHABET.find(ch) {
                Some(idx) => ids.push(idx),
                None => {
                    return Err(Error::config(format!(
                        "token {text:?} contains {ch:?}, which is not in the toy tokenizer vocabulary"
                    )))
                }
            }
        }
        if ids.is_empty() {
            return Err(Error::config("empty token cannot be embedded"));
        }
        Ok(ids)
    }

    pub fn check_token(&self, token: &str) -> Result<()> {
        self.tokenize(token).map(|_| ())
    }

    pub fn prompt_forward(&self, context: &Array2<f64>, class_name: &str) -> Result<PromptForward> {
        if context.shape()[1] != self.cfg.token_dim {
            return Err(Error::input(format!(
                "context token dim {} does not match backbone token dim {}",
                context.shape()[1],
                self.cfg.token_dim
            )));
        }
        let ids = self.tokenize(class_name)?;
        let token_len = context.shape()[0];
        let t = self.cfg.token_dim;
        // First half: mean of context rows (zero for an empty context);
        // second half: mean of name token embeddings.
        let mut pooled = Array1::<f64>::zeros(2 * t);
        if token_len > 0 {
            for row in context.rows() {
                for d in 0..t {
                    pooled[d] += row[d];
                }
            }
            for d in 0..t {
                pooled[d] /= token_len as f64;
            }
        }
        for &id in &ids {
            for d in 0..t {
                pooled[t + d] += self.token_table[(id, d)];
            }
        }
        for d in 0..t {
            pooled[t + d] /= ids.len() as f64;
        }
        let hidden = self.w1.dot(&pooled).mapv(f64::tanh);
        let embedding = self.w2.dot(&hidden);
        Ok(PromptForward {
            embedding,
            cache: PromptCache::Toy(ToyPromptCache {
                hidden,
                token_len,
                token_dim: t,
            }),
        })
    }

    pub fn prompt_backward(
        &self,
        cache: &ToyPromptCache,
        d_embedding: &Array1<f64>,
    ) -> Result<Array2<f64>> {
        if d_embedding.len() != self.cfg.embed_dim {
            return Err(Error::input("gradient dim mismatch"));
        }
        let d_hidden_pre = self.w2.t().dot(d_embedding);
        let d_hidden: Array1<f64> = &d_hidden_pre * &cache.hidden.mapv(|h| 1.0 - h * h);
        let d_pooled = self.w1.t().dot(&d_hidden);
        // Only the context half of the pooled vector depends on the context.
        let mut d_context = Array2::<f64>::zeros((cache.token_len, cache.token_dim));
        if cache.token_len > 0 {
            let scale = 1.0 / cache.token_len as f64;
            for mut row in d_context.rows_mut() {
                for d in 0..cache.token_dim {
                    row[d] = d_pooled[d] * scale;
                }
            }
        }
        Ok(d_context)
    }
}
