//! Pretrained contrastive vision-language backbone.
//!
//! Loads weights exported as safetensors with the upstream state-dict tensor
//! names (visual.conv1.weight, transformer.resblocks.N..., text_projection,
//! logit_scale, ...). The visual tower runs forward only; the text tower also
//! supports backward so prompt contexts can be optimized against it.

use std::path::PathBuf;

use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::nn::{Attention, Block, LayerNorm, LayerNormCache, Linear, Mlp, Tower, TowerCache};
use super::tokenizer::BpeTokenizer;
use super::weights::{expect_tensor, read_safetensors, Tensor, WeightMap};
use super::{Image, ImageFeature, PatchGrid, PromptCache, PromptForward};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VitConfig {
    /// Safetensors file with the full model state dict.
    pub weights: PathBuf,
    /// vocab.json for the text tokenizer.
    pub vocab: PathBuf,
    /// merges.txt for the text tokenizer.
    pub merges: PathBuf,
    /// Attention heads in the visual tower; defaults to width/64.
    pub visual_heads: Option<usize>,
    /// Attention heads in the text tower; defaults to width/64.
    pub text_heads: Option<usize>,
}

pub struct VitBackbone {
    grid: usize,
    patch_px: usize,
    visual_width: usize,
    visual_heads: usize,
    embed_dim: usize,
    text_width: usize,
    context_length: usize,
    logit_scale: f64,

    conv1: Array2<f64>,
    class_embedding: Array1<f64>,
    visual_pos: Array2<f64>,
    ln_pre: LayerNorm,
    visual_tower: Tower,
    ln_post: LayerNorm,
    visual_proj: Array2<f64>,

    token_embedding: Array2<f64>,
    text_pos: Array2<f64>,
    text_tower: Tower,
    ln_final: LayerNorm,
    text_proj: Array2<f64>,

    tokenizer: BpeTokenizer,
}

pub struct VitPromptCache {
    tower: TowerCache,
    ln: LayerNormCache,
    seq_len: usize,
    token_len: usize,
}

fn to_matrix(t: &Tensor, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_vec((rows, cols), t.data.clone()).expect("shape checked by caller")
}

fn to_vector(t: &Tensor) -> Array1<f64> {
    Array1::from_vec(t.data.clone())
}

fn load_layer_norm(map: &WeightMap, prefix: &str, width: usize) -> Result<LayerNorm> {
    let gamma = expect_tensor(map, &format!("{prefix}.weight"), &[width])?;
    let beta = expect_tensor(map, &format!("{prefix}.bias"), &[width])?;
    Ok(LayerNorm {
        gamma: to_vector(gamma),
        beta: to_vector(beta),
        eps: LN_EPS,
    })
}

fn load_linear(map: &WeightMap, prefix: &str, out: usize, inp: usize) -> Result<Linear> {
    let weight = expect_tensor(map, &format!("{prefix}.weight"), &[out, inp])?;
    let bias = expect_tensor(map, &format!("{prefix}.bias"), &[out])?;
    Ok(Linear {
        weight: to_matrix(weight, out, inp),
        bias: Some(to_vector(bias)),
    })
}

fn load_block(map: &WeightMap, prefix: &str, width: usize, heads: usize) -> Result<Block> {
    // mlp hidden width is read off the tensor rather than assumed 4x.
    let hidden = map
        .get(&format!("{prefix}.mlp.c_fc.weight"))
        .map(|t| t.shape[0])
        .ok_or_else(|| Error::data(format!("missing {prefix}.mlp.c_fc.weight")))?;
    let in_proj_weight = expect_tensor(map, &format!("{prefix}.attn.in_proj_weight"), &[3 * width, width])?;
    let in_proj_bias = expect_tensor(map, &format!("{prefix}.attn.in_proj_bias"), &[3 * width])?;
    Ok(Block {
        ln_1: load_layer_norm(map, &format!("{prefix}.ln_1"), width)?,
        attn: Attention {
            heads,
            in_proj_weight: to_matrix(in_proj_weight, 3 * width, width),
            in_proj_bias: to_vector(in_proj_bias),
            out_proj: load_linear(map, &format!("{prefix}.attn.out_proj"), width, width)?,
        },
        ln_2: load_layer_norm(map, &format!("{prefix}.ln_2"), width)?,
        mlp: Mlp {
            c_fc: load_linear(map, &format!("{prefix}.mlp.c_fc"), hidden, width)?,
            c_proj: load_linear(map, &format!("{prefix}.mlp.c_proj"), width, hidden)?,
        },
    })
}

fn count_layers(map: &WeightMap, prefix: &str) -> usize {
    let mut n = 0;
    while map.contains_key(&format!("{prefix}.resblocks.{n}.ln_1.weight")) {
        n += 1;
    }
    n
}

fn default_heads(width: usize, configured: Option<usize>, field: &str) -> Result<usize> {
    let heads = configured.unwrap_or_else(|| if width % 64 == 0 { width / 64 } else { 1 });
    if heads == 0 || width % heads != 0 {
        return Err(Error::config(format!(
            "{field}: {heads} does not divide width {width}"
        )));
    }
    Ok(heads)
}

impl VitBackbone {
    pub fn load(cfg: &VitConfig) -> Result<Self> {
        let map = read_safetensors(&cfg.weights)?;
        let tokenizer = BpeTokenizer::from_files(&cfg.vocab, &cfg.merges)?;
        Self::from_parts(&map, tokenizer, cfg.visual_heads, cfg.text_heads)
    }

    /// Build from an in-memory weight map; used by `load` and by tests.
    pub fn from_parts(
        map: &WeightMap,
        tokenizer: BpeTokenizer,
        visual_heads: Option<usize>,
        text_heads: Option<usize>,
    ) -> Result<Self> {
        let conv = map
            .get("visual.conv1.weight")
            .ok_or_else(|| Error::data("weights file is missing visual.conv1.weight"))?;
        if conv.shape.len() != 4 || conv.shape[1] != 3 || conv.shape[2] != conv.shape[3] {
            return Err(Error::data(format!(
                "visual.conv1.weight: unexpected shape {:?}",
                conv.shape
            )));
        }
        let visual_width = conv.shape[0];
        let patch_px = conv.shape[2];
        let pos = map
            .get("visual.positional_embedding")
            .ok_or_else(|| Error::data("missing visual.positional_embedding"))?;
        if pos.shape.len() != 2 || pos.shape[1] != visual_width {
            return Err(Error::data("visual.positional_embedding: bad shape"));
        }
        let tokens = pos.shape[0] - 1;
        let grid = (tokens as f64).sqrt().round() as usize;
        if grid * grid != tokens {
            return Err(Error::data(format!(
                "visual positional embedding implies a non-square {tokens}-patch grid"
            )));
        }
        let visual_layers = count_layers(map, "visual.transformer");
        if visual_layers == 0 {
            return Err(Error::data("no visual transformer blocks found"));
        }
        let visual_heads = default_heads(visual_width, visual_heads, "backbone.vit.visual_heads")?;
        let visual_proj_t = map
            .get("visual.proj")
            .ok_or_else(|| Error::data("missing visual.proj"))?;
        if visual_proj_t.shape.len() != 2 || visual_proj_t.shape[0] != visual_width {
            return Err(Error::data("visual.proj: bad shape"));
        }
        let embed_dim = visual_proj_t.shape[1];

        let token_emb = map
            .get("token_embedding.weight")
            .ok_or_else(|| Error::data("missing token_embedding.weight"))?;
        let text_width = token_emb.shape[1];
        let text_pos = map
            .get("positional_embedding")
            .ok_or_else(|| Error::data("missing positional_embedding"))?;
        let context_length = text_pos.shape[0];
        let text_layers = count_layers(map, "transformer");
        if text_layers == 0 {
            return Err(Error::data("no text transformer blocks found"));
        }
        let text_heads = default_heads(text_width, text_heads, "backbone.vit.text_heads")?;
        let text_proj_t = expect_tensor(map, "text_projection", &[text_width, embed_dim])?;
        let logit_scale = map
            .get("logit_scale")
            .map(|t| t.data.first().copied().unwrap_or(0.0))
            .unwrap_or(0.0);

        let visual_blocks = (0..visual_layers)
            .map(|i| load_block(map, &format!("visual.transformer.resblocks.{i}"), visual_width, visual_heads))
            .collect::<Result<Vec<_>>>()?;
        let text_blocks = (0..text_layers)
            .map(|i| load_block(map, &format!("transformer.resblocks.{i}"), text_width, text_heads))
            .collect::<Result<Vec<_>>>()?;

        Ok(VitBackbone {
            grid,
            patch_px,
            visual_width,
            visual_heads,
            embed_dim,
            text_width,
            context_length,
            logit_scale,
            conv1: to_matrix(conv, visual_width, 3 * patch_px * patch_px),
            class_embedding: to_vector(expect_tensor(map, "visual.class_embedding", &[visual_width])?),
            visual_pos: to_matrix(pos, tokens + 1, visual_width),
            ln_pre: load_layer_norm(map, "visual.ln_pre", visual_width)?,
            visual_tower: Tower {
                blocks: visual_blocks,
            },
            ln_post: load_layer_norm(map, "visual.ln_post", visual_width)?,
            visual_proj: to_matrix(visual_proj_t, visual_width, embed_dim),
            token_embedding: to_matrix(token_emb, token_emb.shape[0], text_width),
            text_pos: to_matrix(text_pos, context_length, text_width),
            text_tower: Tower {
                blocks: text_blocks,
            },
            ln_final: load_layer_norm(map, "ln_final", text_width)?,
            text_proj: to_matrix(text_proj_t, text_width, embed_dim),
            tokenizer,
        })
    }

    pub fn patch_shape(&self) -> (usize, usize) {
        (self.grid, self.grid)
    }

    pub fn visual_width(&self) -> usize {
        self.visual_width
    }

    pub fn patch_px(&self) -> usize {
        self.patch_px
    }

    pub fn head_dim(&self) -> usize {
        self.visual_width / self.visual_heads
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn token_dim(&self) -> usize {
        self.text_width
    }

    pub fn temperature(&self) -> f64 {
        (-self.logit_scale).exp()
    }

    pub fn expected_image_shape(&self) -> (usize, usize, usize) {
        let side = self.grid * self.patch_px;
        (3, side, side)
    }

    fn patchify(&self, image: &Image) -> Result<Array2<f64>> {
        let (c, h, w) = self.expected_image_shape();
        if image.channels() != c || image.height() != h || image.width() != w {
            return Err(Error::input(format!(
                "expected {c}x{h}x{w} image, got {}x{}x{}",
                image.channels(),
                image.height(),
                image.width()
            )));
        }
        let p = self.patch_px;
        let n = self.grid * self.grid;
        let mut patches = Array2::<f64>::zeros((n, 3 * p * p));
        for gi in 0..self.grid {
            for gj in 0..self.grid {
                let row = gi * self.grid + gj;
                let mut k = 0;
                for ch in 0..3 {
                    for pi in 0..p {
                        for pj in 0..p {
                            patches[(row, k)] = image.data[(ch, gi * p + pi, gj * p + pj)];
                            k += 1;
                        }
                    }
                }
            }
        }
        Ok(patches.dot(&self.conv1.t()))
    }

    /// Token sequence (class token first) after positional embedding and ln_pre.
    fn embed_visual(&self, image: &Image) -> Result<Array2<f64>> {
        let patches = self.patchify(image)?;
        let n = patches.nrows();
        let mut x = Array2::<f64>::zeros((n + 1, self.visual_width));
        x.row_mut(0).assign(&self.class_embedding);
        x.slice_mut(ndarray::s![1.., ..]).assign(&patches);
        x += &self.visual_pos;
        let (normed, _) = self.ln_pre.forward(&x);
        Ok(normed)
    }

    fn tokens_to_grid(&self, tokens: &Array2<f64>) -> Result<PatchGrid> {
        let dim = tokens.ncols();
        let mut grid = Array3::<f64>::zeros((self.grid, self.grid, dim));
        for gi in 0..self.grid {
            for gj in 0..self.grid {
                grid.slice_mut(ndarray::s![gi, gj, ..])
                    .assign(&tokens.row(gi * self.grid + gj));
            }
        }
        PatchGrid::new(grid)
    }

    /// Value tokens of the final visual attention block, class token dropped.
    pub fn encode_patches(&self, image: &Image) -> Result<PatchGrid> {
        let x = self.embed_visual(image)?;
        let trunk = self.visual_tower.forward_until_last(&x, false);
        let last = self
            .visual_tower
            .blocks
            .last()
            .expect("at least one block");
        let (normed, _) = last.ln_1.forward(&trunk);
        let values = last.attn.value_tokens(&normed);
        self.tokens_to_grid(&values.slice(ndarray::s![1.., ..]).to_owned())
    }

    /// Complete the surgery path for value-space tokens: attention output
    /// projection of the final block, then ln_post and the joint projection.
    pub fn project_patches(&self, grid: &PatchGrid) -> Result<PatchGrid> {
        if grid.dim() != self.visual_width {
            return Err(Error::input(format!(
                "grid dim {} does not match visual width {}",
                grid.dim(),
                self.visual_width
            )));
        }
        let n = grid.rows() * grid.cols();
        let tokens = grid
            .values()
            .to_shape((n, self.visual_width))
            .expect("contiguous grid")
            .to_owned();
        let last = self
            .visual_tower
            .blocks
            .last()
            .expect("at least one block");
        let projected = last.attn.out_proj.forward(&tokens);
        let (normed, _) = self.ln_post.forward(&projected);
        self.tokens_to_grid(&normed.dot(&self.visual_proj))
    }

    fn forward_plain(&self, image: &Image) -> Result<Array2<f64>> {
        let x = self.embed_visual(image)?;
        let (out, _) = self.visual_tower.forward(&x, false);
        let (normed, _) = self.ln_post.forward(&out);
        Ok(normed.dot(&self.visual_proj))
    }

    pub fn plain_patch_embeddings(&self, image: &Image) -> Result<PatchGrid> {
        let joint = self.forward_plain(image)?;
        self.tokens_to_grid(&joint.slice(ndarray::s![1.., ..]).to_owned())
    }

    pub fn encode_image(&self, image: &Image) -> Result<ImageFeature> {
        let joint = self.forward_plain(image)?;
        ImageFeature::normalized(&joint.row(0))
    }

    pub fn check_token(&self, token: &str) -> Result<()> {
        let ids = self.tokenizer.encode(token)?;
        if ids.len() + 2 > self.context_length {
            return Err(Error::config(format!(
                "token {token:?} needs {} positions, more than the context length {}",
                ids.len() + 2,
                self.context_length
            )));
        }
        Ok(())
    }

    pub fn prompt_forward(&self, context: &Array2<f64>, class_name: &str) -> Result<PromptForward> {
        if context.shape()[1] != self.text_width {
            return Err(Error::input(format!(
                "context token dim {} does not match text width {}",
                context.shape()[1],
                self.text_width
            )));
        }
        let name_ids = self.tokenizer.encode(class_name)?;
        let token_len = context.shape()[0];
        let seq_len = 2 + token_len + name_ids.len();
        if seq_len > self.context_length {
            return Err(Error::config(format!(
                "prompt for {class_name:?} needs {seq_len} positions, more than the context length {}",
                self.context_length
            )));
        }
        let mut x = Array2::<f64>::zeros((seq_len, self.text_width));
        x.row_mut(0)
            .assign(&self.token_embedding.row(self.tokenizer.start_id() as usize));
        for (i, row) in context.rows().into_iter().enumerate() {
            x.row_mut(1 + i).assign(&row);
        }
        for (i, &id) in name_ids.iter().enumerate() {
            x.row_mut(1 + token_len + i)
                .assign(&self.token_embedding.row(id as usize));
        }
        x.row_mut(seq_len - 1)
            .assign(&self.token_embedding.row(self.tokenizer.end_id() as usize));
        x += &self.text_pos.slice(ndarray::s![..seq_len, ..]);

        let (hidden, tower) = self.text_tower.forward(&x, true);
        let (normed, ln) = self.ln_final.forward(&hidden);
        let embedding = normed.row(seq_len - 1).dot(&self.text_proj);
        Ok(PromptForward {
            embedding,
            cache: PromptCache::Vit(VitPromptCache {
                tower,
                ln,
                seq_len,
                token_len,
            }),
        })
    }

    pub fn prompt_backward(
        &self,
        cache: &VitPromptCache,
        d_embedding: &Array1<f64>,
    ) -> Result<Array2<f64>> {
        if d_embedding.len() != self.embed_dim {
            return Err(Error::input("gradient dim mismatch"));
        }
        let d_eot = self.text_proj.dot(d_embedding);
        let mut d_normed = Array2::<f64>::zeros((cache.seq_len, self.text_width));
        d_normed.row_mut(cache.seq_len - 1).assign(&d_eot);
        let d_hidden = self.ln_final.backward(&cache.ln, &d_normed);
        let d_input = self.text_tower.backward(&cache.tower, &d_hidden);
        Ok(d_input
            .slice(ndarray::s![1..1 + cache.token_len, ..])
            .to_owned())
    }
}
