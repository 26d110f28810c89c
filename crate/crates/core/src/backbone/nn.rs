//! Transformer building blocks with hand-written backward passes.
//!
//! Weights are frozen everywhere, so backward computes input gradients only.
//! This is all the prompt-learning path needs: the loss differentiates with
//! respect to context token embeddings fed into the text tower.

use ndarray::{Array1, Array2};

/// y = x W^T + b, with W stored out x in (PyTorch layout).
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Option<Array1<f64>>,
}

impl Linear {
    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.weight.t());
        if let Some(b) = &self.bias {
            y += b;
        }
        y
    }

    pub fn backward(&self, d_out: &Array2<f64>) -> Array2<f64> {
        d_out.dot(&self.weight)
    }
}

pub struct LayerNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub eps: f64,
}

pub struct LayerNormCache {
    x_hat: Array2<f64>,
    inv_std: Array1<f64>,
}

impl LayerNorm {
    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, LayerNormCache) {
        let d = x.ncols() as f64;
        let mut x_hat = Array2::zeros(x.raw_dim());
        let mut inv_std = Array1::zeros(x.nrows());
        for (i, row) in x.rows().into_iter().enumerate() {
            let mean = row.sum() / d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let istd = 1.0 / (var + self.eps).sqrt();
            inv_std[i] = istd;
            for (j, &v) in row.iter().enumerate() {
                x_hat[(i, j)] = (v - mean) * istd;
            }
        }
        let y = &x_hat * &self.gamma + &self.beta;
        (y, LayerNormCache { x_hat, inv_std })
    }

    pub fn backward(&self, cache: &LayerNormCache, d_out: &Array2<f64>) -> Array2<f64> {
        let d = d_out.ncols() as f64;
        let d_xhat = d_out * &self.gamma;
        let mut dx = Array2::zeros(d_out.raw_dim());
        for i in 0..d_out.nrows() {
            let row_dxhat = d_xhat.row(i);
            let row_xhat = cache.x_hat.row(i);
            let mean_dxhat = row_dxhat.sum() / d;
            let mean_dxhat_xhat = row_dxhat
                .iter()
                .zip(row_xhat.iter())
                .map(|(a, b)| a * b)
                .sum::<f64>()
                / d;
            for j in 0..d_out.ncols() {
                dx[(i, j)] = cache.inv_std[i]
                    * (row_dxhat[j] - mean_dxhat - row_xhat[j] * mean_dxhat_xhat);
            }
        }
        dx
    }
}

pub fn quick_gelu(x: f64) -> f64 {
    x * sigmoid(1.702 * x)
}

pub fn quick_gelu_grad(x: f64) -> f64 {
    let s = sigmoid(1.702 * x);
    s + 1.702 * x * s * (1.0 - s)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Multi-head self-attention with a packed qkv projection.
pub struct Attention {
    pub heads: usize,
    /// 3*width x width.
    pub in_proj_weight: Array2<f64>,
    pub in_proj_bias: Array1<f64>,
    pub out_proj: Linear,
}

pub struct AttentionCache {
    q: Vec<Array2<f64>>,
    k: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    probs: Vec<Array2<f64>>,
}

impl Attention {
    pub fn width(&self) -> usize {
        self.in_proj_weight.ncols()
    }

    pub fn head_dim(&self) -> usize {
        self.width() / self.heads
    }

    /// Full-width value projection of an already-normalized input.
    pub fn value_tokens(&self, x_ln: &Array2<f64>) -> Array2<f64> {
        let w = self.width();
        let wv = self.in_proj_weight.slice(ndarray::s![2 * w..3 * w, ..]);
        let bv = self.in_proj_bias.slice(ndarray::s![2 * w..3 * w]);
        x_ln.dot(&wv.t()) + &bv
    }

    pub fn forward(&self, x: &Array2<f64>, causal: bool) -> (Array2<f64>, AttentionCache) {
        let (len, width) = (x.nrows(), x.ncols());
        let hd = self.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let qkv = x.dot(&self.in_proj_weight.t()) + &self.in_proj_bias;
        let mut cache = AttentionCache {
            q: Vec::with_capacity(self.heads),
            k: Vec::with_capacity(self.heads),
            v: Vec::with_capacity(self.heads),
            probs: Vec::with_capacity(self.heads),
        };
        let mut merged = Array2::<f64>::zeros((len, width));
        for h in 0..self.heads {
            let q = qkv.slice(ndarray::s![.., h * hd..(h + 1) * hd]).to_owned();
            let k = qkv
                .slice(ndarray::s![.., width + h * hd..width + (h + 1) * hd])
                .to_owned();
            let v = qkv
                .slice(ndarray::s![.., 2 * width + h * hd..2 * width + (h + 1) * hd])
                .to_owned();
            let mut scores = q.dot(&k.t()) * scale;
            if causal {
                for i in 0..len {
                    for j in (i + 1)..len {
                        scores[(i, j)] = f64::NEG_INFINITY;
                    }
                }
            }
            let mut probs = Array2::<f64>::zeros((len, len));
            for (i, row) in scores.rows().into_iter().enumerate() {
                let p = crate::numeric::softmax(row.as_slice().expect("contiguous"));
                for (j, &pj) in p.iter().enumerate() {
                    probs[(i, j)] = pj;
                }
            }
            let out = probs.dot(&v);
            merged
                .slice_mut(ndarray::s![.., h * hd..(h + 1) * hd])
                .assign(&out);
            cache.q.push(q);
            cache.k.push(k);
            cache.v.push(v);
            cache.probs.push(probs);
        }
        (self.out_proj.forward(&merged), cache)
    }

    pub fn backward(&self, cache: &AttentionCache, d_out: &Array2<f64>) -> Array2<f64> {
        let (len, width) = (d_out.nrows(), d_out.ncols());
        let hd = self.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let d_merged = self.out_proj.backward(d_out);
        let mut d_qkv = Array2::<f64>::zeros((len, 3 * width));
        for h in 0..self.heads {
            let d_head = d_merged.slice(ndarray::s![.., h * hd..(h + 1) * hd]);
            let (q, k, v, probs) = (&cache.q[h], &cache.k[h], &cache.v[h], &cache.probs[h]);
            let d_v = probs.t().dot(&d_head);
            let d_probs = d_head.dot(&v.t());
            // softmax backward row by row
            let mut d_scores = Array2::<f64>::zeros((len, len));
            for i in 0..len {
                let p = probs.row(i);
                let dp = d_probs.row(i);
                let inner: f64 = p.iter().zip(dp.iter()).map(|(a, b)| a * b).sum();
                for j in 0..len {
                    d_scores[(i, j)] = p[j] * (dp[j] - inner);
                }
            }
            let d_q = d_scores.dot(k) * scale;
            let d_k = d_scores.t().dot(q) * scale;
            d_qkv
                .slice_mut(ndarray::s![.., h * hd..(h + 1) * hd])
                .assign(&d_q);
            d_qkv
                .slice_mut(ndarray::s![.., width + h * hd..width + (h + 1) * hd])
                .assign(&d_k);
            d_qkv
                .slice_mut(ndarray::s![.., 2 * width + h * hd..2 * width + (h + 1) * hd])
                .assign(&d_v);
        }
        d_qkv.dot(&self.in_proj_weight)
    }
}

pub struct Mlp {
    pub c_fc: Linear,
    pub c_proj: Linear,
}

pub struct MlpCache {
    pre_act: Array2<f64>,
}

impl Mlp {
    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, MlpCache) {
        let pre_act = self.c_fc.forward(x);
        let activated = pre_act.mapv(quick_gelu);
        (self.c_proj.forward(&activated), MlpCache { pre_act })
    }

    pub fn backward(&self, cache: &MlpCache, d_out: &Array2<f64>) -> Array2<f64> {
        let d_act = self.c_proj.backward(d_out);
        let d_pre = &d_act * &cache.pre_act.mapv(quick_gelu_grad);
        self.c_fc.backward(&d_pre)
    }
}

/// Pre-norm residual block: x + attn(ln_1(x)), then + mlp(ln_2(...)).
pub struct Block {
    pub ln_1: LayerNorm,
    pub attn: Attention,
    pub ln_2: LayerNorm,
    pub mlp: Mlp,
}

pub struct BlockCache {
    ln_1: LayerNormCache,
    attn: AttentionCache,
    ln_2: LayerNormCache,
    mlp: MlpCache,
}

impl Block {
    pub fn forward(&self, x: &Array2<f64>, causal: bool) -> (Array2<f64>, BlockCache) {
        let (normed, ln_1) = self.ln_1.forward(x);
        let (attn_out, attn) = self.attn.forward(&normed, causal);
        let mid = x + &attn_out;
        let (normed2, ln_2) = self.ln_2.forward(&mid);
        let (mlp_out, mlp) = self.mlp.forward(&normed2);
        let y = &mid + &mlp_out;
        (
            y,
            BlockCache {
                ln_1,
                attn,
                ln_2,
                mlp,
            },
        )
    }

    pub fn backward(&self, cache: &BlockCache, d_out: &Array2<f64>) -> Array2<f64> {
        let d_mid = d_out + &self.ln_2.backward(&cache.ln_2, &self.mlp.backward(&cache.mlp, d_out));
        &d_mid + &self.ln_1.backward(&cache.ln_1, &self.attn.backward(&cache.attn, &d_mid))
    }
}

pub struct Tower {
    pub blocks: Vec<Block>,
}

pub struct TowerCache {
    blocks: Vec<BlockCache>,
}

impl Tower {
    pub fn forward(&self, x: &Array2<f64>, causal: bool) -> (Array2<f64>, TowerCache) {
        let mut h = x.clone();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (next, cache) = block.forward(&h, causal);
            h = next;
            caches.push(cache);
        }
        (h, TowerCache { blocks: caches })
    }

    pub fn backward(&self, cache: &TowerCache, d_out: &Array2<f64>) -> Array2<f64> {
        let mut grad = d_out.clone();
        for (block, bc) in self.blocks.iter().zip(cache.blocks.iter()).rev() {
            grad = block.backward(bc, &grad);
        }
        grad
    }

    /// Run all blocks except the last, returning the hidden state feeding it.
    pub fn forward_until_last(&self, x: &Array2<f64>, causal: bool) -> Array2<f64> {
        let mut h = x.clone();
        for block in &self.blocks[..self.blocks.len().saturating_sub(1)] {
            let (next, _) = block.forward(&h, causal);
            h = next;
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-scale..scale))
    }

    fn tiny_tower(rng: &mut ChaCha8Rng, width: usize, heads: usize, layers: usize) -> Tower {
        let blocks = (0..layers)
            .map(|_| Block {
                ln_1: LayerNorm {
                    gamma: Array1::from_shape_fn(width, |_| rng.gen_range(0.5..1.5)),
                    beta: Array1::from_shape_fn(width, |_| rng.gen_range(-0.1..0.1)),
                    eps: 1e-5,
                },
                attn: Attention {
                    heads,
                    in_proj_weight: rand_matrix(rng, 3 * width, width, 0.4),
                    in_proj_bias: Array1::from_shape_fn(3 * width, |_| rng.gen_range(-0.1..0.1)),
                    out_proj: Linear {
                        weight: rand_matrix(rng, width, width, 0.4),
                        bias: Some(Array1::from_shape_fn(width, |_| rng.gen_range(-0.1..0.1))),
                    },
                },
                ln_2: LayerNorm {
                    gamma: Array1::from_shape_fn(width, |_| rng.gen_range(0.5..1.5)),
                    beta: Array1::from_shape_fn(width, |_| rng.gen_range(-0.1..0.1)),
                    eps: 1e-5,
                },
                mlp: Mlp {
                    c_fc: Linear {
                        weight: rand_matrix(rng, 2 * width, width, 0.4),
                        bias: Some(Array1::from_shape_fn(2 * width, |_| rng.gen_range(-0.1..0.1))),
                    },
                    c_proj: Linear {
                        weight: rand_matrix(rng, width, 2 * width, 0.4),
                        bias: Some(Array1::from_shape_fn(width, |_| rng.gen_range(-0.1..0.1))),
                    },
                },
            })
            .collect();
        Tower { blocks }
    }

    /// Backward through the whole tower must match central finite differences
    /// on a scalar probe of the output.
    #[test]
    fn tower_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let (width, heads, layers, len) = (8, 2, 2, 5);
        let tower = tiny_tower(&mut rng, width, heads, layers);
        let x0 = rand_matrix(&mut rng, len, width, 0.5);
        let probe = rand_matrix(&mut rng, len, width, 0.5);

        for &causal in &[false, true] {
            let (y, cache) = tower.forward(&x0, causal);
            let _ = y;
            let analytic = tower.backward(&cache, &probe);

            let h = 1e-5;
            let mut checked = 0;
            for &(i, j) in &[(0, 0), (1, 3), (2, 7), (4, 2), (3, 5)] {
                let mut xp = x0.clone();
                xp[(i, j)] += h;
                let up: f64 = (&tower.forward(&xp, causal).0 * &probe).sum();
                let mut xm = x0.clone();
                xm[(i, j)] -= h;
                let down: f64 = (&tower.forward(&xm, causal).0 * &probe).sum();
                let fd = (up - down) / (2.0 * h);
                let rel = (analytic[(i, j)] - fd).abs() / fd.abs().max(1e-6);
                assert!(rel < 1e-5, "causal={causal} rel err {rel} at ({i},{j})");
                checked += 1;
            }
            assert_eq!(checked, 5);
        }
    }

    #[test]
    fn causal_mask_blocks_future_positions() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let tower = tiny_tower(&mut rng, 8, 2, 1, );
        let x = rand_matrix(&mut rng, 4, 8, 0.5);
        let (y1, _) = tower.forward(&x, true);
        // Changing the last row must not affect earlier positions.
        let mut x2 = x.clone();
        for j in 0..8 {
            x2[(3, j)] += 1.0;
        }
        let (y2, _) = tower.forward(&x2, true);
        for i in 0..3 {
            for j in 0..8 {
                assert!((y1[(i, j)] - y2[(i, j)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layernorm_output_is_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ln = LayerNorm {
            gamma: Array1::ones(6),
            beta: Array1::zeros(6),
            eps: 1e-12,
        };
        let x = rand_matrix(&mut rng, 3, 6, 2.0);
        let (y, _) = ln.forward(&x);
        for row in y.rows() {
            let mean = row.sum() / 6.0;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / 6.0;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }
}
