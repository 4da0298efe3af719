//! Independent f64 reference implementation of the transformer forward pass.
#![allow(dead_code)]

use std::collections::HashMap;

use gablab_core::gaussian_bias::VARIANCE_EPS;
use gablab_core::vit::{ViTConfig, ViTModel};

pub struct Reference {
    pub cfg: ViTConfig,
    params: HashMap<String, Vec<f64>>,
    rel_bias: Vec<Option<Vec<f64>>>,
}

pub fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = (0..k).map(|t| a[i * k + t] * b[t * n + j]).sum();
        }
    }
    out
}

pub fn softmax_rows(x: &mut [f64], width: usize) {
    for row in x.chunks_mut(width) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = row.iter().map(|v| (v - max).exp()).sum();
        row.iter_mut().for_each(|v| *v = (*v - max).exp() / total);
    }
}

pub fn layernorm(x: &[f64], gain: &[f64], bias: &[f64], eps: f64) -> Vec<f64> {
    let d = gain.len();
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        out.extend(row.iter().enumerate().map(|(i, v)| (v - mean) * inv * gain[i] + bias[i]));
    }
    out
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// Head-shared Gaussian bias written directly from query/key offsets.
pub fn gaussian_bias(a: f64, sigma: f64, gh: usize, gw: usize) -> Vec<f64> {
    let n = gh * gw;
    let mut out = vec![0.0; n * n];
    for q in 0..n {
        for k in 0..n {
            let dr = (k / gw) as f64 - (q / gw) as f64;
            let dc = (k % gw) as f64 - (q % gw) as f64;
            out[q * n + k] = a * a * (-0.5 * (dr * dr + dc * dc) / (sigma * sigma + VARIANCE_EPS as f64)).exp();
        }
    }
    out
}

/// Patches by explicit block enumeration: patch `(gi, gj)` holds pixels
/// `(gi·P + py, gj·P + px, c)` in `(py, px, c)` order.
pub fn patches(cfg: &ViTConfig, image: &[f64]) -> Vec<f64> {
    let (p, w, c) = (cfg.patch_size, cfg.image_width, cfg.channels);
    let mut out = Vec::new();
    for gi in 0..cfg.image_height / p {
        for gj in 0..w / p {
            for py in 0..p {
                for px in 0..p {
                    for ch in 0..c {
                        out.push(image[((gi * p + py) * w + gj * p + px) * c + ch]);
                    }
                }
            }
        }
    }
    out
}

pub struct AttnParams<'a> {
    pub wq: &'a [f64],
    pub bq: &'a [f64],
    pub wk: &'a [f64],
    pub bk: &'a [f64],
    pub wv: &'a [f64],
    pub bv: &'a [f64],
    pub wo: &'a [f64],
    pub bo: &'a [f64],
}

fn affine(x: &[f64], w: &[f64], b: &[f64], n: usize, din: usize, dout: usize) -> Vec<f64> {
    let mut y = matmul(x, w, n, din, dout);
    for row in y.chunks_mut(dout) {
        row.iter_mut().zip(b).for_each(|(v, bb)| *v += bb);
    }
    y
}

/// Concatenate-then-project multi-head attention with logits scaled by the
/// full width `d`. `head_bias` is `[heads x N x N]`, `shared` is `[N x N]`.
pub fn attention(
    x: &[f64],
    p: &AttnParams,
    n: usize,
    d: usize,
    heads: usize,
    head_bias: Option<&[f64]>,
    shared: Option<&[f64]>,
) -> Vec<f64> {
    let dh = d / heads;
    let q = affine(x, p.wq, p.bq, n, d, d);
    let k = affine(x, p.wk, p.bk, n, d, d);
    let v = affine(x, p.wv, p.bv, n, d, d);
    let mut concat = vec![0.0; n * d];
    for h in 0..heads {
        let mut logits = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let dot: f64 = (0..dh).map(|t| q[i * d + h * dh + t] * k[j * d + h * dh + t]).sum();
                let mut l = dot / (d as f64).sqrt();
                if let Some(b) = head_bias {
                    l += b[h * n * n + i * n + j];
                }
                if let Some(b) = shared {
                    l += b[i * n + j];
                }
                logits[i * n + j] = l;
            }
        }
        softmax_rows(&mut logits, n);
        for i in 0..n {
            for t in 0..dh {
                concat[i * d + h * dh + t] = (0..n).map(|j| logits[i * n + j] * v[j * d + h * dh + t]).sum();
            }
        }
    }
    affine(&concat, p.wo, p.bo, n, d, d)
}

impl Reference {
    pub fn new(model: &ViTModel) -> Self {
        let params = model.named_params().into_iter().map(|(n, t)| (n, to_f64(t.data()))).collect();
        let rel_bias = (0..model.config().num_layers)
            .map(|l| model.rpe.as_ref().map(|r| to_f64(r.materialize_tensor(l).unwrap().data())))
            .collect();
        Self { cfg: model.config().clone(), params, rel_bias }
    }

    fn p(&self, name: &str) -> &[f64] {
        &self.params[name]
    }

    /// `(features [N x D], logits)`.
    pub fn forward(&self, image: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let cfg = &self.cfg;
        let (n, d) = (cfg.num_patches(), cfg.embed_dim);
        let (gh, gw) = (cfg.grid_h(), cfg.grid_w());
        let eps = gablab_core::vit::LAYERNORM_EPS as f64;
        let mut z = matmul(&patches(cfg, image), self.p("patch_projection"), n, cfg.patch_dim(), d);
        if cfg.use_ape {
            z.iter_mut().zip(self.p("ape")).for_each(|(a, b)| *a += b);
        }
        for l in 0..cfg.num_layers {
            let pre = |s: &str| format!("blocks.{l}.{s}");
            let x = layernorm(&z, self.p(&pre("ln1.gain")), self.p(&pre("ln1.bias")), eps);
            let attn = AttnParams {
                wq: self.p(&pre("attn.wq")),
                bq: self.p(&pre("attn.bq")),
                wk: self.p(&pre("attn.wk")),
                bk: self.p(&pre("attn.bk")),
                wv: self.p(&pre("attn.wv")),
                bv: self.p(&pre("attn.bv")),
                wo: self.p(&pre("attn.wo")),
                bo: self.p(&pre("attn.bo")),
            };
            let gauss = cfg.use_gab.then(|| {
                gaussian_bias(self.p(&format!("gab.{l}.amplitude"))[0], self.p(&format!("gab.{l}.sigma"))[0], gh, gw)
            });
            let a = attention(&x, &attn, n, d, cfg.num_heads, self.rel_bias[l].as_deref(), gauss.as_deref());
            z.iter_mut().zip(&a).for_each(|(zz, aa)| *zz += aa);
            let x = layernorm(&z, self.p(&pre("ln2.gain")), self.p(&pre("ln2.bias")), eps);
            let hdim = cfg.mlp_hidden();
            let h: Vec<f64> = affine(&x, self.p(&pre("mlp.fc1")), self.p(&pre("mlp.fc1_bias")), n, d, hdim)
                .into_iter()
                .map(gelu)
                .collect();
            let out = affine(&h, self.p(&pre("mlp.fc2")), self.p(&pre("mlp.fc2_bias")), n, hdim, d);
            z.iter_mut().zip(&out).for_each(|(zz, oo)| *zz += oo);
        }
        let y = layernorm(&z, self.p("final_ln.gain"), self.p("final_ln.bias"), eps);
        let pooled: Vec<f64> = (0..d).map(|j| (0..n).map(|i| y[i * d + j]).sum::<f64>() / n as f64).collect();
        let logits = matmul(&pooled, self.p("head"), 1, d, cfg.num_classes);
        (y, logits)
    }
}

pub fn max_abs_diff(a: &[f32], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (*x as f64 - y).abs()).fold(0.0, f64::max)
}

pub fn max_abs_diff32(a: &[f32], b: &[f32]) -> f32 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}
