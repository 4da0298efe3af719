//! Plain vision transformer without a class token.
//!
//! The image is cut into non-overlapping `P x P` patches (row-major over the
//! patch grid), each flattened in `(row, col, channel)` order and projected
//! to `D` dimensions. An optional absolute embedding is added, then `L`
//! pre-norm blocks run, then a final LayerNorm gives the feature map `y`.
//! Logits are the mean-pooled features times the head matrix.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Session, Tensor, Var};
use crate::error::{Error, Result};
use crate::gaussian_bias::{self, GaussianBiasParams};
use crate::init;
use crate::rpe::{RpeKind, RpeProvider};

pub const LAYERNORM_EPS: f32 = 1e-6;
const INIT_STD: f32 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ViTConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub mlp_ratio: f32,
    pub num_classes: usize,
    pub rpe_kind: RpeKind,
    pub use_ape: bool,
    pub use_gab: bool,
    /// Hidden width of the RelPosMlp perceptron.
    pub rpe_mlp_hidden: usize,
}

impl Default for ViTConfig {
    fn default() -> Self {
        Self {
            image_height: 8,
            image_width: 8,
            channels: 1,
            patch_size: 4,
            embed_dim: 32,
            num_layers: 2,
            num_heads: 2,
            mlp_ratio: 2.0,
            num_classes: 4,
            rpe_kind: RpeKind::RelPosMlp,
            use_ape: true,
            use_gab: true,
            rpe_mlp_hidden: 128,
        }
    }
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_height", self.image_height),
            ("image_width", self.image_width),
            ("channels", self.channels),
            ("patch_size", self.patch_size),
            ("embed_dim", self.embed_dim),
            ("num_heads", self.num_heads),
            ("num_classes", self.num_classes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.image_height.is_multiple_of(self.patch_size) || !self.image_width.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "patch_size {} must divide image {}x{}",
                self.patch_size, self.image_height, self.image_width
            )));
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.mlp_ratio.is_nan() || self.mlp_ratio <= 0.0 || self.mlp_hidden() == 0 {
            return Err(Error::Config(format!("mlp_ratio {} gives an empty MLP", self.mlp_ratio)));
        }
        if self.rpe_kind == RpeKind::RelPosMlp && self.rpe_mlp_hidden == 0 {
            return Err(Error::Config("rpe_mlp_hidden must be positive".into()));
        }
        Ok(())
    }

    pub fn grid_h(&self) -> usize {
        self.image_height / self.patch_size
    }

    pub fn grid_w(&self) -> usize {
        self.image_width / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid_h() * self.grid_w()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.embed_dim as f32 * self.mlp_ratio).round() as usize
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.image_height, self.image_width, self.channels]
    }
}

/// Flat image indices for the `[N x P·P·C]` patch matrix.
pub fn patch_indices(config: &ViTConfig) -> Vec<usize> {
    let (p, c, w) = (config.patch_size, config.channels, config.image_width);
    let mut out = Vec::with_capacity(config.num_patches() * config.patch_dim());
    for gi in 0..config.grid_h() {
        for gj in 0..config.grid_w() {
            for py in 0..p {
                for px in 0..p {
                    let base = ((gi * p + py) * w + gj * p + px) * c;
                    out.extend(base..base + c);
                }
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
}

impl AttentionWeights {
    pub fn new(dim: usize, seed: u64, prefix: &str) -> Self {
        let w = |n: &str| init::normal(&[dim, dim], INIT_STD, seed, &format!("{prefix}.{n}"));
        Self {
            wq: w("wq"),
            bq: init::zeros(&[dim]),
            wk: w("wk"),
            bk: init::zeros(&[dim]),
            wv: w("wv"),
            bv: init::zeros(&[dim]),
            wo: w("wo"),
            bo: init::zeros(&[dim]),
        }
    }

    fn entries(&self) -> [(&'static str, &Tensor); 8] {
        [
            ("wq", &self.wq),
            ("bq", &self.bq),
            ("wk", &self.wk),
            ("bk", &self.bk),
            ("wv", &self.wv),
            ("bv", &self.bv),
            ("wo", &self.wo),
            ("bo", &self.bo),
        ]
    }

    fn entries_mut(&mut self) -> [(&'static str, &mut Tensor); 8] {
        [
            ("wq", &mut self.wq),
            ("bq", &mut self.bq),
            ("wk", &mut self.wk),
            ("bk", &mut self.bk),
            ("wv", &mut self.wv),
            ("bv", &mut self.bv),
            ("wo", &mut self.wo),
            ("bo", &mut self.bo),
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub attn: AttentionWeights,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub fc1: Tensor,
    pub fc1_bias: Tensor,
    pub fc2: Tensor,
    pub fc2_bias: Tensor,
}

impl Block {
    fn new(config: &ViTConfig, l: usize, seed: u64) -> Self {
        let (d, h) = (config.embed_dim, config.mlp_hidden());
        Self {
            ln1_gain: init::ones(&[d]),
            ln1_bias: init::zeros(&[d]),
            attn: AttentionWeights::new(d, seed, &format!("blocks.{l}.attn")),
            ln2_gain: init::ones(&[d]),
            ln2_bias: init::zeros(&[d]),
            fc1: init::normal(&[d, h], INIT_STD, seed, &format!("blocks.{l}.mlp.fc1")),
            fc1_bias: init::zeros(&[h]),
            fc2: init::normal(&[h, d], INIT_STD, seed, &format!("blocks.{l}.mlp.fc2")),
            fc2_bias: init::zeros(&[d]),
        }
    }

    fn named(&self, l: usize) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            (format!("blocks.{l}.ln1.gain"), &self.ln1_gain),
            (format!("blocks.{l}.ln1.bias"), &self.ln1_bias),
            (format!("blocks.{l}.ln2.gain"), &self.ln2_gain),
            (format!("blocks.{l}.ln2.bias"), &self.ln2_bias),
            (format!("blocks.{l}.mlp.fc1"), &self.fc1),
            (format!("blocks.{l}.mlp.fc1_bias"), &self.fc1_bias),
            (format!("blocks.{l}.mlp.fc2"), &self.fc2),
            (format!("blocks.{l}.mlp.fc2_bias"), &self.fc2_bias),
        ];
        out.extend(self.attn.entries().into_iter().map(|(n, t)| (format!("blocks.{l}.attn.{n}"), t)));
        out
    }

    fn named_mut(&mut self, l: usize) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![
            (format!("blocks.{l}.ln1.gain"), &mut self.ln1_gain),
            (format!("blocks.{l}.ln1.bias"), &mut self.ln1_bias),
            (format!("blocks.{l}.ln2.gain"), &mut self.ln2_gain),
            (format!("blocks.{l}.ln2.bias"), &mut self.ln2_bias),
            (format!("blocks.{l}.mlp.fc1"), &mut self.fc1),
            (format!("blocks.{l}.mlp.fc1_bias"), &mut self.fc1_bias),
            (format!("blocks.{l}.mlp.fc2"), &mut self.fc2),
            (format!("blocks.{l}.mlp.fc2_bias"), &mut self.fc2_bias),
        ];
        out.extend(self.attn.entries_mut().into_iter().map(|(n, t)| (format!("blocks.{l}.attn.{n}"), t)));
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViTModel {
    config: ViTConfig,
    pub patch_projection: Tensor,
    pub ape: Option<Tensor>,
    pub blocks: Vec<Block>,
    pub rpe: Option<RpeProvider>,
    pub gab: Option<GaussianBiasParams>,
    pub final_ln_gain: Tensor,
    pub final_ln_bias: Tensor,
    pub head: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    /// `[N x D]` post-LayerNorm feature map.
    pub features: Var,
    /// `[num_classes]`.
    pub logits: Var,
}

impl ViTModel {
    pub fn new(config: ViTConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (d, n) = (config.embed_dim, config.num_patches());
        let (gh, gw) = (config.grid_h(), config.grid_w());
        Ok(Self {
            patch_projection: init::normal(&[config.patch_dim(), d], INIT_STD, seed, "patch_projection"),
            ape: config.use_ape.then(|| init::normal(&[n, d], INIT_STD, seed, "ape")),
            blocks: (0..config.num_layers).map(|l| Block::new(&config, l, seed)).collect(),
            rpe: RpeProvider::new(
                config.rpe_kind,
                gh,
                gw,
                config.num_layers,
                config.num_heads,
                config.rpe_mlp_hidden,
                seed,
            )?,
            gab: config.use_gab.then(|| GaussianBiasParams::new(config.num_layers, gh, gw)),
            // a uniform gain makes the channel mean of every feature row constant
            final_ln_gain: init::near_one(&[d], INIT_STD, seed, "final_ln.gain"),
            final_ln_bias: init::zeros(&[d]),
            head: init::normal(&[d, config.num_classes], INIT_STD, seed, "head"),
            config,
        })
    }

    pub fn config(&self) -> &ViTConfig {
        &self.config
    }

    /// Every parameter with its checkpoint name.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("patch_projection".to_string(), &self.patch_projection)];
        if let Some(ape) = &self.ape {
            out.push(("ape".into(), ape));
        }
        for (l, b) in self.blocks.iter().enumerate() {
            out.extend(b.named(l));
        }
        if let Some(rpe) = &self.rpe {
            out.extend(rpe.named_params());
        }
        if let Some(gab) = &self.gab {
            out.extend(gab.named_params());
        }
        out.push(("final_ln.gain".into(), &self.final_ln_gain));
        out.push(("final_ln.bias".into(), &self.final_ln_bias));
        out.push(("head".into(), &self.head));
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![("patch_projection".to_string(), &mut self.patch_projection)];
        if let Some(ape) = &mut self.ape {
            out.push(("ape".into(), ape));
        }
        for (l, b) in self.blocks.iter_mut().enumerate() {
            out.extend(b.named_mut(l));
        }
        if let Some(rpe) = &mut self.rpe {
            out.extend(rpe.named_params_mut());
        }
        if let Some(gab) = &mut self.gab {
            out.extend(gab.named_params_mut());
        }
        out.push(("final_ln.gain".into(), &mut self.final_ln_gain));
        out.push(("final_ln.bias".into(), &mut self.final_ln_bias));
        out.push(("head".into(), &mut self.head));
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    /// Registers `image` on the session after checking its shape. Set
    /// `requires_grad` on the tensor to obtain input gradients.
    pub fn image_var(&self, s: &mut Session, image: &Tensor) -> Result<Var> {
        if image.shape() != self.config.image_shape() {
            return Err(Error::Shape(format!(
                "image is {:?}, model expects {:?}",
                image.shape(),
                self.config.image_shape()
            )));
        }
        Ok(s.tape.leaf(image))
    }

    pub fn patch_embed(&self, s: &mut Session, image: Var) -> Result<Var> {
        let cfg = &self.config;
        if s.tape.shape(image) != cfg.image_shape() {
            return Err(Error::Shape(format!(
                "image is {:?}, model expects {:?}",
                s.tape.shape(image),
                cfg.image_shape()
            )));
        }
        let patches = s.tape.gather(image, patch_indices(cfg), &[cfg.num_patches(), cfg.patch_dim()])?;
        let proj = s.param(&self.patch_projection);
        let z = s.tape.matmul(patches, proj)?;
        match &self.ape {
            Some(ape) => {
                let ape = s.param(ape);
                s.tape.add(z, ape)
            }
            None => Ok(z),
        }
    }

    /// Per-head relative bias and head-shared Gaussian bias of a layer.
    pub fn layer_biases(&self, s: &mut Session, layer: usize) -> Result<(Option<Var>, Option<Var>)> {
        let (gh, gw) = (self.config.grid_h(), self.config.grid_w());
        let rel = match &self.rpe {
            Some(rpe) => Some(rpe.materialize(s, layer)?),
            None => None,
        };
        let gauss = match &self.gab {
            Some(gab) if s.tape.grad_enabled() => Some(gaussian_bias::gab_bias(s, gab, layer, gh, gw)?),
            Some(gab) => {
                let (a, sigma) = gab.get(layer);
                let n = self.config.num_patches();
                let cached = gaussian_bias::gab_bias_cached(a, sigma, gh, gw)?;
                Some(s.tape.constant(&[n, n], cached.to_vec())?)
            }
            None => None,
        };
        Ok((rel, gauss))
    }

    /// `z + Attention(LN(z))` for block `layer`, including any enabled biases.
    pub fn attention_layer(&self, s: &mut Session, z: Var, layer: usize) -> Result<Var> {
        let block = self.block(layer)?;
        let (rel, gauss) = self.layer_biases(s, layer)?;
        let g = s.param(&block.ln1_gain);
        let b = s.param(&block.ln1_bias);
        let x = s.tape.layernorm(z, g, b, LAYERNORM_EPS)?;
        let a = multi_head_attention(s, x, &block.attn, self.config.num_heads, rel, gauss)?;
        s.tape.add(z, a)
    }

    /// `z + MLP(LN(z))` for block `layer`.
    pub fn mlp_layer(&self, s: &mut Session, z: Var, layer: usize) -> Result<Var> {
        let block = self.block(layer)?;
        let g = s.param(&block.ln2_gain);
        let b = s.param(&block.ln2_bias);
        let x = s.tape.layernorm(z, g, b, LAYERNORM_EPS)?;
        let h = linear(s, x, &block.fc1, &block.fc1_bias)?;
        let h = s.tape.gelu(h);
        let out = linear(s, h, &block.fc2, &block.fc2_bias)?;
        s.tape.add(z, out)
    }

    fn block(&self, layer: usize) -> Result<&Block> {
        self.blocks
            .get(layer)
            .ok_or_else(|| Error::Invalid(format!("layer {layer} out of range (model has {})", self.blocks.len())))
    }

    pub fn forward(&self, s: &mut Session, image: Var) -> Result<ForwardOutput> {
        let mut z = self.patch_embed(s, image)?;
        for l in 0..self.blocks.len() {
            z = self.attention_layer(s, z, l)?;
            z = self.mlp_layer(s, z, l)?;
        }
        let g = s.param(&self.final_ln_gain);
        let b = s.param(&self.final_ln_bias);
        let features = s.tape.layernorm(z, g, b, LAYERNORM_EPS)?;
        let pooled = s.tape.mean_over_dim(features, 0)?;
        let pooled = s.tape.reshape(pooled, &[1, self.config.embed_dim])?;
        let head = s.param(&self.head);
        let logits = s.tape.matmul(pooled, head)?;
        let logits = s.tape.reshape(logits, &[self.config.num_classes])?;
        Ok(ForwardOutput { features, logits })
    }

    /// Evaluation without gradients. Returns `(features, logits)`.
    pub fn infer(&self, image: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut s = Session::inference();
        let x = self.image_var(&mut s, image)?;
        let out = self.forward(&mut s, x)?;
        Ok((s.tape.to_tensor(out.features), s.tape.to_tensor(out.logits)))
    }

    pub fn predict(&self, image: &Tensor) -> Result<usize> {
        let (_, logits) = self.infer(image)?;
        Ok(argmax(logits.data()))
    }
}

pub(crate) fn argmax(values: &[f32]) -> usize {
    values.iter().enumerate().fold(0, |best, (i, v)| if *v > values[best] { i } else { best })
}

/// `x · w + b` with the bias tiled over rows.
pub fn linear(s: &mut Session, x: Var, w: &Tensor, b: &Tensor) -> Result<Var> {
    let rows = s.tape.shape(x)[0];
    let w = s.param(w);
    let b = s.param(b);
    let y = s.tape.matmul(x, w)?;
    let b = s.tape.tile_rows(b, rows)?;
    s.tape.add(y, b)
}

/// Multi-head self-attention on `[N x D]` input.
///
/// Logits are `Q_h K_hᵀ / √D` with `D` the full embedding width, plus
/// `head_bias[h]` (`[heads x N x N]`) and `shared_bias` (`[N x N]`, the same
/// for every head) when given. Head outputs are projected by the matching
/// row block of `wo` and summed, which equals concatenation followed by the
/// output projection.
pub fn multi_head_attention(
    s: &mut Session,
    x: Var,
    w: &AttentionWeights,
    num_heads: usize,
    head_bias: Option<Var>,
    shared_bias: Option<Var>,
) -> Result<Var> {
    let [n, d] = *s.tape.shape(x) else {
        return Err(Error::Shape(format!("attention input must be [N x D], got {:?}", s.tape.shape(x))));
    };
    if num_heads == 0 || d % num_heads != 0 {
        return Err(Error::Shape(format!("{d} dims cannot be split into {num_heads} heads")));
    }
    if let Some(b) = head_bias {
        if s.tape.shape(b) != [num_heads, n, n] {
            return Err(Error::Shape(format!(
                "relative bias is {:?}, expected [{num_heads}, {n}, {n}]",
                s.tape.shape(b)
            )));
        }
    }
    if let Some(b) = shared_bias {
        if s.tape.shape(b) != [n, n] {
            return Err(Error::Shape(format!("shared bias is {:?}, expected [{n}, {n}]", s.tape.shape(b))));
        }
    }
    let dh = d / num_heads;
    let q = linear(s, x, &w.wq, &w.bq)?;
    let k = linear(s, x, &w.wk, &w.bk)?;
    let v = linear(s, x, &w.wv, &w.bv)?;
    let wo = s.param(&w.wo);
    let scale = 1.0 / (d as f32).sqrt();
    let mut out: Option<Var> = None;
    for h in 0..num_heads {
        let cols: Vec<usize> = (0..n).flat_map(|r| (r * d + h * dh)..(r * d + (h + 1) * dh)).collect();
        let qh = s.tape.gather(q, cols.clone(), &[n, dh])?;
        let kh = s.tape.gather(k, cols.clone(), &[n, dh])?;
        let vh = s.tape.gather(v, cols, &[n, dh])?;
        let kt = s.tape.transpose_last_two(kh)?;
        let logits = s.tape.matmul(qh, kt)?;
        let mut logits = s.tape.mul_scalar(logits, scale);
        if let Some(b) = head_bias {
            let bh = s.tape.gather(b, (h * n * n..(h + 1) * n * n).collect(), &[n, n])?;
            logits = s.tape.add(logits, bh)?;
        }
        if let Some(b) = shared_bias {
            logits = s.tape.add(logits, b)?;
        }
        let attn = s.tape.softmax(logits)?;
        let ctx = s.tape.matmul(attn, vh)?;
        let wo_h = s.tape.gather(wo, (h * dh * d..(h + 1) * dh * d).collect(), &[dh, d])?;
        let proj = s.tape.matmul(ctx, wo_h)?;
        out = Some(match out {
            Some(acc) => s.tape.add(acc, proj)?,
            None => proj,
        });
    }
    let out = out.expect("at least one head");
    let bo = s.param(&w.bo);
    let bo = s.tape.tile_rows(bo, n)?;
    s.tape.add(out, bo)
}
