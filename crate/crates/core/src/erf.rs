//! Effective receptive field of the central patch feature.
//!
//! For one image: `Y` is the mean over `D` of row `n` of the final feature
//! map, `G` is `∂Y/∂x` averaged over channels, and the per-image map is
//! `ReLU(G)`. A dataset map is the mean of the per-image maps.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{Session, Tensor};
use crate::error::{Error, Result};
use crate::vit::{ViTConfig, ViTModel};

pub const DEFAULT_SAMPLE_COUNT: usize = 64;
const CHUNK: usize = 256;

/// Row-major index of cell `(⌊gh/2⌋, ⌊gw/2⌋)`.
pub fn central_patch_index(grid_h: usize, grid_w: usize) -> usize {
    (grid_h / 2) * grid_w + grid_w / 2
}

#[derive(Clone, Debug, PartialEq)]
pub struct ErfMap {
    pub height: usize,
    pub width: usize,
    /// `height x width`, row-major, non-negative.
    pub values: Vec<f32>,
    pub target_patch: usize,
    pub sample_count: usize,
    pub config: ViTConfig,
}

impl ErfMap {
    pub fn at(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.width + col]
    }
}

/// `∂Y/∂x` as an `[H x W x C]` tensor, where `Y` is the channel-mean of the
/// target patch's final feature.
pub fn input_gradient(model: &ViTModel, image: &Tensor, target: usize) -> Result<Tensor> {
    let cfg = model.config();
    let n = cfg.num_patches();
    if target >= n {
        return Err(Error::Invalid(format!("target patch {target} out of range 0..{n}")));
    }
    let mut s = Session::new();
    let input = image.clone().with_grad();
    let x = model.image_var(&mut s, &input)?;
    let out = model.forward(&mut s, x)?;
    let y = target_feature(&mut s, out.features, target, cfg.embed_dim)?;
    let grads = s.tape.backward(y)?;
    let g = grads.get(x).map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; image.len()]);
    Tensor::new(image.shape(), g)
}

/// Scalar `Y = (1/D) Σ_d y[target, d]`.
pub fn target_feature(
    s: &mut Session,
    features: crate::autodiff::Var,
    target: usize,
    dim: usize,
) -> Result<crate::autodiff::Var> {
    let row = s.tape.gather(features, (target * dim..(target + 1) * dim).collect(), &[dim])?;
    let total = s.tape.sum(row);
    Ok(s.tape.mul_scalar(total, 1.0 / dim as f32))
}

/// Channel-averaged input gradient `G`, `[H x W]`, before rectification.
pub fn channel_mean_gradient(model: &ViTModel, image: &Tensor, target: usize) -> Result<Tensor> {
    let [h, w, c] = model.config().image_shape();
    let grad = input_gradient(model, image, target)?;
    let mut out = vec![0.0f32; h * w];
    for (o, px) in out.iter_mut().zip(grad.data().chunks(c)) {
        *o = px.iter().sum::<f32>() / c as f32;
    }
    Tensor::new(&[h, w], out)
}

/// `ReLU(G)` for a single image.
pub fn erf_single(model: &ViTModel, image: &Tensor, target: usize) -> Result<Tensor> {
    let mut g = channel_mean_gradient(model, image, target)?;
    g.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    Ok(g)
}

/// Mean of [`erf_single`] over `images`. Per-image work runs in parallel;
/// the reduction runs in `f64` in submission order.
pub fn erf_dataset<I>(model: &ViTModel, images: I, target: usize) -> Result<ErfMap>
where
    I: IntoIterator<Item = Tensor>,
{
    let cfg = model.config();
    let (h, w) = (cfg.image_height, cfg.image_width);
    let mut acc = vec![0.0f64; h * w];
    let mut count = 0usize;
    let mut iter = images.into_iter().peekable();
    while iter.peek().is_some() {
        let chunk: Vec<Tensor> = iter.by_ref().take(CHUNK).collect();
        let maps: Vec<Tensor> = chunk.par_iter().map(|img| erf_single(model, img, target)).collect::<Result<_>>()?;
        for m in &maps {
            acc.iter_mut().zip(m.data()).for_each(|(a, &v)| *a += v as f64);
        }
        count += maps.len();
    }
    if count == 0 {
        return Err(Error::Invalid("ERF needs at least one image".into()));
    }
    Ok(ErfMap {
        height: h,
        width: w,
        values: acc.iter().map(|&v| (v / count as f64) as f32).collect(),
        target_patch: target,
        sample_count: count,
        config: cfg.clone(),
    })
}

/// `count` images of uniform `[0, 1)` noise; image `i` depends only on
/// `(seed, i)`.
pub fn noise_images(seed: u64, count: usize, shape: [usize; 3]) -> impl Iterator<Item = Tensor> {
    (0..count).map(move |i| noise_image(seed, i as u64, shape))
}

pub fn noise_image(seed: u64, index: u64, shape: [usize; 3]) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random::<f32>()).collect();
    Tensor::new(&shape, data).expect("valid image shape")
}

/// Mean ERF per pixel over three patch classes around the target.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalityReport {
    pub self_mass: f64,
    /// Patches sharing an edge with the target.
    pub adjacent_mass: f64,
    /// Patches at Chebyshev grid distance two or more.
    pub far_mass: f64,
    /// `adjacent_mass / far_mass`; `None` when `far_mass` is zero.
    pub adjacency_ratio: Option<f64>,
}

pub fn locality_report(erf: &ErfMap) -> Result<LocalityReport> {
    let p = erf.config.patch_size;
    let (gh, gw) = (erf.height / p, erf.width / p);
    let (tr, tc) = ((erf.target_patch / gw) as isize, (erf.target_patch % gw) as isize);
    let mut sums = [0.0f64; 3];
    let mut counts = [0usize; 3];
    for r in 0..gh {
        for c in 0..gw {
            let (dr, dc) = ((r as isize - tr).abs(), (c as isize - tc).abs());
            let class = match (dr, dc) {
                (0, 0) => 0,
                (1, 0) | (0, 1) => 1,
                _ if dr.max(dc) >= 2 => 2,
                _ => continue,
            };
            for py in 0..p {
                for px in 0..p {
                    sums[class] += erf.at(r * p + py, c * p + px) as f64;
                }
            }
            counts[class] += p * p;
        }
    }
    if counts[2] == 0 {
        return Err(Error::Invalid(format!(
            "a {gh}x{gw} patch grid has no patch at Chebyshev distance >= 2 from patch {}",
            erf.target_patch
        )));
    }
    let mean = |i: usize| if counts[i] == 0 { 0.0 } else { sums[i] / counts[i] as f64 };
    let (self_mass, adjacent_mass, far_mass) = (mean(0), mean(1), mean(2));
    Ok(LocalityReport {
        self_mass,
        adjacent_mass,
        far_mass,
        adjacency_ratio: (far_mass > 0.0).then(|| adjacent_mass / far_mass),
    })
}

/// Which positional component a re-initialization experiment redraws.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Component {
    Ape,
    Rpe,
    Gab,
}

impl std::str::FromStr for Component {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ape" => Ok(Self::Ape),
            "rpe" => Ok(Self::Rpe),
            "gab" => Ok(Self::Gab),
            other => Err(Error::Invalid(format!("unknown component {other:?} (expected ape, rpe, gab)"))),
        }
    }
}

/// Copy of `model` with `component` redrawn from its initialization
/// distribution under `seed`.
pub fn reinitialized(model: &ViTModel, component: Component, seed: u64) -> Result<ViTModel> {
    let cfg = model.config().clone();
    let mut out = model.clone();
    match component {
        Component::Ape => {
            let ape =
                out.ape.as_mut().ok_or_else(|| Error::Invalid("model has no absolute position embedding".into()))?;
            let fresh = ViTModel::new(ViTConfig { use_ape: true, ..cfg }, seed)?;
            *ape = fresh.ape.expect("ape enabled");
        }
        Component::Rpe => {
            let rpe = out.rpe.as_mut().ok_or_else(|| Error::Invalid("model has no relative position bias".into()))?;
            *rpe = rpe.reinitialize(seed);
        }
        Component::Gab => {
            let gab = out.gab.as_mut().ok_or_else(|| Error::Invalid("model has no Gaussian attention bias".into()))?;
            *gab = gab.reinitialize(seed, cfg.grid_h(), cfg.grid_w());
        }
    }
    Ok(out)
}

/// ERF before and after redrawing `component`, on the same images. The
/// input model is left untouched.
pub fn reinit_experiment(
    model: &ViTModel,
    component: Component,
    seed: u64,
    images: &[Tensor],
    target: usize,
) -> Result<(ErfMap, ErfMap)> {
    let changed = reinitialized(model, component, seed)?;
    let before = erf_dataset(model, images.iter().cloned(), target)?;
    let after = erf_dataset(&changed, images.iter().cloned(), target)?;
    Ok((before, after))
}
