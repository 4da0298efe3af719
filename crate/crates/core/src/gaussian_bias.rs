//! Gaussian attention bias.
//!
//! Each layer owns two scalars, an amplitude parameter `A` and a width `σ`.
//! They define one 2D Gaussian table of size `(2·gh − 1) x (2·gw − 1)` with
//! peak `A²` at its center cell. Every query patch takes the `gh x gw`
//! window of that table whose local center position equals the patch's own
//! grid cell, so row `n` of the stacked `N x N` bias is the Gaussian of the
//! key offset from patch `n`. The bias is shared by all heads of a layer.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use rand::SeedableRng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Session, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::init;

/// Added to `σ²` so the table stays finite when `σ` reaches zero.
pub const VARIANCE_EPS: f32 = 1e-6;

/// Standard deviation of the amplitude draw used by re-initialization.
pub const REINIT_AMPLITUDE_STD: f32 = 0.02;

/// Per-layer learnable `(A, σ)`, each stored as a one-element tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianBiasParams {
    pub amplitude: Vec<Tensor>,
    pub sigma: Vec<Tensor>,
}

impl GaussianBiasParams {
    /// `A = 1` and `σ = max(gh, gw) / 4` for every layer.
    pub fn new(num_layers: usize, grid_h: usize, grid_w: usize) -> Self {
        let sigma = default_sigma(grid_h, grid_w);
        Self {
            amplitude: (0..num_layers).map(|_| init::ones(&[1])).collect(),
            sigma: (0..num_layers).map(|_| Tensor::full(&[1], sigma).with_grad()).collect(),
        }
    }

    pub fn num_layers(&self) -> usize {
        self.amplitude.len()
    }

    pub fn get(&self, layer: usize) -> (f32, f32) {
        (self.amplitude[layer].data()[0], self.sigma[layer].data()[0])
    }

    pub fn set(&mut self, layer: usize, amplitude: f32, sigma: f32) {
        self.amplitude[layer].data_mut()[0] = amplitude;
        self.sigma[layer].data_mut()[0] = sigma;
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::with_capacity(2 * self.num_layers());
        for (l, (a, s)) in self.amplitude.iter().zip(&self.sigma).enumerate() {
            out.push((format!("gab.{l}.amplitude"), a));
            out.push((format!("gab.{l}.sigma"), s));
        }
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::with_capacity(2 * self.amplitude.len());
        for (l, (a, s)) in self.amplitude.iter_mut().zip(self.sigma.iter_mut()).enumerate() {
            out.push((format!("gab.{l}.amplitude"), a));
            out.push((format!("gab.{l}.sigma"), s));
        }
        out
    }

    /// Redraws every amplitude from `N(0, 0.02²)` and resets `σ` to its
    /// default, leaving the layers with an almost inactive bias.
    pub fn reinitialize(&self, seed: u64, grid_h: usize, grid_w: usize) -> Self {
        let mut out = Self::new(self.num_layers(), grid_h, grid_w);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0f32, REINIT_AMPLITUDE_STD).expect("positive std");
        for a in &mut out.amplitude {
            a.data_mut()[0] = dist.sample(&mut rng);
        }
        out
    }
}

pub fn default_sigma(grid_h: usize, grid_w: usize) -> f32 {
    grid_h.max(grid_w) as f32 / 4.0
}

/// Evaluated table with 1-based coordinates `x ∈ 1..=2·gw−1`,
/// `y ∈ 1..=2·gh−1`, centered at `(gw, gh)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianTable {
    pub rows: usize,
    pub cols: usize,
    pub center_x: usize,
    pub center_y: usize,
    pub values: Vec<f32>,
}

impl GaussianTable {
    pub fn evaluate(amplitude: f32, sigma: f32, grid_h: usize, grid_w: usize) -> Result<Self> {
        let mut tape = Tape::inference();
        let a = tape.constant(&[1], vec![amplitude])?;
        let s = tape.constant(&[1], vec![sigma])?;
        let t = gaussian_table(&mut tape, a, s, grid_h, grid_w)?;
        Ok(Self {
            rows: 2 * grid_h - 1,
            cols: 2 * grid_w - 1,
            center_x: grid_w,
            center_y: grid_h,
            values: tape.value(t).to_vec(),
        })
    }

    /// Value at 1-based `(x, y)`.
    pub fn at(&self, x: usize, y: usize) -> f32 {
        self.values[(y - 1) * self.cols + (x - 1)]
    }
}

fn check_grid(grid_h: usize, grid_w: usize) -> Result<()> {
    if grid_h == 0 || grid_w == 0 {
        return Err(Error::Invalid(format!("grid must be at least 1x1, got {grid_h}x{grid_w}")));
    }
    Ok(())
}

/// Squared distance of every table cell from the center.
fn squared_distances(grid_h: usize, grid_w: usize) -> Vec<f32> {
    let (rows, cols) = (2 * grid_h - 1, 2 * grid_w - 1);
    let (xc, yc) = (grid_w as f32, grid_h as f32);
    (1..=rows).flat_map(|y| (1..=cols).map(move |x| (x as f32 - xc).powi(2) + (y as f32 - yc).powi(2))).collect()
}

/// `A² · exp(−d² / (2(σ² + ε)))` over the full table, differentiable in
/// `amplitude` and `sigma` (both one-element vars).
pub fn gaussian_table(tape: &mut Tape, amplitude: Var, sigma: Var, grid_h: usize, grid_w: usize) -> Result<Var> {
    check_grid(grid_h, grid_w)?;
    let d2 = tape.constant(&[2 * grid_h - 1, 2 * grid_w - 1], squared_distances(grid_h, grid_w))?;
    let peak = tape.mul(amplitude, amplitude)?;
    let var = tape.mul(sigma, sigma)?;
    let var = tape.add_scalar(var, VARIANCE_EPS);
    let scaled = tape.mul_scalar(d2, -0.5);
    let exponent = tape.div(scaled, var)?;
    let e = tape.exp(exponent);
    tape.mul(peak, e)
}

/// Flat table index feeding each `[query n][key m]` bias entry.
pub fn slice_indices(grid_h: usize, grid_w: usize) -> Vec<usize> {
    let n = grid_h * grid_w;
    let cols = 2 * grid_w - 1;
    let mut out = Vec::with_capacity(n * n);
    for q in 0..n {
        let (i, j) = (q / grid_w, q % grid_w);
        for k in 0..n {
            let (r, c) = (k / grid_w, k % grid_w);
            out.push((grid_h - 1 - i + r) * cols + (grid_w - 1 - j + c));
        }
    }
    out
}

/// Cuts one window per query patch out of the table and stacks the
/// flattened windows as rows of an `N x N` bias.
pub fn slice_and_stack(tape: &mut Tape, table: Var, grid_h: usize, grid_w: usize) -> Result<Var> {
    check_grid(grid_h, grid_w)?;
    let expected = [2 * grid_h - 1, 2 * grid_w - 1];
    if tape.shape(table) != expected {
        return Err(Error::Shape(format!(
            "table is {:?}, a {grid_h}x{grid_w} grid needs {expected:?}",
            tape.shape(table)
        )));
    }
    let n = grid_h * grid_w;
    tape.gather(table, slice_indices(grid_h, grid_w), &[n, n])
}

/// Layer `layer`'s `N x N` bias built from its own `(A, σ)`.
pub fn gab_bias(
    s: &mut Session,
    params: &GaussianBiasParams,
    layer: usize,
    grid_h: usize,
    grid_w: usize,
) -> Result<Var> {
    if layer >= params.num_layers() {
        return Err(Error::Invalid(format!("layer {layer} out of range (have {})", params.num_layers())));
    }
    let a = s.param(&params.amplitude[layer]);
    let sigma = s.param(&params.sigma[layer]);
    let table = gaussian_table(&mut s.tape, a, sigma, grid_h, grid_w)?;
    slice_and_stack(&mut s.tape, table, grid_h, grid_w)
}

type CacheKey = (usize, usize, u32, u32);

/// Evaluation-only bias, memoized on the exact parameter bits.
pub fn gab_bias_cached(amplitude: f32, sigma: f32, grid_h: usize, grid_w: usize) -> Result<Arc<Vec<f32>>> {
    static CACHE: OnceLock<Mutex<HashMap<CacheKey, Arc<Vec<f32>>>>> = OnceLock::new();
    let key = (grid_h, grid_w, amplitude.to_bits(), sigma.to_bits());
    let cache = CACHE.get_or_init(Default::default);
    if let Some(hit) = cache.lock().expect("cache lock").get(&key) {
        return Ok(hit.clone());
    }
    let mut tape = Tape::inference();
    let a = tape.constant(&[1], vec![amplitude])?;
    let s = tape.constant(&[1], vec![sigma])?;
    let table = gaussian_table(&mut tape, a, s, grid_h, grid_w)?;
    let bias = slice_and_stack(&mut tape, table, grid_h, grid_w)?;
    let value = Arc::new(tape.value(bias).to_vec());
    let mut guard = cache.lock().expect("cache lock");
    if guard.len() > 4096 {
        guard.clear();
    }
    guard.insert(key, value.clone());
    Ok(value)
}

/// Bias as a plain tensor, for inspection and export.
pub fn gab_bias_tensor(amplitude: f32, sigma: f32, grid_h: usize, grid_w: usize) -> Result<Tensor> {
    let n = grid_h * grid_w;
    Tensor::new(&[n, n], gab_bias_cached(amplitude, sigma, grid_h, grid_w)?.to_vec())
}
