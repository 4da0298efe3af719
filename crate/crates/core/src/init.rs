use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::Tensor;

/// Independent generator per (seed, parameter name), so adding or removing
/// one parameter never shifts the draws of another.
pub(crate) fn param_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(name.as_bytes()));
    rng
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

pub(crate) fn normal(shape: &[usize], std: f32, seed: u64, name: &str) -> Tensor {
    let mut rng = param_rng(seed, name);
    let dist = Normal::new(0.0f32, std).expect("positive std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(&mut rng)).collect();
    Tensor::new(shape, data).expect("valid shape").with_grad()
}

pub(crate) fn zeros(shape: &[usize]) -> Tensor {
    Tensor::zeros(shape).with_grad()
}

pub(crate) fn ones(shape: &[usize]) -> Tensor {
    Tensor::full(shape, 1.0).with_grad()
}

/// `1 + N(0, std)` per entry.
pub(crate) fn near_one(shape: &[usize], std: f32, seed: u64, name: &str) -> Tensor {
    let mut t = normal(shape, std, seed, name);
    t.data_mut().iter_mut().for_each(|v| *v += 1.0);
    t
}
