//! Finite-difference gradient audits.
//!
//! Every differentiable op is checked through its vector-Jacobian product
//! against central differences of an `f64` replay of the same tape. The
//! end-to-end checks do the same for the loss gradient of each layer's
//! Gaussian-bias parameters and for the input gradient behind ERF maps.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{OpKind, Session, Tape, Var};
use crate::dataset::SyntheticLocalityDataset;
use crate::erf::{central_patch_index, target_feature};
use crate::error::{Error, Result};
use crate::train::cross_entropy;
use crate::vit::{ViTConfig, ViTModel};

pub const FD_STEP: f64 = 1e-4;
pub const ABS_TOL: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-3;
/// Largest `num_patches · embed_dim` accepted for end-to-end audits.
pub const MAX_TOKEN_ELEMENTS: usize = 4096;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    /// Number of gradient entries compared.
    pub evaluated: usize,
    pub max_abs_error: f64,
    /// Largest relative error among entries whose absolute error exceeds
    /// [`ABS_TOL`]; zero when there are none.
    pub max_rel_error: f64,
    /// Largest finite-difference magnitude seen, for judging scale.
    pub max_reference: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub checks: Vec<CheckResult>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

#[derive(Default)]
struct Accumulator {
    evaluated: usize,
    max_abs: f64,
    max_rel: f64,
    max_ref: f64,
    passed: bool,
}

impl Accumulator {
    fn new() -> Self {
        Self { passed: true, ..Default::default() }
    }

    fn compare(&mut self, analytic: f64, numeric: f64) {
        let abs = (analytic - numeric).abs();
        let scale = analytic.abs().max(numeric.abs());
        let rel = if scale > 0.0 { abs / scale } else { 0.0 };
        self.evaluated += 1;
        self.max_abs = self.max_abs.max(abs);
        self.max_ref = self.max_ref.max(numeric.abs());
        if abs > ABS_TOL {
            self.max_rel = self.max_rel.max(rel);
            if rel > REL_TOL || !abs.is_finite() {
                self.passed = false;
            }
        }
    }

    fn finish(self, name: String) -> CheckResult {
        CheckResult {
            name,
            evaluated: self.evaluated,
            max_abs_error: self.max_abs,
            max_rel_error: self.max_rel,
            max_reference: self.max_ref,
            passed: self.passed,
        }
    }
}

/// Compares `backward_with(output, cotangent)` on each of `leaves` against
/// central differences of `Σ cotangent · output`.
fn compare_vjp(tape: &Tape, leaves: &[Var], output: Var, cotangent: &[f32], acc: &mut Accumulator) -> Result<()> {
    let grads = tape.backward_with(output, cotangent.to_vec())?;
    let weights: Vec<f64> = cotangent.iter().map(|&c| c as f64).collect();
    let objective = |overrides: &HashMap<Var, Vec<f64>>| -> f64 {
        tape.replay_f64(output, overrides).iter().zip(&weights).map(|(o, w)| o * w).sum()
    };
    for &leaf in leaves {
        let base: Vec<f64> = tape.value(leaf).iter().map(|&v| v as f64).collect();
        let analytic = grads.get(leaf).map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; base.len()]);
        let mut overrides = HashMap::new();
        for i in 0..base.len() {
            let mut plus = base.clone();
            plus[i] += FD_STEP;
            overrides.insert(leaf, plus);
            let up = objective(&overrides);
            let mut minus = base.clone();
            minus[i] -= FD_STEP;
            overrides.insert(leaf, minus);
            let down = objective(&overrides);
            acc.compare(analytic[i] as f64, (up - down) / (2.0 * FD_STEP));
        }
    }
    Ok(())
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Values with magnitude in `[0.1, 1)` and random sign, away from kinks.
fn off_zero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(0.1f32..1.0) * if rng.random::<bool>() { 1.0 } else { -1.0 }).collect()
}

fn grad_leaf(tape: &mut Tape, shape: &[usize], data: Vec<f32>) -> Var {
    let t = crate::autodiff::Tensor::new(shape, data).expect("audit shapes are valid").with_grad();
    tape.leaf(&t)
}

/// One audit case: fresh tape, leaves, and an output.
type Case = (Tape, Vec<Var>, Var);

fn op_cases(kind: OpKind, rng: &mut ChaCha8Rng, fault: Option<OpKind>) -> Result<Vec<Case>> {
    let new_tape = || {
        let mut t = Tape::new();
        if let Some(k) = fault {
            t.inject_fault(k);
        }
        t
    };
    let mut cases = Vec::new();
    let mut push_binary =
        |rng: &mut ChaCha8Rng, f: fn(&mut Tape, Var, Var) -> Result<Var>, positive_rhs: bool| -> Result<()> {
            for rhs_shape in [vec![2, 3], vec![1]] {
                let mut t = new_tape();
                let a = grad_leaf(&mut t, &[2, 3], uniform(rng, 6, -1.0, 1.0));
                let n = rhs_shape.iter().product();
                let data = if positive_rhs { uniform(rng, n, 0.5, 1.5) } else { uniform(rng, n, -1.0, 1.0) };
                let b = grad_leaf(&mut t, &rhs_shape, data);
                let out = f(&mut t, a, b)?;
                cases.push((t, vec![a, b], out));
                // scalar on the left as well
                let mut t = new_tape();
                let a = grad_leaf(&mut t, &[1], uniform(rng, 1, 0.5, 1.5));
                let b = grad_leaf(&mut t, &[3], uniform(rng, 3, 0.5, 1.5));
                let out = f(&mut t, a, b)?;
                cases.push((t, vec![a, b], out));
            }
            Ok(())
        };
    match kind {
        OpKind::Add => push_binary(rng, Tape::add, false)?,
        OpKind::Sub => push_binary(rng, Tape::sub, false)?,
        OpKind::Mul => push_binary(rng, Tape::mul, false)?,
        OpKind::Div => push_binary(rng, Tape::div, true)?,
        _ => {
            let mut t = new_tape();
            let (leaves, out) = match kind {
                OpKind::MatMul => {
                    let a = grad_leaf(&mut t, &[3, 4], uniform(rng, 12, -1.0, 1.0));
                    let b = grad_leaf(&mut t, &[4, 2], uniform(rng, 8, -1.0, 1.0));
                    (vec![a, b], t.matmul(a, b)?)
                }
                OpKind::MulScalar => {
                    let a = grad_leaf(&mut t, &[5], uniform(rng, 5, -1.0, 1.0));
                    (vec![a], t.mul_scalar(a, -1.7))
                }
                OpKind::AddScalar => {
                    let a = grad_leaf(&mut t, &[5], uniform(rng, 5, -1.0, 1.0));
                    (vec![a], t.add_scalar(a, 0.5))
                }
                OpKind::Exp => {
                    let a = grad_leaf(&mut t, &[5], uniform(rng, 5, -1.0, 1.0));
                    (vec![a], t.exp(a))
                }
                OpKind::Relu => {
                    let a = grad_leaf(&mut t, &[8], off_zero(rng, 8));
                    (vec![a], t.relu(a))
                }
                OpKind::Gelu => {
                    let a = grad_leaf(&mut t, &[8], uniform(rng, 8, -3.0, 3.0));
                    (vec![a], t.gelu(a))
                }
                OpKind::Softmax => {
                    let a = grad_leaf(&mut t, &[2, 5], uniform(rng, 10, -2.0, 2.0));
                    (vec![a], t.softmax(a)?)
                }
                OpKind::LogSoftmax => {
                    let a = grad_leaf(&mut t, &[2, 5], uniform(rng, 10, -2.0, 2.0));
                    (vec![a], t.log_softmax(a)?)
                }
                OpKind::LayerNorm => {
                    let a = grad_leaf(&mut t, &[3, 6], uniform(rng, 18, -1.0, 1.0));
                    let g = grad_leaf(&mut t, &[6], uniform(rng, 6, 0.5, 1.5));
                    let b = grad_leaf(&mut t, &[6], uniform(rng, 6, -0.5, 0.5));
                    (vec![a, g, b], t.layernorm(a, g, b, 1e-5)?)
                }
                OpKind::MeanOverDim => {
                    let a = grad_leaf(&mut t, &[2, 3, 4], uniform(rng, 24, -1.0, 1.0));
                    (vec![a], t.mean_over_dim(a, 1)?)
                }
                OpKind::Sum => {
                    let a = grad_leaf(&mut t, &[3, 4], uniform(rng, 12, -1.0, 1.0));
                    (vec![a], t.sum(a))
                }
                OpKind::TransposeLastTwo => {
                    let a = grad_leaf(&mut t, &[2, 3, 4], uniform(rng, 24, -1.0, 1.0));
                    (vec![a], t.transpose_last_two(a)?)
                }
                OpKind::Reshape => {
                    let a = grad_leaf(&mut t, &[2, 6], uniform(rng, 12, -1.0, 1.0));
                    (vec![a], t.reshape(a, &[3, 4])?)
                }
                OpKind::Gather => {
                    let a = grad_leaf(&mut t, &[10], uniform(rng, 10, -1.0, 1.0));
                    (vec![a], t.gather(a, vec![3, 1, 3, 9, 0, 0], &[2, 3])?)
                }
                OpKind::TileRows => {
                    let a = grad_leaf(&mut t, &[4], uniform(rng, 4, -1.0, 1.0));
                    (vec![a], t.tile_rows(a, 3)?)
                }
                OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Div => unreachable!(),
            };
            cases.push((t, leaves, out));
        }
    }
    Ok(cases)
}

/// VJP audit of a single op kind.
pub fn check_op(kind: OpKind, seed: u64, fault: Option<OpKind>) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(kind as u64 + 1);
    let mut acc = Accumulator::new();
    for (tape, leaves, out) in op_cases(kind, &mut rng, fault)? {
        let n = tape.value(out).len();
        let cotangent = uniform(&mut rng, n, -1.0, 1.0);
        compare_vjp(&tape, &leaves, out, &cotangent, &mut acc)?;
    }
    Ok(acc.finish(format!("op:{}", kind.name())))
}

/// Rejects configs too large for exhaustive finite differences.
pub fn check_audit_size(config: &ViTConfig) -> Result<()> {
    config.validate()?;
    let size = config.num_patches() * config.embed_dim;
    if size > MAX_TOKEN_ELEMENTS {
        return Err(Error::Config(format!(
            "gradcheck needs num_patches * embed_dim <= {MAX_TOKEN_ELEMENTS}, got {} * {} = {size}",
            config.num_patches(),
            config.embed_dim
        )));
    }
    Ok(())
}

fn session(fault: Option<OpKind>) -> Session {
    let mut s = Session::new();
    if let Some(k) = fault {
        s.tape.inject_fault(k);
    }
    s
}

/// `∂loss/∂A_l` and `∂loss/∂σ_l` for every layer, one check per parameter
/// kind. Empty when the model has no Gaussian bias.
pub fn check_gab_params(model: &ViTModel, seed: u64, fault: Option<OpKind>) -> Result<Vec<CheckResult>> {
    let Some(gab) = &model.gab else { return Ok(Vec::new()) };
    let cfg = model.config();
    let data = SyntheticLocalityDataset {
        seed,
        height: cfg.image_height,
        width: cfg.image_width,
        channels: cfg.channels,
        ..Default::default()
    };
    let (image, label) = data.sample(0);
    let label = label % cfg.num_classes;
    let mut s = session(fault);
    let x = model.image_var(&mut s, &image)?;
    let out = model.forward(&mut s, x)?;
    let loss = cross_entropy(&mut s, out.logits, label)?;
    let mut results = Vec::new();
    for (what, params) in [("gab_amplitude", &gab.amplitude), ("gab_sigma", &gab.sigma)] {
        let mut acc = Accumulator::new();
        let leaves: Vec<Var> = params
            .iter()
            .map(|t| s.bound(t).ok_or_else(|| Error::Invalid(format!("{what} not on the tape"))))
            .collect::<Result<_>>()?;
        compare_vjp(&s.tape, &leaves, loss, &[1.0], &mut acc)?;
        results.push(acc.finish(what.to_string()));
    }
    Ok(results)
}

/// `∂Y/∂x` for the central patch's mean feature on a seeded noise image.
pub fn check_input_gradient(model: &ViTModel, seed: u64, fault: Option<OpKind>) -> Result<CheckResult> {
    let cfg = model.config();
    let image = crate::erf::noise_image(seed, 0, cfg.image_shape());
    let mut s = session(fault);
    let x = model.image_var(&mut s, &image.with_grad())?;
    let out = model.forward(&mut s, x)?;
    let y = target_feature(&mut s, out.features, central_patch_index(cfg.grid_h(), cfg.grid_w()), cfg.embed_dim)?;
    let mut acc = Accumulator::new();
    compare_vjp(&s.tape, &[x], y, &[1.0], &mut acc)?;
    Ok(acc.finish("input_gradient".into()))
}

/// Every registered audit: one check per op kind, then the end-to-end
/// checks on a model built from `config`.
pub fn run_gradcheck(config: &ViTConfig, seed: u64, fault: Option<OpKind>) -> Result<GradCheckReport> {
    check_audit_size(config)?;
    let mut report = GradCheckReport::default();
    for kind in OpKind::ALL {
        report.checks.push(check_op(kind, seed, fault)?);
    }
    let model = ViTModel::new(config.clone(), seed)?;
    report.checks.extend(check_gab_params(&model, seed, fault)?);
    report.checks.push(check_input_gradient(&model, seed, fault)?);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes() {
        for kind in OpKind::ALL {
            let r = check_op(kind, 3, None).unwrap();
            assert!(r.passed, "{r:?}");
            assert!(r.evaluated > 0);
        }
    }

    #[test]
    fn injected_fault_is_caught() {
        for kind in OpKind::ALL {
            let r = check_op(kind, 3, Some(kind)).unwrap();
            assert!(!r.passed, "{} fault not detected", kind.name());
        }
    }

    #[test]
    fn default_config_passes() {
        let report = run_gradcheck(&ViTConfig::default(), 0, None).unwrap();
        for c in &report.checks {
            assert!(c.passed, "{c:?}");
        }
        assert_eq!(report.checks.len(), OpKind::ALL.len() + 3);
    }

    #[test]
    fn oversized_config_rejected() {
        let cfg = ViTConfig { image_height: 64, image_width: 64, embed_dim: 64, ..Default::default() };
        let err = run_gradcheck(&cfg, 0, None).unwrap_err().to_string();
        assert!(err.contains("4096"), "{err}");
    }
}
