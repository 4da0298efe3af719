//! Supervised training on the synthetic quadrant task.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Session, Tensor, Var};
use crate::dataset::SyntheticLocalityDataset;
use crate::error::{Error, Result};
use crate::vit::ViTModel;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdMomentum,
    #[default]
    AdaptiveMoments,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub optimizer: OptimizerKind,
    pub momentum: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub adam_eps: f32,
    pub weight_decay: f32,
    pub clip_norm: f32,
    pub seed: u64,
    /// Parameter-name prefixes excluded from updates.
    pub frozen: Vec<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            batch_size: 32,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::AdaptiveMoments,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
            clip_norm: 1.0,
            seed: 0,
            frozen: Vec::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        let checks = [
            ("learning_rate", self.learning_rate >= 0.0),
            ("weight_decay", self.weight_decay >= 0.0),
            ("clip_norm", self.clip_norm > 0.0),
            ("momentum", (0.0..1.0).contains(&self.momentum)),
            ("beta1", (0.0..1.0).contains(&self.beta1)),
            ("beta2", (0.0..1.0).contains(&self.beta2)),
            ("adam_eps", self.adam_eps > 0.0),
        ];
        for (name, ok) in checks {
            if !ok {
                return Err(Error::Config(format!("{name} is out of range")));
            }
        }
        Ok(())
    }

    fn is_frozen(&self, name: &str) -> bool {
        self.frozen.iter().any(|p| name.starts_with(p.as_str()))
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    /// Mean batch loss at each step, before that step's update.
    pub losses: Vec<f32>,
    /// Per step, `(A_l, σ_l)` for every layer after the update. Empty rows
    /// when the model has no Gaussian bias.
    pub gab_trajectory: Vec<Vec<(f32, f32)>>,
    /// Per step, global gradient norm before and after clipping.
    pub grad_norms: Vec<(f32, f32)>,
}

/// `−log softmax(logits)[label]`.
pub fn cross_entropy(s: &mut Session, logits: Var, label: usize) -> Result<Var> {
    let classes = s.tape.value(logits).len();
    if label >= classes {
        return Err(Error::Invalid(format!("label {label} out of range for {classes} classes")));
    }
    let logp = s.tape.log_softmax(logits)?;
    let picked = s.tape.gather(logp, vec![label], &[1])?;
    Ok(s.tape.mul_scalar(picked, -1.0))
}

/// Loss of one sample and its gradient for every parameter, in
/// [`ViTModel::named_params`] order.
pub fn loss_and_grads(model: &ViTModel, image: &Tensor, label: usize) -> Result<(f32, Vec<Vec<f32>>)> {
    let mut s = Session::new();
    let x = model.image_var(&mut s, image)?;
    let out = model.forward(&mut s, x)?;
    let loss = cross_entropy(&mut s, out.logits, label)?;
    let grads = s.tape.backward(loss)?;
    let per_param = model
        .named_params()
        .into_iter()
        .map(|(_, t)| match s.bound(t).and_then(|v| grads.get(v)) {
            Some(g) => g.to_vec(),
            None => vec![0.0; t.len()],
        })
        .collect();
    Ok((s.tape.value(loss)[0], per_param))
}

/// Mean loss and mean gradients over a batch. Samples run in parallel and
/// are summed in index order.
pub fn batch_loss_and_grads(model: &ViTModel, batch: &[(Tensor, usize)]) -> Result<(f32, Vec<Vec<f32>>)> {
    let results: Vec<(f32, Vec<Vec<f32>>)> =
        batch.par_iter().map(|(img, label)| loss_and_grads(model, img, *label)).collect::<Result<_>>()?;
    let mut iter = results.into_iter();
    let (mut loss, mut grads) = iter.next().ok_or_else(|| Error::Invalid("empty batch".into()))?;
    for (l, g) in iter {
        loss += l;
        for (acc, gi) in grads.iter_mut().zip(g) {
            acc.iter_mut().zip(gi).for_each(|(a, b)| *a += b);
        }
    }
    let scale = 1.0 / batch.len() as f32;
    grads.iter_mut().flatten().for_each(|g| *g *= scale);
    Ok((loss * scale, grads))
}

/// Rescales `grads` so their global norm is at most `max_norm`. Returns the
/// norm before and after.
pub fn clip_gradients(grads: &mut [Vec<f32>], max_norm: f32) -> (f32, f32) {
    let norm = |g: &[Vec<f32>]| g.iter().flatten().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
    let before = norm(grads);
    if before > max_norm as f64 {
        let scale = (max_norm as f64 / before) as f32;
        grads.iter_mut().flatten().for_each(|g| *g *= scale);
    }
    (before as f32, norm(grads) as f32)
}

struct Optimizer {
    first: Vec<Vec<f32>>,
    second: Vec<Vec<f32>>,
    step: i32,
}

impl Optimizer {
    fn new(model: &ViTModel) -> Self {
        let zeros: Vec<Vec<f32>> = model.named_params().iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Self { first: zeros.clone(), second: zeros, step: 0 }
    }

    fn update(&mut self, model: &mut ViTModel, grads: &[Vec<f32>], cfg: &TrainConfig) {
        self.step += 1;
        let lr = cfg.learning_rate;
        let bias1 = 1.0 - cfg.beta1.powi(self.step);
        let bias2 = 1.0 - cfg.beta2.powi(self.step);
        for (i, (name, param)) in model.named_params_mut().into_iter().enumerate() {
            if cfg.is_frozen(&name) {
                continue;
            }
            let g = &grads[i];
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (k, p) in param.data_mut().iter_mut().enumerate() {
                match cfg.optimizer {
                    OptimizerKind::SgdMomentum => {
                        let gk = g[k] + cfg.weight_decay * *p;
                        m[k] = cfg.momentum * m[k] + gk;
                        *p -= lr * m[k];
                    }
                    OptimizerKind::AdaptiveMoments => {
                        m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
                        v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
                        let m_hat = m[k] / bias1;
                        let v_hat = v[k] / bias2;
                        *p -= lr * (m_hat / (v_hat.sqrt() + cfg.adam_eps) + cfg.weight_decay * *p);
                    }
                }
            }
        }
    }
}

/// Batch of step `step`: indices `step·B .. step·B + B`, wrapped at the
/// epoch length.
pub fn batch_for_step(dataset: &SyntheticLocalityDataset, step: usize, batch_size: usize) -> Vec<(Tensor, usize)> {
    (0..batch_size).map(|k| dataset.sample(((step * batch_size + k) % dataset.samples_per_epoch) as u64)).collect()
}

fn check_compatible(model: &ViTModel, dataset: &SyntheticLocalityDataset) -> Result<()> {
    dataset.validate()?;
    let cfg = model.config();
    if dataset.image_shape() != cfg.image_shape() {
        return Err(Error::Config(format!(
            "dataset images are {:?} but the model expects {:?}",
            dataset.image_shape(),
            cfg.image_shape()
        )));
    }
    if cfg.num_classes != dataset.num_classes {
        return Err(Error::Config(format!(
            "model has {} classes, dataset has {}",
            cfg.num_classes, dataset.num_classes
        )));
    }
    Ok(())
}

/// Trains `model` in place with cross-entropy for `config.steps` steps.
pub fn train(model: &mut ViTModel, dataset: &SyntheticLocalityDataset, config: &TrainConfig) -> Result<TrainReport> {
    config.validate()?;
    check_compatible(model, dataset)?;
    let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
    let mut opt = Optimizer::new(model);
    let mut report = TrainReport::default();
    for step in 0..config.steps {
        let batch = batch_for_step(dataset, step, config.batch_size);
        let (loss, mut grads) = match batch_loss_and_grads(model, &batch) {
            Err(Error::NonFinite(_)) => return Err(Error::Diverged { step, loss: f32::NAN }),
            other => other?,
        };
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        for (g, name) in grads.iter_mut().zip(&names) {
            if config.is_frozen(name) {
                g.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let norms = clip_gradients(&mut grads, config.clip_norm);
        opt.update(model, &grads, config);
        report.losses.push(loss);
        report.grad_norms.push(norms);
        report.gab_trajectory.push(gab_values(model));
    }
    Ok(report)
}

pub fn gab_values(model: &ViTModel) -> Vec<(f32, f32)> {
    model.gab.as_ref().map_or_else(Vec::new, |g| (0..g.num_layers()).map(|l| g.get(l)).collect())
}

/// Fraction of `count` held-out samples classified correctly.
pub fn accuracy(model: &ViTModel, dataset: &SyntheticLocalityDataset, count: usize) -> Result<f32> {
    let correct: Vec<bool> = (0..count as u64)
        .into_par_iter()
        .map(|i| {
            let (img, label) = dataset.sample(i);
            model.predict(&img).map(|p| p == label)
        })
        .collect::<Result<_>>()?;
    Ok(correct.iter().filter(|&&c| c).count() as f32 / count.max(1) as f32)
}
