//! Operation kernels.
//!
//! Forward kernels are generic over the float type so that a recorded tape
//! can be re-evaluated in `f64` for finite-difference audits. Backward rules
//! run in `f32` only; they are what the audits check.

use num_traits::Float;
use serde::Serialize;

/// Every differentiable operation the tape can record.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum OpKind {
    MatMul,
    Add,
    Sub,
    Mul,
    Div,
    MulScalar,
    AddScalar,
    Exp,
    Relu,
    Gelu,
    Softmax,
    LogSoftmax,
    LayerNorm,
    MeanOverDim,
    Sum,
    TransposeLastTwo,
    Reshape,
    Gather,
    TileRows,
}

impl OpKind {
    pub const ALL: [OpKind; 19] = [
        OpKind::MatMul,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Div,
        OpKind::MulScalar,
        OpKind::AddScalar,
        OpKind::Exp,
        OpKind::Relu,
        OpKind::Gelu,
        OpKind::Softmax,
        OpKind::LogSoftmax,
        OpKind::LayerNorm,
        OpKind::MeanOverDim,
        OpKind::Sum,
        OpKind::TransposeLastTwo,
        OpKind::Reshape,
        OpKind::Gather,
        OpKind::TileRows,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::MulScalar => "mul_scalar",
            OpKind::AddScalar => "add_scalar",
            OpKind::Exp => "exp",
            OpKind::Relu => "relu",
            OpKind::Gelu => "gelu",
            OpKind::Softmax => "softmax",
            OpKind::LogSoftmax => "log_softmax",
            OpKind::LayerNorm => "layernorm",
            OpKind::MeanOverDim => "mean_over_dim",
            OpKind::Sum => "sum",
            OpKind::TransposeLastTwo => "transpose_last_two",
            OpKind::Reshape => "reshape",
            OpKind::Gather => "gather",
            OpKind::TileRows => "tile_rows",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

impl std::fmt::Display for OpKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// How a binary op lines up its operands.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Broadcast {
    Same,
    LeftScalar,
    RightScalar,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    MatMul { m: usize, k: usize, n: usize },
    Binary { kind: BinaryKind, bcast: Broadcast },
    MulScalar(f64),
    AddScalar(f64),
    Exp,
    Relu,
    Gelu,
    Softmax { width: usize },
    LogSoftmax { width: usize },
    LayerNorm { width: usize, eps: f64 },
    MeanOverDim { outer: usize, dim: usize, inner: usize },
    Sum,
    TransposeLastTwo { batch: usize, rows: usize, cols: usize },
    Reshape,
    Gather { indices: Vec<usize>, source_len: usize },
    TileRows { rows: usize },
}

impl Op {
    pub(crate) fn kind(&self) -> Option<OpKind> {
        Some(match self {
            Op::Leaf => return None,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Binary { kind, .. } => match kind {
                BinaryKind::Add => OpKind::Add,
                BinaryKind::Sub => OpKind::Sub,
                BinaryKind::Mul => OpKind::Mul,
                BinaryKind::Div => OpKind::Div,
            },
            Op::MulScalar(_) => OpKind::MulScalar,
            Op::AddScalar(_) => OpKind::AddScalar,
            Op::Exp => OpKind::Exp,
            Op::Relu => OpKind::Relu,
            Op::Gelu => OpKind::Gelu,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::LogSoftmax { .. } => OpKind::LogSoftmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::MeanOverDim { .. } => OpKind::MeanOverDim,
            Op::Sum => OpKind::Sum,
            Op::TransposeLastTwo { .. } => OpKind::TransposeLastTwo,
            Op::Reshape => OpKind::Reshape,
            Op::Gather { .. } => OpKind::Gather,
            Op::TileRows { .. } => OpKind::TileRows,
        })
    }

    /// Evaluates the op on already-validated inputs.
    pub(crate) fn forward<F: Float>(&self, ins: &[&[F]]) -> Vec<F> {
        match self {
            Op::Leaf => unreachable!("leaves carry their own values"),
            Op::MatMul { m, k, n } => matmul(ins[0], ins[1], *m, *k, *n),
            Op::Binary { kind, bcast } => binary(*kind, *bcast, ins[0], ins[1]),
            Op::MulScalar(c) => {
                let c = F::from(*c).unwrap();
                ins[0].iter().map(|&x| x * c).collect()
            }
            Op::AddScalar(c) => {
                let c = F::from(*c).unwrap();
                ins[0].iter().map(|&x| x + c).collect()
            }
            Op::Exp => ins[0].iter().map(|x| x.exp()).collect(),
            Op::Relu => ins[0].iter().map(|&x| if x > F::zero() { x } else { F::zero() }).collect(),
            Op::Gelu => ins[0].iter().map(|&x| gelu(x)).collect(),
            Op::Softmax { width } => softmax(ins[0], *width),
            Op::LogSoftmax { width } => log_softmax(ins[0], *width),
            Op::LayerNorm { width, eps } => layernorm(ins[0], ins[1], ins[2], *width, *eps).0,
            Op::MeanOverDim { outer, dim, inner } => {
                let scale = F::one() / F::from(*dim).unwrap();
                let mut out = vec![F::zero(); outer * inner];
                for o in 0..*outer {
                    for d in 0..*dim {
                        let base = (o * dim + d) * inner;
                        for i in 0..*inner {
                            out[o * inner + i] = out[o * inner + i] + ins[0][base + i];
                        }
                    }
                }
                out.iter_mut().for_each(|v| *v = *v * scale);
                out
            }
            Op::Sum => vec![ins[0].iter().fold(F::zero(), |acc, &x| acc + x)],
            Op::TransposeLastTwo { batch, rows, cols } => {
                let mut out = vec![F::zero(); ins[0].len()];
                for b in 0..*batch {
                    let off = b * rows * cols;
                    for r in 0..*rows {
                        for c in 0..*cols {
                            out[off + c * rows + r] = ins[0][off + r * cols + c];
                        }
                    }
                }
                out
            }
            Op::Reshape => ins[0].to_vec(),
            Op::Gather { indices, .. } => indices.iter().map(|&i| ins[0][i]).collect(),
            Op::TileRows { rows } => {
                let mut out = Vec::with_capacity(rows * ins[0].len());
                for _ in 0..*rows {
                    out.extend_from_slice(ins[0]);
                }
                out
            }
        }
    }

    /// Vector-Jacobian product: gradients for each input given the output
    /// gradient. Entries for inputs that need no gradient may be skipped by
    /// the caller, but every input gets a slot.
    pub(crate) fn backward(&self, ins: &[&[f32]], out: &[f32], gout: &[f32]) -> Vec<Vec<f32>> {
        match self {
            Op::Leaf => Vec::new(),
            Op::MatMul { m, k, n } => {
                let (a, b) = (ins[0], ins[1]);
                let (m, k, n) = (*m, *k, *n);
                let mut ga = vec![0.0f32; m * k];
                let mut gb = vec![0.0f32; k * n];
                for i in 0..m {
                    for p in 0..k {
                        let mut acc = 0.0f32;
                        for j in 0..n {
                            acc += gout[i * n + j] * b[p * n + j];
                        }
                        ga[i * k + p] = acc;
                        let av = a[i * k + p];
                        for j in 0..n {
                            gb[p * n + j] += av * gout[i * n + j];
                        }
                    }
                }
                vec![ga, gb]
            }
            Op::Binary { kind, bcast } => binary_backward(*kind, *bcast, ins[0], ins[1], gout),
            Op::MulScalar(c) => {
                let c = *c as f32;
                vec![gout.iter().map(|g| g * c).collect()]
            }
            Op::AddScalar(_) | Op::Reshape => vec![gout.to_vec()],
            Op::Exp => vec![gout.iter().zip(out).map(|(g, y)| g * y).collect()],
            Op::Relu => vec![gout.iter().zip(ins[0]).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect()],
            Op::Gelu => vec![gout.iter().zip(ins[0]).map(|(g, &x)| g * gelu_grad(x)).collect()],
            Op::Softmax { width } => {
                let mut gx = vec![0.0f32; out.len()];
                for ((y, g), dx) in out.chunks(*width).zip(gout.chunks(*width)).zip(gx.chunks_mut(*width)) {
                    let dot: f32 = y.iter().zip(g).map(|(a, b)| a * b).sum();
                    for ((d, yi), gi) in dx.iter_mut().zip(y).zip(g) {
                        *d = yi * (gi - dot);
                    }
                }
                vec![gx]
            }
            Op::LogSoftmax { width } => {
                let mut gx = vec![0.0f32; out.len()];
                for ((y, g), dx) in out.chunks(*width).zip(gout.chunks(*width)).zip(gx.chunks_mut(*width)) {
                    let total: f32 = g.iter().sum();
                    for ((d, yi), gi) in dx.iter_mut().zip(y).zip(g) {
                        *d = gi - yi.exp() * total;
                    }
                }
                vec![gx]
            }
            Op::LayerNorm { width, eps } => layernorm_backward(ins[0], ins[1], gout, *width, *eps),
            Op::MeanOverDim { outer, dim, inner } => {
                let scale = 1.0 / *dim as f32;
                let mut gx = vec![0.0f32; outer * dim * inner];
                for o in 0..*outer {
                    for d in 0..*dim {
                        let base = (o * dim + d) * inner;
                        for i in 0..*inner {
                            gx[base + i] = gout[o * inner + i] * scale;
                        }
                    }
                }
                vec![gx]
            }
            Op::Sum => vec![vec![gout[0]; ins[0].len()]],
            Op::TransposeLastTwo { batch, rows, cols } => {
                let mut gx = vec![0.0f32; gout.len()];
                for b in 0..*batch {
                    let off = b * rows * cols;
                    for r in 0..*rows {
                        for c in 0..*cols {
                            gx[off + r * cols + c] = gout[off + c * rows + r];
                        }
                    }
                }
                vec![gx]
            }
            Op::Gather { indices, source_len } => {
                let mut gx = vec![0.0f32; *source_len];
                for (&i, g) in indices.iter().zip(gout) {
                    gx[i] += g;
                }
                vec![gx]
            }
            Op::TileRows { .. } => {
                let width = ins[0].len();
                let mut gx = vec![0.0f32; width];
                for row in gout.chunks(width) {
                    for (d, g) in gx.iter_mut().zip(row) {
                        *d += g;
                    }
                }
                vec![gx]
            }
        }
    }
}

pub(crate) fn matmul<F: Float>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

fn apply<F: Float>(kind: BinaryKind, x: F, y: F) -> F {
    match kind {
        BinaryKind::Add => x + y,
        BinaryKind::Sub => x - y,
        BinaryKind::Mul => x * y,
        BinaryKind::Div => x / y,
    }
}

fn binary<F: Float>(kind: BinaryKind, bcast: Broadcast, a: &[F], b: &[F]) -> Vec<F> {
    match bcast {
        Broadcast::Same => a.iter().zip(b).map(|(&x, &y)| apply(kind, x, y)).collect(),
        Broadcast::LeftScalar => b.iter().map(|&y| apply(kind, a[0], y)).collect(),
        Broadcast::RightScalar => a.iter().map(|&x| apply(kind, x, b[0])).collect(),
    }
}

fn binary_backward(kind: BinaryKind, bcast: Broadcast, a: &[f32], b: &[f32], gout: &[f32]) -> Vec<Vec<f32>> {
    let at = |i: usize| if bcast == Broadcast::LeftScalar { a[0] } else { a[i] };
    let bt = |i: usize| if bcast == Broadcast::RightScalar { b[0] } else { b[i] };
    let n = gout.len();
    let mut ga_full = Vec::with_capacity(n);
    let mut gb_full = Vec::with_capacity(n);
    for (i, &g) in gout.iter().enumerate() {
        let (x, y) = (at(i), bt(i));
        let (da, db) = match kind {
            BinaryKind::Add => (g, g),
            BinaryKind::Sub => (g, -g),
            BinaryKind::Mul => (g * y, g * x),
            BinaryKind::Div => (g / y, -g * x / (y * y)),
        };
        ga_full.push(da);
        gb_full.push(db);
    }
    let reduce = |v: Vec<f32>| vec![v.iter().sum::<f32>()];
    match bcast {
        Broadcast::Same => vec![ga_full, gb_full],
        Broadcast::LeftScalar => vec![reduce(ga_full), gb_full],
        Broadcast::RightScalar => vec![ga_full, reduce(gb_full)],
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

pub(crate) fn gelu<F: Float>(x: F) -> F {
    let k = F::from(GELU_K).unwrap();
    let c = F::from(GELU_C).unwrap();
    let half = F::from(0.5).unwrap();
    half * x * (F::one() + (k * (x + c * x * x * x)).tanh())
}

fn gelu_grad(x: f32) -> f32 {
    let k = GELU_K as f32;
    let c = GELU_C as f32;
    let t = (k * (x + c * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * k * (1.0 + 3.0 * c * x * x)
}

pub(crate) fn softmax<F: Float>(x: &[F], width: usize) -> Vec<F> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(width) {
        let max = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
        let start = out.len();
        let mut total = F::zero();
        for &v in row {
            let e = (v - max).exp();
            total = total + e;
            out.push(e);
        }
        out[start..].iter_mut().for_each(|e| *e = *e / total);
    }
    out
}

fn log_softmax<F: Float>(x: &[F], width: usize) -> Vec<F> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(width) {
        let max = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
        let total = row.iter().fold(F::zero(), |acc, &v| acc + (v - max).exp());
        let log_total = total.ln() + max;
        out.extend(row.iter().map(|&v| v - log_total));
    }
    out
}

/// Returns the normalized output and per-row inverse standard deviations.
fn layernorm<F: Float>(x: &[F], gain: &[F], bias: &[F], width: usize, eps: f64) -> (Vec<F>, Vec<F>) {
    let eps = F::from(eps).unwrap();
    let w = F::from(width).unwrap();
    let mut out = Vec::with_capacity(x.len());
    let mut inv_stds = Vec::with_capacity(x.len() / width);
    for row in x.chunks(width) {
        let mean = row.iter().fold(F::zero(), |a, &v| a + v) / w;
        let var = row.iter().fold(F::zero(), |a, &v| a + (v - mean) * (v - mean)) / w;
        let inv_std = F::one() / (var + eps).sqrt();
        inv_stds.push(inv_std);
        out.extend(row.iter().zip(gain).zip(bias).map(|((&v, &g), &b)| (v - mean) * inv_std * g + b));
    }
    (out, inv_stds)
}

fn layernorm_backward(x: &[f32], gain: &[f32], gout: &[f32], width: usize, eps: f64) -> Vec<Vec<f32>> {
    let eps = eps as f32;
    let w = width as f32;
    let mut gx = vec![0.0f32; x.len()];
    let mut ggain = vec![0.0f32; width];
    let mut gbias = vec![0.0f32; width];
    for ((row, g), dx) in x.chunks(width).zip(gout.chunks(width)).zip(gx.chunks_mut(width)) {
        let mean = row.iter().sum::<f32>() / w;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / w;
        let inv_std = 1.0 / (var + eps).sqrt();
        let xhat: Vec<f32> = row.iter().map(|v| (v - mean) * inv_std).collect();
        let dxhat: Vec<f32> = g.iter().zip(gain).map(|(a, b)| a * b).collect();
        let mean_dxhat = dxhat.iter().sum::<f32>() / w;
        let mean_dxhat_xhat = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f32>() / w;
        for i in 0..width {
            dx[i] = inv_std * (dxhat[i] - mean_dxhat - xhat[i] * mean_dxhat_xhat);
            ggain[i] += g[i] * xhat[i];
            gbias[i] += g[i];
        }
    }
    vec![gx, ggain, gbias]
}
