use std::collections::HashMap;

use super::op::{BinaryKind, Broadcast, Op, OpKind};
use super::tensor::{check_shape, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    inputs: Vec<Var>,
    shape: Vec<usize>,
    value: Vec<f32>,
    requires_grad: bool,
}

/// Wengert list of recorded operations.
///
/// Nodes are appended in evaluation order, so every node's inputs precede
/// it and backward is a single reverse sweep.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
    fault: Option<OpKind>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grad_enabled: true, fault: None }
    }

    /// A tape used only for evaluation. Values are computed as usual but
    /// [`Tape::backward`] is rejected.
    pub fn inference() -> Self {
        Self { grad_enabled: false, ..Self::new() }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    /// Test fixture: scales every input gradient produced by `kind` by 1.5.
    #[doc(hidden)]
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f32] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v), self.value(v).to_vec()).expect("recorded shapes are valid")
    }

    /// Registers a tensor as a leaf, tracking gradients if it asks for them.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push_leaf(t.shape().to_vec(), t.data().to_vec(), t.requires_grad)
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<f32>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.push_leaf(t.shape().to_vec(), t.into_data(), false))
    }

    fn push_leaf(&mut self, shape: Vec<usize>, value: Vec<f32>, requires_grad: bool) -> Var {
        self.nodes.push(Node { op: Op::Leaf, inputs: Vec::new(), shape, value, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, op: Op, inputs: &[Var], shape: Vec<usize>) -> Var {
        let value = {
            let ins: Vec<&[f32]> = inputs.iter().map(|v| self.value(*v)).collect();
            op.forward::<f32>(&ins)
        };
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        let requires_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { op, inputs: inputs.to_vec(), shape, value, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn matrix_dims(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref s => Err(Error::Shape(format!("{what} expects a 2-D operand, got {s:?}"))),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(Error::Shape(format!("matmul inner dimensions differ: [{m}x{k}] x [{k2}x{n}]")));
        }
        Ok(self.record(Op::MatMul { m, k, n }, &[a, b], vec![m, n]))
    }

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (bcast, shape) = if sa == sb {
            (Broadcast::Same, sa)
        } else if self.value(a).len() == 1 && self.value(b).len() == 1 {
            (Broadcast::Same, if sa.len() >= sb.len() { sa } else { sb })
        } else if self.value(b).len() == 1 {
            (Broadcast::RightScalar, sa)
        } else if self.value(a).len() == 1 {
            (Broadcast::LeftScalar, sb)
        } else {
            return Err(Error::Shape(format!("{kind:?} operands differ: {sa:?} vs {sb:?}")));
        };
        Ok(self.record(Op::Binary { kind, bcast }, &[a, b], shape))
    }

    /// Elementwise sum. Operands must share a shape, or one must hold a
    /// single value.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    pub fn mul_scalar(&mut self, a: Var, c: f32) -> Var {
        let shape = self.shape(a).to_vec();
        self.record(Op::MulScalar(c as f64), &[a], shape)
    }

    pub fn add_scalar(&mut self, a: Var, c: f32) -> Var {
        let shape = self.shape(a).to_vec();
        self.record(Op::AddScalar(c as f64), &[a], shape)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        self.record(Op::Exp, &[a], shape)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        self.record(Op::Relu, &[a], shape)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        self.record(Op::Gelu, &[a], shape)
    }

    fn last_dim(&self, a: Var) -> usize {
        *self.shape(a).last().expect("shapes are non-empty")
    }

    /// Softmax along the last dimension, with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        if self.value(a).iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("softmax input".into()));
        }
        let width = self.last_dim(a);
        let shape = self.shape(a).to_vec();
        Ok(self.record(Op::Softmax { width }, &[a], shape))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        if self.value(a).iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("log_softmax input".into()));
        }
        let width = self.last_dim(a);
        let shape = self.shape(a).to_vec();
        Ok(self.record(Op::LogSoftmax { width }, &[a], shape))
    }

    /// Normalizes each row over the last dimension, then applies `gain` and
    /// `bias` (both of that dimension's length).
    pub fn layernorm(&mut self, a: Var, gain: Var, bias: Var, eps: f32) -> Result<Var> {
        if eps.is_nan() || eps <= 0.0 {
            return Err(Error::Invalid(format!("layernorm eps must be positive, got {eps}")));
        }
        let width = self.last_dim(a);
        if self.value(gain).len() != width || self.value(bias).len() != width {
            return Err(Error::Shape(format!(
                "layernorm gain/bias must have length {width}, got {} and {}",
                self.value(gain).len(),
                self.value(bias).len()
            )));
        }
        let shape = self.shape(a).to_vec();
        Ok(self.record(Op::LayerNorm { width, eps: eps as f64 }, &[a, gain, bias], shape))
    }

    /// Averages over `dim`, removing it. Reducing a 1-D tensor yields `[1]`.
    pub fn mean_over_dim(&mut self, a: Var, dim: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if dim >= shape.len() {
            return Err(Error::Shape(format!("mean_over_dim: dim {dim} out of range for {shape:?}")));
        }
        let outer = shape[..dim].iter().product();
        let inner = shape[dim + 1..].iter().product();
        let mut out_shape: Vec<usize> = shape.iter().enumerate().filter(|(i, _)| *i != dim).map(|(_, &s)| s).collect();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        Ok(self.record(Op::MeanOverDim { outer, dim: shape[dim], inner }, &[a], out_shape))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        self.record(Op::Sum, &[a], vec![1])
    }

    pub fn transpose_last_two(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() < 2 {
            return Err(Error::Shape(format!("transpose_last_two needs at least 2 dims, got {shape:?}")));
        }
        let rows = shape[shape.len() - 2];
        let cols = shape[shape.len() - 1];
        let batch = shape[..shape.len() - 2].iter().product();
        let mut out_shape = shape.clone();
        let n = out_shape.len();
        out_shape.swap(n - 2, n - 1);
        Ok(self.record(Op::TransposeLastTwo { batch, rows, cols }, &[a], out_shape))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        check_shape(shape)?;
        let len = self.value(a).len();
        if shape.iter().product::<usize>() != len {
            return Err(Error::Shape(format!("cannot reshape {:?} into {shape:?}", self.shape(a))));
        }
        Ok(self.record(Op::Reshape, &[a], shape.to_vec()))
    }

    /// Picks flat elements of `a` by index into a tensor of `shape`.
    pub fn gather(&mut self, a: Var, indices: Vec<usize>, shape: &[usize]) -> Result<Var> {
        check_shape(shape)?;
        let source_len = self.value(a).len();
        if shape.iter().product::<usize>() != indices.len() {
            return Err(Error::Shape(format!("gather: {} indices for shape {shape:?}", indices.len())));
        }
        if let Some(bad) = indices.iter().find(|&&i| i >= source_len) {
            return Err(Error::Shape(format!("gather index {bad} out of range for {source_len} values")));
        }
        Ok(self.record(Op::Gather { indices, source_len }, &[a], shape.to_vec()))
    }

    /// Repeats a vector as `rows` rows: `[D]` becomes `[rows x D]`.
    pub fn tile_rows(&mut self, a: Var, rows: usize) -> Result<Var> {
        if rows == 0 {
            return Err(Error::Shape("tile_rows needs at least one row".into()));
        }
        let width = self.value(a).len();
        Ok(self.record(Op::TileRows { rows }, &[a], vec![rows, width]))
    }

    /// Reverse sweep from a single-element output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if !self.grad_enabled {
            return Err(Error::Invalid("backward on an inference tape".into()));
        }
        if self.value(output).len() != 1 {
            return Err(Error::Shape(format!("backward needs a scalar output, got shape {:?}", self.shape(output))));
        }
        self.backward_with(output, vec![1.0])
    }

    /// Vector-Jacobian product: propagates an arbitrary output cotangent.
    pub fn backward_with(&self, output: Var, cotangent: Vec<f32>) -> Result<Gradients> {
        if !self.grad_enabled {
            return Err(Error::Invalid("backward on an inference tape".into()));
        }
        if cotangent.len() != self.value(output).len() {
            return Err(Error::Shape(format!(
                "cotangent has {} values, output has {}",
                cotangent.len(),
                self.value(output).len()
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(cotangent);
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || node.inputs.is_empty() {
                continue;
            }
            let Some(gout) = grads[idx].take() else { continue };
            let ins: Vec<&[f32]> = node.inputs.iter().map(|v| self.value(*v)).collect();
            let mut local = node.op.backward(&ins, &node.value, &gout);
            if self.fault.is_some() && self.fault == node.op.kind() {
                local.iter_mut().flatten().for_each(|g| *g *= 1.5);
            }
            for (input, g) in node.inputs.iter().zip(local) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
            grads[idx] = Some(gout);
        }
        Ok(Gradients { grads })
    }

    /// Re-evaluates the recorded graph up to `output` in `f64`, substituting
    /// leaf values from `overrides`. Used by finite-difference audits.
    pub fn replay_f64(&self, output: Var, overrides: &HashMap<Var, Vec<f64>>) -> Vec<f64> {
        let mut values: Vec<Vec<f64>> = Vec::with_capacity(output.0 + 1);
        for (idx, node) in self.nodes[..=output.0].iter().enumerate() {
            let v = match &node.op {
                Op::Leaf => match overrides.get(&Var(idx)) {
                    Some(o) => o.clone(),
                    None => node.value.iter().map(|&x| x as f64).collect(),
                },
                op => {
                    let ins: Vec<&[f64]> = node.inputs.iter().map(|v| values[v.0].as_slice()).collect();
                    op.forward::<f64>(&ins)
                }
            };
            values.push(v);
        }
        values.pop().unwrap_or_default()
    }

    /// Operation kinds present on the tape, in first-use order.
    pub fn recorded_kinds(&self) -> Vec<OpKind> {
        let mut seen = Vec::new();
        for kind in self.nodes.iter().filter_map(|n| n.op.kind()) {
            if !seen.contains(&kind) {
                seen.push(kind);
            }
        }
        seen
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `v` into `t.grad`. Tensors that do not require
    /// gradients are left untouched.
    pub fn accumulate_into(&self, v: Var, t: &mut Tensor) {
        if !t.requires_grad {
            return;
        }
        let n = t.len();
        let acc = t.grad.get_or_insert_with(|| vec![0.0; n]);
        if let Some(g) = self.get(v) {
            acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_element_operands_keep_higher_rank() {
        let mut t = Tape::new();
        let a = t.constant(&[1], vec![2.0]).unwrap();
        let b = t.constant(&[1, 1], vec![3.0]).unwrap();
        let p = t.mul(a, b).unwrap();
        assert_eq!(t.shape(p), [1, 1]);
        let q = t.add(b, a).unwrap();
        assert_eq!(t.shape(q), [1, 1]);
    }

    fn leaf(tape: &mut Tape, shape: &[usize], data: &[f32]) -> Var {
        tape.leaf(&Tensor::new(shape, data.to_vec()).unwrap().with_grad())
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut tape = Tape::new();
        let i = leaf(&mut tape, &[2, 2], &[1., 0., 0., 1.]);
        let b = leaf(&mut tape, &[2, 2], &[3., 4., 5., 6.]);
        let c = tape.matmul(i, b).unwrap();
        assert_eq!(tape.value(c), &[3., 4., 5., 6.]);
        let r = leaf(&mut tape, &[1, 2], &[1., 2.]);
        let col = leaf(&mut tape, &[2, 1], &[3., 4.]);
        let d = tape.matmul(r, col).unwrap();
        assert_eq!(tape.value(d), &[11.]);
    }

    #[test]
    fn matmul_shape_error() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, &[2, 3], &[0.; 6]);
        let b = leaf(&mut tape, &[2, 3], &[0.; 6]);
        assert!(matches!(tape.matmul(a, b), Err(Error::Shape(_))));
    }

    #[test]
    fn softmax_uniform_and_rejects_nan() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, &[3], &[0., 0., 0.]);
        let s = tape.softmax(a).unwrap();
        for v in tape.value(s) {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
        let bad = leaf(&mut tape, &[2], &[f32::NAN, 0.]);
        assert!(matches!(tape.softmax(bad), Err(Error::NonFinite(_))));
    }

    #[test]
    fn relu_and_mean() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, &[3], &[-1., 0., 2.]);
        let r = tape.relu(a);
        assert_eq!(tape.value(r), &[0., 0., 2.]);
        let v = [0.5f32, -1.5, 2.25];
        let copies: Vec<f32> = (0..4).flat_map(|_| v).collect();
        let m = leaf(&mut tape, &[4, 3], &copies);
        let mean = tape.mean_over_dim(m, 0).unwrap();
        assert_eq!(tape.shape(mean), &[3]);
        assert_eq!(tape.value(mean), &v);
    }

    #[test]
    fn layernorm_edge_cases() {
        let mut tape = Tape::new();
        let g = tape.constant(&[2], vec![1., 1.]).unwrap();
        let b = tape.constant(&[2], vec![0., 0.]).unwrap();
        let constant = leaf(&mut tape, &[1, 2], &[3., 3.]);
        let y = tape.layernorm(constant, g, b, 1e-5).unwrap();
        assert_eq!(tape.value(y), &[0., 0.]);
        let pm = leaf(&mut tape, &[1, 2], &[1., -1.]);
        let y = tape.layernorm(pm, g, b, 1e-12).unwrap();
        assert!((tape.value(y)[0] - 1.0).abs() < 1e-5 && (tape.value(y)[1] + 1.0).abs() < 1e-5);
        assert!(tape.layernorm(pm, g, b, 0.0).is_err());
    }

    #[test]
    fn backward_simple_cases() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[4], &[1., -2., 3., 0.5]);
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1., 1., 1., 1.]);

        let sq = tape.mul(x, x).unwrap();
        let half = tape.mul_scalar(sq, 0.5);
        let y = tape.sum(half);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap(), tape.value(x));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[2], &[1., 2.]);
        let e = tape.exp(x);
        assert!(tape.backward(e).is_err());
        let mut frozen = Tape::inference();
        let x = leaf(&mut frozen, &[1], &[1.]);
        assert!(frozen.backward(x).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[2, 2], &[0.3, -0.7, 1.1, 2.0]);
        let w = leaf(&mut tape, &[2, 2], &[0.5, 0.1, -0.2, 0.9]);
        let h = tape.matmul(x, w).unwrap();
        let h = tape.gelu(h);
        let z = tape.mul_scalar(h, 0.0);
        let y = tape.sum(z);
        let g = tape.backward(y).unwrap();
        assert!(g.get(x).unwrap().iter().all(|&v| v == 0.0));
        assert!(g.get(w).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradients_accumulate_until_cleared() {
        let mut t = Tensor::new(&[2], vec![1., 2.]).unwrap().with_grad();
        let mut tape = Tape::new();
        let x = tape.leaf(&t);
        let y = tape.sum(x);
        let g = tape.backward(y).unwrap();
        g.accumulate_into(x, &mut t);
        g.accumulate_into(x, &mut t);
        assert_eq!(t.grad.as_deref(), Some(&[2.0, 2.0][..]));
        t.zero_grad();
        assert!(t.grad.is_none());
    }

    #[test]
    fn replay_matches_forward() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[2, 3], &[0.1, 0.2, -0.3, 0.4, 0.5, -0.6]);
        let s = tape.softmax(x).unwrap();
        let t = tape.transpose_last_two(s).unwrap();
        let y = tape.sum(t);
        let replayed = tape.replay_f64(y, &HashMap::new());
        assert!((replayed[0] - tape.value(y)[0] as f64).abs() < 1e-6);
        assert!((replayed[0] - 2.0).abs() < 1e-12);
    }
}
