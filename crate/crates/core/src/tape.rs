//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! Operations are evaluated eagerly and appended to the tape together with
//! their parents, so node order is always topological. A tape supports exactly
//! one backward pass; after it, gradients of the seeded objective with respect
//! to every recorded node are available through [`Tape::grad_at`].
//!
//! ```
//! use resexp_core::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::scalar(3.0)).unwrap();
//! let y = tape.mul(x, x).unwrap();
//! tape.backward(y, Tensor::scalar(1.0)).unwrap();
//! assert_eq!(tape.grad_at(x).unwrap().data(), &[6.0]);
//! ```

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Row-wise normalization maps with fixed (non-recorded) parameters.
#[derive(Clone, Debug, PartialEq)]
pub enum RowNorm {
    /// `gamma * x / sqrt(|x|^2 / N + eps)`.
    Rms { gamma: Vec<f64>, eps: f64 },
    /// RMS normalization of the centered row.
    Layer { gamma: Vec<f64>, eps: f64 },
    /// Elementwise affine `scale * x + shift` (frozen-statistics BatchNorm).
    Affine { scale: Vec<f64>, shift: Vec<f64> },
}

impl RowNorm {
    fn width(&self) -> usize {
        match self {
            RowNorm::Rms { gamma, .. } | RowNorm::Layer { gamma, .. } => gamma.len(),
            RowNorm::Affine { scale, .. } => scale.len(),
        }
    }

    /// Applies the map to one row.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        match self {
            RowNorm::Rms { gamma, eps } => {
                let s = rms_scale(x, *eps);
                x.iter().zip(gamma).map(|(v, g)| g * v / s).collect()
            }
            RowNorm::Layer { gamma, eps } => {
                let p = centered(x);
                let s = rms_scale(&p, *eps);
                p.iter().zip(gamma).map(|(v, g)| g * v / s).collect()
            }
            RowNorm::Affine { scale, shift } => x
                .iter()
                .zip(scale.iter().zip(shift))
                .map(|(v, (a, b))| a * v + b)
                .collect(),
        }
    }

    /// Vector-Jacobian product for one row.
    fn vjp(&self, x: &[f64], g: &[f64]) -> Vec<f64> {
        match self {
            RowNorm::Rms { gamma, eps } => rms_vjp(x, g, gamma, *eps),
            RowNorm::Layer { gamma, eps } => {
                let p = centered(x);
                let dp = rms_vjp(&p, g, gamma, *eps);
                centered(&dp)
            }
            RowNorm::Affine { scale, .. } => g.iter().zip(scale).map(|(a, b)| a * b).collect(),
        }
    }
}

fn rms_scale(x: &[f64], eps: f64) -> f64 {
    let n = x.len() as f64;
    math::sqrt(x.iter().map(|v| v * v).sum::<f64>() / n + eps)
}

fn centered(x: &[f64]) -> Vec<f64> {
    let m = x.iter().sum::<f64>() / x.len() as f64;
    x.iter().map(|v| v - m).collect()
}

fn rms_vjp(x: &[f64], g: &[f64], gamma: &[f64], eps: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let s = rms_scale(x, eps);
    let proj: f64 = x.iter().zip(g).zip(gamma).map(|((xi, gi), ga)| ga * gi * xi).sum();
    let k = proj / (n * s * s * s);
    x.iter()
        .zip(g)
        .zip(gamma)
        .map(|((xi, gi), ga)| ga * gi / s - xi * k)
        .collect()
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    MatMulT(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Norm(NodeId, RowNorm),
    AppendOnes(NodeId),
    SoftmaxCe(NodeId, Vec<usize>),
    SquaredError(NodeId, Tensor),
    Sum(NodeId),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Option<Vec<Option<Tensor>>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Whether backward has already run on this recording.
    pub fn is_consumed(&self) -> bool {
        self.grads.is_some()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn try_value(&self, id: NodeId) -> Result<&Tensor> {
        self.nodes.get(id.0).map(|n| &n.value).ok_or(Error::UnknownNode(id.0))
    }

    fn check(&self, id: NodeId) -> Result<()> {
        if id.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::UnknownNode(id.0))
        }
    }

    fn push(&mut self, op: Op, value: Tensor, name: &'static str) -> Result<NodeId> {
        if self.grads.is_some() {
            return Err(Error::TapeConsumed);
        }
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        self.nodes.push(Node { op, value });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(Op::Leaf, value, "leaf")
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let v = self.value(a).matmul(self.value(b))?;
        self.push(Op::MatMul(a, b), v, "matmul")
    }

    /// `a * b^T`; the natural form of a batched linear layer `x W^T`.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let v = self.value(a).matmul_t(self.value(b))?;
        self.push(Op::MatMulT(a, b), v, "matmul_t")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let v = self.value(a).add(self.value(b))?;
        self.push(Op::Add(a, b), v, "add")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let v = self.value(a).sub(self.value(b))?;
        self.push(Op::Sub(a, b), v, "sub")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let v = self.value(a).hadamard(self.value(b))?;
        self.push(Op::Mul(a, b), v, "mul")
    }

    /// Adds a single row to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(row)?;
        let (x, r) = (self.value(a), self.value(row));
        if r.rows() != 1 || r.cols() != x.cols() {
            return Err(Error::ShapeMismatch(format!(
                "add_row: {:?} + row {:?}",
                x.shape(),
                r.shape()
            )));
        }
        let mut v = x.clone();
        for i in 0..v.rows() {
            for (o, b) in v.row_mut(i).iter_mut().zip(r.data()) {
                *o += b;
            }
        }
        self.push(Op::AddRow(a, row), v, "add_row")
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.check(a)?;
        let v = self.value(a).scale(c);
        self.push(Op::Scale(a, c), v, "scale")
    }

    /// ReLU with subgradient 0 at 0.
    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let v = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push(Op::Relu(a), v, "relu")
    }

    pub fn norm(&mut self, a: NodeId, norm: RowNorm) -> Result<NodeId> {
        self.check(a)?;
        let x = self.value(a);
        if norm.width() != x.cols() {
            return Err(Error::ShapeMismatch(format!(
                "norm width {} vs input {:?}",
                norm.width(),
                x.shape()
            )));
        }
        let mut data = Vec::with_capacity(x.len());
        for i in 0..x.rows() {
            data.extend(norm.apply(x.row(i)));
        }
        let v = Tensor::new(x.shape().to_vec(), data)?;
        self.push(Op::Norm(a, norm), v, "norm")
    }

    /// Appends a constant-one column.
    pub fn append_ones(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let x = self.value(a);
        let (r, c) = (x.rows(), x.cols());
        let v = Tensor::from_fn(r, c + 1, |i, j| if j < c { x.get(i, j) } else { 1.0 });
        self.push(Op::AppendOnes(a), v, "append_ones")
    }

    /// Summed softmax cross-entropy over the rows of `logits`.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        self.check(logits)?;
        let z = self.value(logits);
        if labels.len() != z.rows() {
            return Err(Error::ShapeMismatch(format!(
                "{} labels for {} rows",
                labels.len(),
                z.rows()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= z.cols()) {
            return Err(Error::ShapeMismatch(format!("label {bad} >= {} classes", z.cols())));
        }
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = z.row(i);
            total += log_sum_exp(row) - row[y];
        }
        self.push(Op::SoftmaxCe(logits, labels.to_vec()), Tensor::scalar(total), "softmax_ce")
    }

    /// `0.5 * |pred - target|_F^2`.
    pub fn squared_error(&mut self, pred: NodeId, target: &Tensor) -> Result<NodeId> {
        self.check(pred)?;
        let d = self.value(pred).sub(target)?;
        let v = 0.5 * d.frobenius_norm_sq();
        self.push(Op::SquaredError(pred, target.clone()), Tensor::scalar(v), "squared_error")
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let v = self.value(a).sum();
        self.push(Op::Sum(a), Tensor::scalar(v), "sum")
    }

    /// Propagates `seed` (the adjoint of `output`) to every recorded node.
    pub fn backward(&mut self, output: NodeId, seed: Tensor) -> Result<()> {
        if self.grads.is_some() {
            return Err(Error::TapeConsumed);
        }
        self.check(output)?;
        if !seed.same_shape(self.value(output)) {
            return Err(Error::ShapeMismatch(format!(
                "seed {:?} vs output {:?}",
                seed.shape(),
                self.value(output).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(seed.reshape(self.value(output).shape())?);

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let contributions = self.vjp(i, &g)?;
            grads[i] = Some(g);
            for (parent, delta) in contributions {
                let slot = &mut grads[parent.0];
                match slot {
                    Some(acc) => acc.axpy(1.0, &delta)?,
                    None => *slot = Some(delta),
                }
            }
        }
        self.grads = Some(grads);
        Ok(())
    }

    /// Gradient of the seeded objective with respect to `id`; zero when no
    /// path connects `id` to the output.
    pub fn grad_at(&self, id: NodeId) -> Result<Tensor> {
        self.check(id)?;
        let grads = self.grads.as_ref().ok_or(Error::BackwardNotRun)?;
        Ok(match &grads[id.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.value(id).shape()),
        })
    }

    fn vjp(&self, i: usize, g: &Tensor) -> Result<Vec<(NodeId, Tensor)>> {
        let val = |id: NodeId| &self.nodes[id.0].value;
        let out = match &self.nodes[i].op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) => vec![(*a, g.matmul_t(val(*b))?), (*b, val(*a).t_matmul(g)?)],
            Op::MatMulT(a, b) => vec![(*a, g.matmul(val(*b))?), (*b, g.t_matmul(val(*a))?)],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.scale(-1.0))],
            Op::Mul(a, b) => vec![(*a, g.hadamard(val(*b))?), (*b, g.hadamard(val(*a))?)],
            Op::AddRow(a, row) => {
                let sums: Vec<f64> = (0..g.cols())
                    .map(|j| (0..g.rows()).map(|r| g.get(r, j)).sum())
                    .collect();
                let shape = val(*row).shape().to_vec();
                vec![(*a, g.clone()), (*row, Tensor::new(shape, sums)?)]
            }
            Op::Scale(a, c) => vec![(*a, g.scale(*c))],
            Op::Relu(a) => {
                let mask = val(*a).map(|x| if x > 0.0 { 1.0 } else { 0.0 });
                vec![(*a, g.hadamard(&mask)?)]
            }
            Op::Norm(a, norm) => {
                let x = val(*a);
                let mut data = Vec::with_capacity(x.len());
                for r in 0..x.rows() {
                    data.extend(norm.vjp(x.row(r), g.row(r)));
                }
                vec![(*a, Tensor::new(x.shape().to_vec(), data)?)]
            }
            Op::AppendOnes(a) => {
                let x = val(*a);
                let c = x.cols();
                vec![(*a, Tensor::new(x.shape().to_vec(), {
                    let mut d = Vec::with_capacity(x.len());
                    for r in 0..x.rows() {
                        d.extend_from_slice(&g.row(r)[..c]);
                    }
                    d
                })?)]
            }
            Op::SoftmaxCe(a, labels) => {
                let s = g.data()[0];
                let z = val(*a);
                let mut d = Vec::with_capacity(z.len());
                for (r, &y) in labels.iter().enumerate() {
                    let p = softmax(z.row(r));
                    d.extend(p.iter().enumerate().map(|(j, pj)| {
                        s * (pj - if j == y { 1.0 } else { 0.0 })
                    }));
                }
                vec![(*a, Tensor::new(z.shape().to_vec(), d)?)]
            }
            Op::SquaredError(a, t) => {
                let s = g.data()[0];
                vec![(*a, val(*a).sub(t)?.scale(s))]
            }
            Op::Sum(a) => {
                let s = g.data()[0];
                vec![(*a, val(*a).map(|_| s))]
            }
        };
        Ok(out)
    }
}

pub fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + math::ln(z.iter().map(|v| math::exp(v - m)).sum::<f64>())
}

/// Max-shifted softmax.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| math::exp(v - m)).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}
