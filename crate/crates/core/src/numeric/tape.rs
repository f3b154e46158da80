//! Define-by-run reverse-mode autodiff over [`Matrix`] values.
//!
//! A [`Tape`] records every operation as a node holding its cached forward
//! value. Nodes are appended in evaluation order, so parents always precede
//! children and [`Tape::backward`] is a single reverse sweep.

use super::matrix::{dot, softmax_in_place, Matrix};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    MatMulT(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Hadamard(NodeId, NodeId),
    Scale(NodeId, f64),
    AddRow(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    Transpose(NodeId),
    RowSoftmax(NodeId),
    LayerNorm { input: NodeId, inv_std: Vec<f64> },
    Gelu(NodeId),
    SliceCols { input: NodeId, start: usize },
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    SelectRows { input: NodeId, ids: Vec<usize> },
    SumAll(NodeId),
    RowSums(NodeId),
    CrossEntropy { logits: NodeId, probs: Matrix, targets: Vec<usize> },
    MaskRenormalize { input: NodeId, keep: Vec<bool>, row_mass: Vec<f64> },
}

impl Op {
    fn parents(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b)
            | Op::MatMulT(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Hadamard(a, b)
            | Op::AddRow(a, b)
            | Op::MulRow(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Transpose(a)
            | Op::RowSoftmax(a)
            | Op::Gelu(a)
            | Op::SumAll(a)
            | Op::RowSums(a) => vec![*a],
            Op::LayerNorm { input, .. }
            | Op::SliceCols { input, .. }
            | Op::SelectRows { input, .. }
            | Op::MaskRenormalize { input, .. } => vec![*input],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::ConcatCols(ids) | Op::ConcatRows(ids) => ids.clone(),
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Matrix,
    needs_grad: bool,
}

/// Operation recorder. Rebuilt for every forward pass.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    degenerate_rows: usize,
}

/// Result of [`Tape::backward`]: one gradient per node, shaped like its value.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Matrix>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> &Matrix {
        &self.grads[id.0]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
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

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    /// Parents of a node; always earlier on the tape.
    pub fn parents(&self, id: NodeId) -> Vec<NodeId> {
        self.nodes[id.0].op.parents()
    }

    /// Rows that had no surviving mass in [`Tape::mask_renormalize`] and were
    /// replaced by a uniform row.
    pub fn degenerate_rows(&self) -> usize {
        self.degenerate_rows
    }

    fn push(&mut self, op: Op, value: Matrix) -> NodeId {
        let needs_grad = op.parents().iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Differentiable input (a parameter).
    pub fn var(&mut self, value: Matrix) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            needs_grad: true,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Non-differentiable input. Its gradient is reported as zero.
    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            needs_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b));
        self.push(Op::MatMul(a, b), v)
    }

    /// `a * b^T`.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul_t(self.value(b));
        self.push(Op::MatMulT(a, b), v)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).add(self.value(b));
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).sub(self.value(b));
        self.push(Op::Sub(a, b), v)
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).hadamard(self.value(b));
        self.push(Op::Hadamard(a, b), v)
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a).scale(s);
        self.push(Op::Scale(a, s), v)
    }

    /// Adds a 1×c row to every row of an r×c matrix.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (x, r) = (self.value(a), self.value(row));
        assert_eq!(r.shape(), (1, x.cols()), "add_row expects a 1x{} row", x.cols());
        let v = Matrix::from_fn(x.rows(), x.cols(), |i, j| x[(i, j)] + r[(0, j)]);
        self.push(Op::AddRow(a, row), v)
    }

    /// Multiplies every row of an r×c matrix elementwise by a 1×c row.
    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (x, r) = (self.value(a), self.value(row));
        assert_eq!(r.shape(), (1, x.cols()), "mul_row expects a 1x{} row", x.cols());
        let v = Matrix::from_fn(x.rows(), x.cols(), |i, j| x[(i, j)] * r[(0, j)]);
        self.push(Op::MulRow(a, row), v)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).transpose();
        self.push(Op::Transpose(a), v)
    }

    pub fn row_softmax(&mut self, a: NodeId) -> NodeId {
        let v = super::matrix::row_softmax(self.value(a));
        self.push(Op::RowSoftmax(a), v)
    }

    /// Per-row standardization (population variance), no affine part.
    pub fn layer_norm(&mut self, a: NodeId, eps: f64) -> NodeId {
        let x = self.value(a);
        let mut out = x.clone();
        let mut inv_std = Vec::with_capacity(x.rows());
        for i in 0..x.rows() {
            let row = out.row_mut(i);
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let s = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * s;
            }
            inv_std.push(s);
        }
        self.push(Op::LayerNorm { input: a, inv_std }, out)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self
            .value(a)
            .map(|x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()));
        self.push(Op::Gelu(a), v)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let v = self.value(a).slice_cols(start, len);
        self.push(Op::SliceCols { input: a, start }, v)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for p in parts {
            let m = self.value(*p);
            assert_eq!(m.rows(), rows, "concat_cols row mismatch");
            for i in 0..rows {
                out.row_mut(i)[offset..offset + m.cols()].copy_from_slice(m.row(i));
            }
            offset += m.cols();
        }
        self.push(Op::ConcatCols(parts.to_vec()), out)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let m = self.value(*p);
            assert_eq!(m.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(m.data());
            rows += m.rows();
        }
        let out = Matrix::from_vec(rows, cols, data).expect("consistent concat");
        self.push(Op::ConcatRows(parts.to_vec()), out)
    }

    /// Gathers rows by index (embedding lookup, CLS selection).
    pub fn select_rows(&mut self, a: NodeId, ids: &[usize]) -> NodeId {
        let v = self.value(a).select_rows(ids);
        self.push(
            Op::SelectRows {
                input: a,
                ids: ids.to_vec(),
            },
            v,
        )
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let v = Matrix::scalar(self.value(a).sum());
        self.push(Op::SumAll(a), v)
    }

    /// r×c → r×1.
    pub fn row_sums(&mut self, a: NodeId) -> NodeId {
        let v = Matrix::col_vector(&self.value(a).row_sums());
        self.push(Op::RowSums(a), v)
    }

    /// Mean over rows of `-log softmax(logits)[target]`, as a 1×1 node.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> NodeId {
        let x = self.value(logits);
        assert_eq!(x.rows(), targets.len(), "one target per logit row");
        let probs = super::matrix::row_softmax(x);
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            assert!(t < x.cols(), "target {t} out of range for {} classes", x.cols());
            let row = x.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
        }
        loss /= targets.len() as f64;
        self.push(
            Op::CrossEntropy {
                logits,
                probs,
                targets: targets.to_vec(),
            },
            Matrix::scalar(loss),
        )
    }

    /// Zeroes the columns with `keep[j] == false` and renormalizes each row to
    /// sum to one. A row left with no mass becomes uniform (counted in
    /// [`Tape::degenerate_rows`]).
    pub fn mask_renormalize(&mut self, a: NodeId, keep: &[bool]) -> NodeId {
        let x = self.value(a);
        assert_eq!(keep.len(), x.cols(), "mask length must match columns");
        let mut out = Matrix::zeros(x.rows(), x.cols());
        let mut row_mass = Vec::with_capacity(x.rows());
        let mut degenerate = 0;
        for i in 0..x.rows() {
            let mass: f64 = x.row(i).iter().zip(keep).filter(|(_, k)| **k).map(|(v, _)| v).sum();
            let row = out.row_mut(i);
            if mass > 0.0 {
                for (j, o) in row.iter_mut().enumerate() {
                    if keep[j] {
                        *o = x[(i, j)] / mass;
                    }
                }
            } else {
                degenerate += 1;
                let u = 1.0 / row.len() as f64;
                row.iter_mut().for_each(|o| *o = u);
            }
            row_mass.push(mass);
        }
        self.degenerate_rows += degenerate;
        self.push(
            Op::MaskRenormalize {
                input: a,
                keep: keep.to_vec(),
                row_mass,
            },
            out,
        )
    }

    /// Reverse sweep from a scalar loss node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let shape = self.value(loss).shape();
        if shape != (1, 1) {
            return Err(Error::Contract(format!(
                "backward requires a 1x1 loss node, got {}x{}",
                shape.0, shape.1
            )));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.unwrap_or_else(|| Matrix::zeros(n.value.rows(), n.value.cols())))
            .collect();
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], id: NodeId, delta: Matrix) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(g) => g.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, op: &Op, out: &Matrix, g: &Matrix, grads: &mut [Option<Matrix>]) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.nodes[a.0].needs_grad {
                    self.accumulate(grads, *a, g.matmul_t(bv));
                }
                if self.nodes[b.0].needs_grad {
                    self.accumulate(grads, *b, av.t_matmul(g));
                }
            }
            Op::MatMulT(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.nodes[a.0].needs_grad {
                    self.accumulate(grads, *a, g.matmul(bv));
                }
                if self.nodes[b.0].needs_grad {
                    self.accumulate(grads, *b, g.t_matmul(av));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.scale(-1.0));
            }
            Op::Hadamard(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, g.hadamard(bv));
                self.accumulate(grads, *b, g.hadamard(av));
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.scale(*s)),
            Op::AddRow(a, r) => {
                self.accumulate(grads, *a, g.clone());
                let sums = g.col_means().iter().map(|m| m * g.rows() as f64).collect::<Vec<_>>();
                self.accumulate(grads, *r, Matrix::row_vector(&sums));
            }
            Op::MulRow(a, r) => {
                let (av, rv) = (self.value(*a), self.value(*r));
                let ga = Matrix::from_fn(g.rows(), g.cols(), |i, j| g[(i, j)] * rv[(0, j)]);
                self.accumulate(grads, *a, ga);
                let mut gr = vec![0.0; g.cols()];
                for i in 0..g.rows() {
                    for (j, acc) in gr.iter_mut().enumerate() {
                        *acc += g[(i, j)] * av[(i, j)];
                    }
                }
                self.accumulate(grads, *r, Matrix::row_vector(&gr));
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()),
            Op::RowSoftmax(a) => {
                let mut dx = Matrix::zeros(out.rows(), out.cols());
                for i in 0..out.rows() {
                    let (y, gy) = (out.row(i), g.row(i));
                    let inner = dot(y, gy);
                    for (j, d) in dx.row_mut(i).iter_mut().enumerate() {
                        *d = y[j] * (gy[j] - inner);
                    }
                }
                self.accumulate(grads, *a, dx);
            }
            Op::LayerNorm { input, inv_std } => {
                let mut dx = Matrix::zeros(out.rows(), out.cols());
                let n = out.cols() as f64;
                for i in 0..out.rows() {
                    let (y, gy) = (out.row(i), g.row(i));
                    let mean_g = gy.iter().sum::<f64>() / n;
                    let mean_gy = dot(gy, y) / n;
                    for (j, d) in dx.row_mut(i).iter_mut().enumerate() {
                        *d = inv_std[i] * (gy[j] - mean_g - y[j] * mean_gy);
                    }
                }
                self.accumulate(grads, *input, dx);
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                let dx = Matrix::from_fn(x.rows(), x.cols(), |i, j| {
                    let v = x[(i, j)];
                    let t = (GELU_C * (v + GELU_A * v * v * v)).tanh();
                    let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                    g[(i, j)] * (0.5 * (1.0 + t) + 0.5 * v * dt)
                });
                self.accumulate(grads, *a, dx);
            }
            Op::SliceCols { input, start } => {
                let x = self.value(*input);
                let mut dx = Matrix::zeros(x.rows(), x.cols());
                for i in 0..g.rows() {
                    dx.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                }
                self.accumulate(grads, *input, dx);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let c = self.value(*p).cols();
                    self.accumulate(grads, *p, g.slice_cols(offset, c));
                    offset += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let r = self.value(*p).rows();
                    let ids: Vec<usize> = (offset..offset + r).collect();
                    self.accumulate(grads, *p, g.select_rows(&ids));
                    offset += r;
                }
            }
            Op::SelectRows { input, ids } => {
                let x = self.value(*input);
                let mut dx = Matrix::zeros(x.rows(), x.cols());
                for (k, &i) in ids.iter().enumerate() {
                    for (d, v) in dx.row_mut(i).iter_mut().zip(g.row(k)) {
                        *d += v;
                    }
                }
                self.accumulate(grads, *input, dx);
            }
            Op::SumAll(a) => {
                let x = self.value(*a);
                self.accumulate(grads, *a, Matrix::filled(x.rows(), x.cols(), g.item()));
            }
            Op::RowSums(a) => {
                let x = self.value(*a);
                let dx = Matrix::from_fn(x.rows(), x.cols(), |i, _| g[(i, 0)]);
                self.accumulate(grads, *a, dx);
            }
            Op::CrossEntropy {
                logits,
                probs,
                targets,
            } => {
                let scale = g.item() / targets.len() as f64;
                let mut dx = probs.clone();
                for (i, &t) in targets.iter().enumerate() {
                    dx[(i, t)] -= 1.0;
                }
                self.accumulate(grads, *logits, dx.scale(scale));
            }
            Op::MaskRenormalize {
                input,
                keep,
                row_mass,
            } => {
                let mut dx = Matrix::zeros(out.rows(), out.cols());
                for i in 0..out.rows() {
                    if row_mass[i] <= 0.0 {
                        continue;
                    }
                    let inner = dot(g.row(i), out.row(i));
                    for (j, d) in dx.row_mut(i).iter_mut().enumerate() {
                        if keep[j] {
                            *d = (g[(i, j)] - inner) / row_mass[i];
                        }
                    }
                }
                self.accumulate(grads, *input, dx);
            }
        }
    }
}

/// Softmax of a single slice, exposed for callers that work on raw rows.
pub fn softmax(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    softmax_in_place(&mut v);
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_gradient() {
        let mut t = Tape::new();
        let x = t.constant(Matrix::scalar(2.0));
        let w = t.var(Matrix::scalar(3.0));
        let y = t.hadamard(w, x);
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(w).item(), 2.0);
        assert_eq!(g.get(x).item(), 0.0);
    }

    #[test]
    fn quadratic_gradient() {
        let mut t = Tape::new();
        let w = t.var(Matrix::scalar(4.0));
        let one = t.constant(Matrix::scalar(1.0));
        let d = t.sub(w, one);
        let sq = t.hadamard(d, d);
        let y = t.scale(sq, 0.5);
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(w).item(), 3.0);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut t = Tape::new();
        let w = t.var(Matrix::zeros(2, 1));
        assert!(matches!(t.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn non_ancestors_get_zero_gradients() {
        let mut t = Tape::new();
        let a = t.var(Matrix::filled(2, 2, 1.0));
        let b = t.var(Matrix::filled(3, 1, 5.0));
        let s = t.sum_all(a);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(b), &Matrix::zeros(3, 1));
        assert_eq!(g.get(a), &Matrix::filled(2, 2, 1.0));
    }

    #[test]
    fn parents_precede_children() {
        let mut t = Tape::new();
        let a = t.var(Matrix::filled(2, 2, 1.0));
        let b = t.row_softmax(a);
        let c = t.matmul(b, a);
        for id in [b, c] {
            for p in t.parents(id) {
                assert!(p < id);
            }
        }
    }

    #[test]
    fn mask_renormalize_uniform_fallback() {
        let mut t = Tape::new();
        let a = t.var(Matrix::from_rows(&[vec![1.0, 0.0], vec![0.5, 0.5]]).unwrap());
        let m = t.mask_renormalize(a, &[false, true]);
        assert_eq!(t.value(m).row(0), &[0.5, 0.5]);
        assert_eq!(t.value(m).row(1), &[0.0, 1.0]);
        assert_eq!(t.degenerate_rows(), 1);
    }
}
