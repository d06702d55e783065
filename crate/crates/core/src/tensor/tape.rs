use std::sync::Arc;

use super::{gemm_acc, Result, Tensor, TensorError};

/// Index value in a gather map meaning "emit zero" (used for zero padding).
pub const GATHER_ZERO: usize = usize::MAX;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRowBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    SoftmaxRows(Var, f64),
    ConcatCols(Vec<Var>),
    Gather(Var, Arc<[usize]>),
    Sum(Var),
    CrossEntropy(Var, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Append-only record of primitive operations. Nodes are stored in creation
/// order, which is a topological order of the computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn dim_err(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::Dimension { op, lhs: a.shape().to_vec(), rhs: b.shape().to_vec() }
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

    fn push(&mut self, mut value: Tensor, op: Op, requires_grad: bool) -> Var {
        value.requires_grad = requires_grad;
        value.grad = None;
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    /// Records a leaf. Its `requires_grad` flag decides whether adjoints reach it.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let rg = value.requires_grad;
        self.push(value, Op::Leaf, rg)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient accumulated on `v` by the last [`Tape::backward`] call.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let out = ta.matmul(tb).map_err(|_| dim_err("matmul", ta, tb))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transposed();
        let rg = self.rg(a);
        self.push(out, Op::Transpose(a), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(dim_err("add", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Adds a length-`c` bias to every row of an `r×c` matrix.
    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        let c = ta.cols();
        if tb.len() != c {
            return Err(dim_err("add_row_bias", ta, tb));
        }
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(c) {
            for (x, b) in row.iter_mut().zip(tb.data()) {
                *x += b;
            }
        }
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(out, Op::AddRowBias(a, bias), rg))
    }

    /// Elementwise (Hadamard) product of equal shapes.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(dim_err("mul", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x * s).collect();
        let out = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let out = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(out, Op::Relu(a), rg)
    }

    /// Row-wise softmax of `a / scale`, stabilized by subtracting the row max.
    pub fn softmax_rows(&mut self, a: Var, scale: f64) -> Result<Var> {
        if !(scale > 0.0) {
            return Err(TensorError::Argument(format!("softmax scale must be positive, got {scale}")));
        }
        let out = softmax_rows_value(self.value(a), scale);
        let rg = self.rg(a);
        Ok(self.push(out, Op::SoftmaxRows(a, scale), rg))
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Argument("concat of zero tensors".into()))?;
        let rows = self.value(*first).rows();
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(dim_err("concat_cols", self.value(*first), self.value(p)));
            }
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::new(vec![rows, total], data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// `out.flat[k] = a.flat[map[k]]`, or zero where `map[k] == GATHER_ZERO`.
    pub fn gather(&mut self, a: Var, map: Arc<[usize]>, shape: Vec<usize>) -> Result<Var> {
        let ta = self.value(a);
        let n: usize = shape.iter().product();
        if n != map.len() {
            return Err(TensorError::Argument(format!(
                "gather map has {} entries for output shape {shape:?}",
                map.len()
            )));
        }
        let src = ta.data();
        let mut data = Vec::with_capacity(n);
        for &i in map.iter() {
            if i == GATHER_ZERO {
                data.push(0.0);
            } else if i < src.len() {
                data.push(src[i]);
            } else {
                return Err(TensorError::Argument(format!(
                    "gather index {i} out of range for {:?}",
                    ta.shape()
                )));
            }
        }
        let out = Tensor::new(shape, data)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Gather(a, map), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(out, Op::Sum(a), rg)
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let (b, k) = (t.rows(), t.cols());
        if labels.len() != b {
            return Err(TensorError::Argument(format!(
                "{} labels for {b} logit rows",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(TensorError::Argument(format!("label {bad} outside [0, {k})")));
        }
        let mut total = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = t.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[label];
        }
        let out = Tensor::scalar(total / b as f64);
        let rg = self.rg(logits);
        Ok(self.push(out, Op::CrossEntropy(logits, labels.to_vec()), rg))
    }

    /// Replays adjoints from a scalar `loss`, storing gradients on every
    /// node that requires them. Each node is visited once, in reverse order.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(TensorError::Argument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].value.requires_grad {
                continue;
            }
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            node.value.grad = if node.value.requires_grad { g } else { None };
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].value.requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                acc(*a, &mut |ga| {
                    // dA = dC · Bᵀ
                    gemm_acc(m, n, k, g, (n, 1), tb.data(), (1, n), ga);
                });
                acc(*b, &mut |gb| {
                    // dB = Aᵀ · dC
                    gemm_acc(k, m, n, ta.data(), (1, k), g, (n, 1), gb);
                });
            }
            Op::Transpose(a) => {
                let (r, c) = (self.value(*a).rows(), self.value(*a).cols());
                acc(*a, &mut |ga| {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    acc(*v, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                }
            }
            Op::AddRowBias(a, bias) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                let c = self.value(*a).cols();
                acc(*bias, &mut |gb| {
                    for row in g.chunks(c) {
                        gb.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                acc(*a, &mut |ga| {
                    for ((x, gy), bv) in ga.iter_mut().zip(g).zip(tb.data()) {
                        *x += gy * bv;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((x, gy), av) in gb.iter_mut().zip(g).zip(ta.data()) {
                        *x += gy * av;
                    }
                });
            }
            Op::Scale(a, s) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += s * y));
            }
            Op::Relu(a) => {
                let ta = self.value(*a);
                acc(*a, &mut |ga| {
                    for ((x, gy), av) in ga.iter_mut().zip(g).zip(ta.data()) {
                        if *av > 0.0 {
                            *x += gy;
                        }
                    }
                });
            }
            Op::SoftmaxRows(a, scale) => {
                let y = &node.value;
                let c = y.cols();
                acc(*a, &mut |ga| {
                    for (r, (g_row, y_row)) in g.chunks(c).zip(y.data().chunks(c)).enumerate() {
                        let dot: f64 = g_row.iter().zip(y_row).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            ga[r * c + j] += y_row[j] * (g_row[j] - dot) / scale;
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let pc = self.value(p).cols();
                    acc(p, &mut |gp| {
                        for (r, row) in g.chunks(total).enumerate() {
                            for j in 0..pc {
                                gp[r * pc + j] += row[offset + j];
                            }
                        }
                    });
                    offset += pc;
                }
            }
            Op::Gather(a, map) => {
                acc(*a, &mut |ga| {
                    for (&i, gy) in map.iter().zip(g) {
                        if i != GATHER_ZERO {
                            ga[i] += gy;
                        }
                    }
                });
            }
            Op::Sum(a) => {
                acc(*a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0]));
            }
            Op::CrossEntropy(logits, labels) => {
                let t = self.value(*logits);
                let (b, k) = (t.rows(), t.cols());
                acc(*logits, &mut |gl| {
                    for (r, &label) in labels.iter().enumerate() {
                        let row = t.row(r);
                        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
                        for j in 0..k {
                            let p = (row[j] - max).exp() / z;
                            let target = if j == label { 1.0 } else { 0.0 };
                            gl[r * k + j] += g[0] * (p - target) / b as f64;
                        }
                    }
                });
            }
        }
    }
}

pub(crate) fn softmax_rows_value(t: &Tensor, scale: f64) -> Tensor {
    let c = t.cols();
    let mut data = Vec::with_capacity(t.len());
    for row in t.data().chunks(c) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let start = data.len();
        let mut z = 0.0;
        for &x in row {
            let e = ((x - max) / scale).exp();
            z += e;
            data.push(e);
        }
        for e in &mut data[start..] {
            *e /= z;
        }
    }
    Tensor::new(t.shape().to_vec(), data).expect("same shape")
}
