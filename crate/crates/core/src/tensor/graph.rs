//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Nodes are appended in evaluation order, so the node vector is already a
//! topological order; the backward pass walks it once in reverse.

use std::sync::Arc;

use super::dense::{gemm, log_softmax_row, softmax_row, Tensor};
use crate::error::{Error, Result};

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Abs(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    MaskedSoftmax(Var),
    LogSoftmax(Var),
    GatherRows {
        table: Var,
        index: Vec<Option<usize>>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Select {
        x: Var,
        index: Vec<usize>,
    },
    Sum(Var),
    KlRows {
        logits: Var,
        reference: Arc<Tensor>,
        probs: Tensor,
        log_probs: Tensor,
    },
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::MatMulBt(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Gelu(a)
            | Op::Abs(a)
            | Op::MaskedSoftmax(a)
            | Op::LogSoftmax(a)
            | Op::Sum(a) => vec![*a],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::GatherRows { table, .. } => vec![*table],
            Op::SliceCols { x, .. } | Op::Select { x, .. } => vec![*x],
            Op::ConcatCols(parts) => parts.clone(),
            Op::KlRows { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// A recorded computation. Build it with the op methods, then call
/// [`Graph::backward`] on a single-element output.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, or zeros of `shape` if nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn value_arc(&self, v: Var) -> Arc<Tensor> {
        Arc::clone(&self.nodes[v.0].value)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let needs_grad = op.parents().iter().any(|p| self.nodes[p.0].needs_grad);
        self.push_with(Arc::new(value), op, needs_grad)
    }

    fn push_with(&mut self, value: Arc<Tensor>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Arc<Tensor>) -> Var {
        self.push_with(value, Op::Leaf, true)
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, value: Arc<Tensor>) -> Var {
        self.push_with(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Arc<Tensor>, requires_grad: bool) -> Var {
        self.push_with(value, Op::Leaf, requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = super::dense::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = super::dense::matmul_bt(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMulBt(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// Adds a length-`n` bias to every row of an `m×n` matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let x = self.value(a);
        let b = self.value(bias);
        let cols = x.cols();
        if b.len() != cols {
            return Err(Error::Dimension(format!(
                "bias of length {} for rows of width {cols}",
                b.len()
            )));
        }
        let mut out = x.clone();
        for r in 0..out.rows() {
            for (o, bb) in out.row_mut(r).iter_mut().zip(b.data()) {
                *o += bb;
            }
        }
        Ok(self.push(out, Op::AddRow(a, bias)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self
            .value(a)
            .map(|x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()));
        self.push(out, Op::Gelu(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::abs);
        self.push(out, Op::Abs(a))
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.cols();
        if self.value(gain).len() != n || self.value(bias).len() != n {
            return Err(Error::Dimension("layer norm parameter width".into()));
        }
        let g = self.value(gain).data().to_vec();
        let b = self.value(bias).data().to_vec();
        let mut xhat = xv.clone();
        let mut out = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(inv);
            for (i, h) in xhat.row_mut(r).iter_mut().enumerate() {
                *h = (row[i] - mean) * inv;
            }
            let hr = xhat.row(r).to_vec();
            for (i, o) in out.row_mut(r).iter_mut().enumerate() {
                *o = hr[i] * g[i] + b[i];
            }
        }
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    /// Row-wise softmax over the entries where `keep` is true; all other
    /// entries are exactly zero. A row with nothing kept is all zeros.
    pub fn masked_softmax(&mut self, a: Var, keep: &[bool]) -> Result<Var> {
        let x = self.value(a);
        if keep.len() != x.len() {
            return Err(Error::Dimension("mask size".into()));
        }
        let cols = x.cols();
        let mut out = Tensor::zeros(x.shape());
        for r in 0..x.rows() {
            let row = x.row(r);
            let mask = &keep[r * cols..(r + 1) * cols];
            let max = row
                .iter()
                .zip(mask)
                .filter(|(_, &k)| k)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let o = out.row_mut(r);
            let mut z = 0.0;
            for i in 0..cols {
                if mask[i] {
                    o[i] = (row[i] - max).exp();
                    z += o[i];
                }
            }
            for v in o.iter_mut() {
                *v /= z;
            }
        }
        Ok(self.push(out, Op::MaskedSoftmax(a)))
    }

    /// Causal row softmax of a square score matrix.
    pub fn causal_softmax(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.value(a).as_matrix()?;
        let keep: Vec<bool> = (0..r * c).map(|i| i % c <= i / c).collect();
        self.masked_softmax(a, &keep)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        for r in 0..x.rows() {
            let ls = log_softmax_row(x.row(r));
            out.row_mut(r).copy_from_slice(&ls);
        }
        self.push(out, Op::LogSoftmax(a))
    }

    /// Rows of `table` picked by `index`; `None` yields a zero row.
    pub fn gather_rows(&mut self, table: Var, index: &[Option<usize>]) -> Result<Var> {
        let t = self.value(table);
        let (rows, cols) = t.as_matrix()?;
        if index.is_empty() {
            return Err(Error::Dimension("empty gather".into()));
        }
        let mut out = Tensor::zeros(&[index.len(), cols]);
        for (i, ix) in index.iter().enumerate() {
            if let Some(ix) = *ix {
                if ix >= rows {
                    return Err(Error::Index(format!("row {ix} of {rows}")));
                }
                out.row_mut(i).copy_from_slice(t.row(ix));
            }
        }
        Ok(self.push(
            out,
            Op::GatherRows {
                table,
                index: index.to_vec(),
            },
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (rows, cols) = t.as_matrix()?;
        if len == 0 || start + len > cols {
            return Err(Error::Dimension(format!(
                "column slice {start}..{} of {cols}",
                start + len
            )));
        }
        let mut out = Tensor::zeros(&[rows, len]);
        for r in 0..rows {
            out.row_mut(r).copy_from_slice(&t.row(r)[start..start + len]);
        }
        Ok(self.push(out, Op::SliceCols { x, start }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).as_matrix()?;
            if r != rows {
                return Err(Error::Dimension("concat row mismatch".into()));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Tensor::zeros(&[rows, total]);
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).clone();
            for r in 0..rows {
                out.row_mut(r)[off..off + w].copy_from_slice(src.row(r));
            }
            off += w;
        }
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    /// Flat gather of individual elements into a vector.
    pub fn select(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if let Some(&bad) = index.iter().find(|&&i| i >= t.len()) {
            return Err(Error::Index(format!("element {bad} of {}", t.len())));
        }
        let data: Vec<f64> = index.iter().map(|&i| t.data()[i]).collect();
        let out = Tensor::vector(data)?;
        Ok(self.push(
            out,
            Op::Select {
                x,
                index: index.to_vec(),
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Per-row `KL(softmax(logits) ‖ exp(reference))`, with `reference`
    /// holding log-probabilities. Output is a vector with one entry per row.
    pub fn kl_rows(&mut self, logits: Var, reference: Arc<Tensor>) -> Result<Var> {
        let z = self.value(logits);
        z.expect_same_shape(&reference)?;
        let mut probs = z.clone();
        let mut log_probs = z.clone();
        let mut kl = Vec::with_capacity(z.rows());
        for r in 0..z.rows() {
            let lp = log_softmax_row(z.row(r));
            let p: Vec<f64> = lp.iter().map(|v| v.exp()).collect();
            let q = reference.row(r);
            kl.push(
                p.iter()
                    .zip(&lp)
                    .zip(q)
                    .map(|((pi, lpi), qi)| pi * (lpi - qi))
                    .sum(),
            );
            probs.row_mut(r).copy_from_slice(&p);
            log_probs.row_mut(r).copy_from_slice(&lp);
        }
        let out = Tensor::vector(kl)?;
        Ok(self.push(
            out,
            Op::KlRows {
                logits,
                reference,
                probs,
                log_probs,
            },
        ))
    }

    /// Backpropagates from a single-element `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.value(output).len() != 1 {
            return Err(Error::Dimension(
                "backward needs a single-element output".into(),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::full(self.value(output).shape(), 1.0));
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(upstream) = grads[i].take() else {
                continue;
            };
            self.propagate(i, &upstream, &mut grads)?;
            grads[i] = Some(upstream);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
        if !self.nodes[v.0].needs_grad {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g)?,
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }

    fn propagate(&self, i: usize, dy: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = av.as_matrix()?;
                let n = bv.cols();
                if self.nodes[a.0].needs_grad {
                    // dA = dY · Bᵀ
                    let da = gemm(dy.data(), m, n, bv.data(), k, false, true);
                    self.accumulate(grads, *a, Tensor::new(av.shape().to_vec(), da)?)?;
                }
                if self.nodes[b.0].needs_grad {
                    // dB = Aᵀ · dY
                    let db = gemm(av.data(), k, m, dy.data(), n, true, false);
                    self.accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), db)?)?;
                }
            }
            Op::MatMulBt(a, b) => {
                // Y = A Bᵀ with A m×k, B n×k
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = av.as_matrix()?;
                let n = bv.rows();
                if self.nodes[a.0].needs_grad {
                    let da = gemm(dy.data(), m, n, bv.data(), k, false, false);
                    self.accumulate(grads, *a, Tensor::new(av.shape().to_vec(), da)?)?;
                }
                if self.nodes[b.0].needs_grad {
                    // dB = dYᵀ · A
                    let db = gemm(dy.data(), n, m, av.data(), k, true, false);
                    self.accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), db)?)?;
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, dy.clone())?;
                self.accumulate(grads, *b, dy.clone())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, dy.clone())?;
                self.accumulate(grads, *b, dy.map(|x| -x))?;
            }
            Op::Mul(a, b) => {
                let da = dy.zip_map(self.value(*b), |g, y| g * y)?;
                let db = dy.zip_map(self.value(*a), |g, x| g * x)?;
                self.accumulate(grads, *a, da)?;
                self.accumulate(grads, *b, db)?;
            }
            Op::AddRow(a, bias) => {
                self.accumulate(grads, *a, dy.clone())?;
                if self.nodes[bias.0].needs_grad {
                    let mut db = vec![0.0; dy.cols()];
                    for r in 0..dy.rows() {
                        for (d, g) in db.iter_mut().zip(dy.row(r)) {
                            *d += g;
                        }
                    }
                    let shape = self.value(*bias).shape().to_vec();
                    self.accumulate(grads, *bias, Tensor::new(shape, db)?)?;
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.accumulate(grads, *a, dy.map(|g| g * s))?;
            }
            Op::Gelu(a) => {
                let dx = dy.zip_map(self.value(*a), |g, x| {
                    let inner = GELU_C * (x + 0.044715 * x * x * x);
                    let t = inner.tanh();
                    let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                    g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)
                })?;
                self.accumulate(grads, *a, dx)?;
            }
            Op::Abs(a) => {
                let dx = dy.zip_map(self.value(*a), |g, x| {
                    if x > 0.0 {
                        g
                    } else if x < 0.0 {
                        -g
                    } else {
                        0.0
                    }
                })?;
                self.accumulate(grads, *a, dx)?;
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let g = self.value(*gain).data();
                let n = xhat.cols();
                let nf = n as f64;
                let mut dx = Tensor::zeros(xhat.shape());
                let mut dg = vec![0.0; n];
                let mut db = vec![0.0; n];
                for r in 0..xhat.rows() {
                    let dyr = dy.row(r);
                    let xh = xhat.row(r);
                    let dxhat: Vec<f64> = (0..n).map(|j| dyr[j] * g[j]).collect();
                    let s1: f64 = dxhat.iter().sum();
                    let s2: f64 = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum();
                    let inv = inv_std[r];
                    for (j, d) in dx.row_mut(r).iter_mut().enumerate() {
                        *d = inv / nf * (nf * dxhat[j] - s1 - xh[j] * s2);
                    }
                    for j in 0..n {
                        dg[j] += dyr[j] * xh[j];
                        db[j] += dyr[j];
                    }
                }
                self.accumulate(grads, *x, dx)?;
                let gs = self.value(*gain).shape().to_vec();
                let bs = self.value(*bias).shape().to_vec();
                self.accumulate(grads, *gain, Tensor::new(gs, dg)?)?;
                self.accumulate(grads, *bias, Tensor::new(bs, db)?)?;
            }
            Op::MaskedSoftmax(a) => {
                let y = &node.value;
                let mut dx = Tensor::zeros(y.shape());
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = dy.row(r);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (j, d) in dx.row_mut(r).iter_mut().enumerate() {
                        *d = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *a, dx)?;
            }
            Op::LogSoftmax(a) => {
                let y = &node.value;
                let mut dx = Tensor::zeros(y.shape());
                for r in 0..y.rows() {
                    let gr = dy.row(r);
                    let total: f64 = gr.iter().sum();
                    let p = y.row(r);
                    for (j, d) in dx.row_mut(r).iter_mut().enumerate() {
                        *d = gr[j] - p[j].exp() * total;
                    }
                }
                self.accumulate(grads, *a, dx)?;
            }
            Op::GatherRows { table, index } => {
                if self.nodes[table.0].needs_grad {
                    let shape = self.value(*table).shape().to_vec();
                    let mut dt = Tensor::zeros(&shape);
                    for (i, ix) in index.iter().enumerate() {
                        if let Some(ix) = *ix {
                            for (d, g) in dt.row_mut(ix).iter_mut().zip(dy.row(i)) {
                                *d += g;
                            }
                        }
                    }
                    self.accumulate(grads, *table, dt)?;
                }
            }
            Op::SliceCols { x, start } => {
                let shape = self.value(*x).shape().to_vec();
                let mut dx = Tensor::zeros(&shape);
                let w = dy.cols();
                for r in 0..dy.rows() {
                    dx.row_mut(r)[*start..*start + w].copy_from_slice(dy.row(r));
                }
                self.accumulate(grads, *x, dx)?;
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let shape = self.value(p).shape().to_vec();
                    let w = *shape.last().unwrap();
                    if self.nodes[p.0].needs_grad {
                        let mut dp = Tensor::zeros(&shape);
                        for r in 0..dy.rows() {
                            dp.row_mut(r).copy_from_slice(&dy.row(r)[off..off + w]);
                        }
                        self.accumulate(grads, p, dp)?;
                    }
                    off += w;
                }
            }
            Op::Select { x, index } => {
                let shape = self.value(*x).shape().to_vec();
                let mut dx = Tensor::zeros(&shape);
                for (&ix, g) in index.iter().zip(dy.data()) {
                    dx.data_mut()[ix] += g;
                }
                self.accumulate(grads, *x, dx)?;
            }
            Op::Sum(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, Tensor::full(&shape, dy.item()))?;
            }
            Op::KlRows {
                logits,
                reference,
                probs,
                log_probs,
            } => {
                let kl = &node.value;
                let mut dz = Tensor::zeros(probs.shape());
                for r in 0..probs.rows() {
                    let g = dy.data()[r];
                    let (p, lp, q) = (probs.row(r), log_probs.row(r), reference.row(r));
                    let k = kl.data()[r];
                    for (j, d) in dz.row_mut(r).iter_mut().enumerate() {
                        *d = g * p[j] * (lp[j] - q[j] - k);
                    }
                }
                self.accumulate(grads, *logits, dz)?;
            }
        }
        Ok(())
    }
}

/// Softmax cross-entropy of a single logit vector against `target`.
pub fn softmax_cross_entropy(g: &mut Graph, logits: Var, target: usize) -> Result<Var> {
    let n = g.value(logits).len();
    if target >= n {
        return Err(Error::Index(format!("target {target} of {n} classes")));
    }
    let lp = g.log_softmax(logits);
    let picked = g.select(lp, &[target])?;
    let s = g.sum(picked);
    Ok(g.neg(s))
}

/// Plain-value softmax helper used outside the graph.
pub fn softmax(values: &[f64]) -> Vec<f64> {
    softmax_row(values)
}
