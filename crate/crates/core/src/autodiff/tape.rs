//! Reverse-mode tape.
//!
//! Every operation appends a node holding its value and the parent handles
//! its backward rule needs; [`Tape::backward`] walks the nodes in reverse.
//! Nodes that do not depend on any leaf are never differentiated.

use std::sync::Arc;

use nalgebra::DMatrix;

use super::tensor::{gemm, Tensor};
use crate::linalg::min_sym_eigenvalue;
use crate::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Rows = 0,
    Cols = 1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bcast {
    Same,
    Row,
    Scalar,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    Linear(Var, Var, Var),
    Add(Var, Var, Bcast),
    Sub(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    Div(Var, Var, Bcast),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Softmax(Var, Axis),
    Concat(Vec<Var>, Axis),
    Sum(Var, Option<Axis>),
    Mean(Var, Option<Axis>),
    Transpose(Var),
    Reshape(Var),
    GatherRows(Var, Arc<[usize]>),
    SegmentSum(Var, Arc<[usize]>),
    SliceCols(Var, usize),
    ScaleRows(Var, Var),
    L2NormalizeRows(Var),
    Inverse(Var),
    Trace(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients of one backward pass, addressable by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of `v`; zeros when `v` is not on any path to the output.
    pub fn get(&self, v: Var) -> Tensor {
        self.grads[v.0].clone().unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        self.grads[v.0].take().unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn bcast(a: &Tensor, b: &Tensor, op: &str) -> Result<Bcast> {
    let (m, n) = a.dims()?;
    let (p, q) = b.dims()?;
    if (p, q) == (m, n) {
        Ok(Bcast::Same)
    } else if (p, q) == (1, 1) {
        Ok(Bcast::Scalar)
    } else if p == 1 && q == n {
        Ok(Bcast::Row)
    } else {
        Err(Error::Shape(format!("{op} of {:?} and {:?}", a.shape(), b.shape())))
    }
}

#[inline]
/// `1 - 2 / (exp(2x) + 1)`: absolute error near machine epsilon, cheaper than libm.
fn fast_tanh(x: f64) -> f64 {
    1.0 - 2.0 / ((2.0 * x).exp() + 1.0)
}

fn b_index(mode: Bcast, idx: usize, cols: usize) -> usize {
    match mode {
        Bcast::Same => idx,
        Bcast::Row => idx % cols,
        Bcast::Scalar => 0,
    }
}

/// Reduces a full-size gradient to the shape of a broadcast operand.
fn reduce_to(mode: Bcast, g: Vec<f64>, rows: usize, cols: usize) -> Tensor {
    match mode {
        Bcast::Same => Tensor::matrix(rows, cols, g).expect("same shape"),
        Bcast::Row => {
            let mut out = vec![0.0; cols];
            for r in 0..rows {
                for (o, v) in out.iter_mut().zip(&g[r * cols..(r + 1) * cols]) {
                    *o += v;
                }
            }
            Tensor::matrix(1, cols, out).expect("row")
        }
        Bcast::Scalar => Tensor::scalar(g.iter().sum()),
    }
}

fn col_sums(g: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for r in 0..rows {
        for (o, v) in out.iter_mut().zip(&g[r * cols..(r + 1) * cols]) {
            *o += v;
        }
    }
    out
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

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Constant, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var], name: &str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("output of {name}")));
        }
        let needs_grad = parents.iter().any(|&p| self.needs(p));
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.val(a).matmul(self.val(b))?;
        self.push(out, Op::MatMul(a, b), &[a, b], "matmul")
    }

    /// `x @ w + b` with `b` a `[1, n]` row.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (m, k) = self.val(x).dims()?;
        let (k2, n) = self.val(w).dims()?;
        let (br, bc) = self.val(b).dims()?;
        if k != k2 || br != 1 || bc != n {
            return Err(Error::Shape(format!(
                "linear of {:?} @ {:?} + {:?}",
                self.val(x).shape(),
                self.val(w).shape(),
                self.val(b).shape()
            )));
        }
        let bias = self.val(b).data();
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(bias);
        }
        gemm(m, k, n, self.val(x).data(), false, self.val(w).data(), false, &mut out, 1.0);
        self.push(Tensor::matrix(m, n, out)?, Op::Linear(x, w, b), &[x, w, b], "linear")
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, Bcast)> {
        let (av, bv) = (self.val(a), self.val(b));
        let mode = bcast(av, bv, name)?;
        let cols = av.cols();
        let bd = bv.data();
        let data = match mode {
            Bcast::Same => av.data().iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
            Bcast::Row => av.data().chunks(cols).flat_map(|r| r.iter().zip(bd).map(|(&x, &y)| f(x, y))).collect(),
            Bcast::Scalar => av.data().iter().map(|&x| f(x, bd[0])).collect(),
        };
        Ok((Tensor::new(av.shape().to_vec(), data)?, mode))
    }

    /// Elementwise sum; `b` may also be a `[1, n]` row or a `[1, 1]` scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, m) = self.binary(a, b, "add", |x, y| x + y)?;
        self.push(t, Op::Add(a, b, m), &[a, b], "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, m) = self.binary(a, b, "sub", |x, y| x - y)?;
        self.push(t, Op::Sub(a, b, m), &[a, b], "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, m) = self.binary(a, b, "mul", |x, y| x * y)?;
        self.push(t, Op::Mul(a, b, m), &[a, b], "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, m) = self.binary(a, b, "div", |x, y| x / y)?;
        self.push(t, Op::Div(a, b, m), &[a, b], "div")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = self.val(a).map(|x| c * x);
        self.push(t, Op::Scale(a, c), &[a], "scale")
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = self.val(a).map(|x| x + c);
        self.push(t, Op::AddScalar(a), &[a], "add_scalar")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let t = self.val(a).map(|x| x.max(0.0));
        self.push(t, Op::Relu(a), &[a], "relu")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let t = self.val(a).map(|x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        });
        self.push(t, Op::Sigmoid(a), &[a], "sigmoid")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let t = self.val(a).map(fast_tanh);
        self.push(t, Op::Tanh(a), &[a], "tanh")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let t = self.val(a).map(f64::exp);
        self.push(t, Op::Exp(a), &[a], "exp")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let t = self.val(a).map(f64::ln);
        self.push(t, Op::Log(a), &[a], "log")
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let t = self.val(a).map(f64::sqrt);
        self.push(t, Op::Sqrt(a), &[a], "sqrt")
    }

    pub fn softmax(&mut self, a: Var, axis: Axis) -> Result<Var> {
        let x = self.val(a);
        let (r, c) = x.dims()?;
        let mut out = x.data().to_vec();
        let (outer, inner, stride_o, stride_i) = match axis {
            Axis::Cols => (r, c, c, 1),
            Axis::Rows => (c, r, 1, c),
        };
        for o in 0..outer {
            let idx = |i: usize| o * stride_o + i * stride_i;
            let max = (0..inner).map(|i| out[idx(i)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for i in 0..inner {
                let e = (out[idx(i)] - max).exp();
                out[idx(i)] = e;
                total += e;
            }
            for i in 0..inner {
                out[idx(i)] /= total;
            }
        }
        self.push(Tensor::matrix(r, c, out)?, Op::Softmax(a, axis), &[a], "softmax")
    }

    pub fn concat(&mut self, parts: &[Var], axis: Axis) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let (r0, c0) = self.val(*first).dims()?;
        let dims: Vec<(usize, usize)> = parts.iter().map(|p| self.val(*p).dims()).collect::<Result<_>>()?;
        let out = match axis {
            Axis::Cols => {
                if let Some(bad) = dims.iter().find(|d| d.0 != r0) {
                    return Err(Error::Shape(format!("concat columns of [{r0}, {c0}] and {bad:?}")));
                }
                let total: usize = dims.iter().map(|d| d.1).sum();
                let mut out = Vec::with_capacity(r0 * total);
                for i in 0..r0 {
                    for p in parts {
                        out.extend_from_slice(self.val(*p).row(i));
                    }
                }
                Tensor::matrix(r0, total, out)?
            }
            Axis::Rows => {
                if let Some(bad) = dims.iter().find(|d| d.1 != c0) {
                    return Err(Error::Shape(format!("concat rows of [{r0}, {c0}] and {bad:?}")));
                }
                let total: usize = dims.iter().map(|d| d.0).sum();
                let mut out = Vec::with_capacity(total * c0);
                for p in parts {
                    out.extend_from_slice(self.val(*p).data());
                }
                Tensor::matrix(total, c0, out)?
            }
        };
        self.push(out, Op::Concat(parts.to_vec(), axis), parts, "concat")
    }

    fn reduce_sum(x: &Tensor, axis: Option<Axis>) -> Result<Tensor> {
        let (r, c) = x.dims()?;
        let d = x.data();
        match axis {
            None => Ok(Tensor::scalar(d.iter().sum())),
            Some(Axis::Rows) => Tensor::matrix(1, c, col_sums(d, r, c)),
            Some(Axis::Cols) => Tensor::matrix(r, 1, (0..r).map(|i| d[i * c..(i + 1) * c].iter().sum()).collect()),
        }
    }

    /// Sum over all elements (`None`, giving `[1, 1]`), over rows (`[1, n]`) or columns (`[m, 1]`).
    pub fn sum(&mut self, a: Var, axis: Option<Axis>) -> Result<Var> {
        let t = Self::reduce_sum(self.val(a), axis)?;
        self.push(t, Op::Sum(a, axis), &[a], "sum")
    }

    pub fn mean(&mut self, a: Var, axis: Option<Axis>) -> Result<Var> {
        let x = self.val(a);
        let count = match axis {
            None => x.len(),
            Some(Axis::Rows) => x.rows(),
            Some(Axis::Cols) => x.cols(),
        } as f64;
        let t = Self::reduce_sum(x, axis)?.map(|v| v / count);
        self.push(t, Op::Mean(a, axis), &[a], "mean")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.val(a).transposed()?;
        self.push(t, Op::Transpose(a), &[a], "transpose")
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let t = self.val(a).clone().reshaped(&[rows, cols])?;
        self.push(t, Op::Reshape(a), &[a], "reshape")
    }

    /// `out[e] = a[index[e]]`.
    pub fn gather_rows(&mut self, a: Var, index: Arc<[usize]>) -> Result<Var> {
        let x = self.val(a);
        let (r, c) = x.dims()?;
        if let Some(&bad) = index.iter().find(|&&i| i >= r) {
            return Err(Error::Shape(format!("gather row {bad} from {:?}", x.shape())));
        }
        let mut out = Vec::with_capacity(index.len() * c);
        for &i in index.iter() {
            out.extend_from_slice(x.row(i));
        }
        let t = Tensor::matrix(index.len(), c, out)?;
        self.push(t, Op::GatherRows(a, index), &[a], "gather_rows")
    }

    /// `out[s] = sum of a[e] over e with index[e] == s`, for `s < n_segments`.
    pub fn segment_sum(&mut self, a: Var, index: Arc<[usize]>, n_segments: usize) -> Result<Var> {
        let x = self.val(a);
        let (r, c) = x.dims()?;
        if index.len() != r {
            return Err(Error::Shape(format!("segment index of length {} for {:?}", index.len(), x.shape())));
        }
        if let Some(&bad) = index.iter().find(|&&s| s >= n_segments) {
            return Err(Error::Shape(format!("segment {bad} beyond {n_segments} segments")));
        }
        let mut out = vec![0.0; n_segments * c];
        for (e, &s) in index.iter().enumerate() {
            for (o, v) in out[s * c..(s + 1) * c].iter_mut().zip(x.row(e)) {
                *o += v;
            }
        }
        let t = Tensor::matrix(n_segments, c, out)?;
        self.push(t, Op::SegmentSum(a, index), &[a], "segment_sum")
    }

    /// Columns `[start, end)`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let x = self.val(a);
        let (r, c) = x.dims()?;
        if start >= end || end > c {
            return Err(Error::Shape(format!("columns [{start}, {end}) of {:?}", x.shape())));
        }
        let mut out = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            out.extend_from_slice(&x.row(i)[start..end]);
        }
        let t = Tensor::matrix(r, end - start, out)?;
        self.push(t, Op::SliceCols(a, start), &[a], "slice_cols")
    }

    /// Row `i` of `a` multiplied by `s[i, 0]`.
    pub fn scale_rows(&mut self, a: Var, s: Var) -> Result<Var> {
        let (x, sv) = (self.val(a), self.val(s));
        let (r, c) = x.dims()?;
        if sv.dims()? != (r, 1) {
            return Err(Error::Shape(format!("scale_rows of {:?} by {:?}", x.shape(), sv.shape())));
        }
        let mut out = x.data().to_vec();
        for i in 0..r {
            let f = sv.data()[i];
            out[i * c..(i + 1) * c].iter_mut().for_each(|v| *v *= f);
        }
        let t = Tensor::matrix(r, c, out)?;
        self.push(t, Op::ScaleRows(a, s), &[a, s], "scale_rows")
    }

    /// Each row divided by its Euclidean norm; all-zero rows stay zero.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.val(a);
        let (r, c) = x.dims()?;
        let mut out = x.data().to_vec();
        for i in 0..r {
            let row = &mut out[i * c..(i + 1) * c];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                row.iter_mut().for_each(|v| *v /= norm);
            }
        }
        let t = Tensor::matrix(r, c, out)?;
        self.push(t, Op::L2NormalizeRows(a), &[a], "l2_normalize_rows")
    }

    /// Inverse of a symmetric positive-definite matrix (Cholesky). No regularisation
    /// is applied; callers add their own ridge.
    pub fn inverse(&mut self, a: Var) -> Result<Var> {
        let x = self.val(a);
        let (n, c) = x.dims()?;
        if n != c {
            return Err(Error::Shape(format!("inverse of non-square {:?}", x.shape())));
        }
        let m = DMatrix::from_row_slice(n, n, x.data());
        let scale = m.amax().max(1.0);
        let asym = (&m - m.transpose()).amax();
        if asym > 1e-10 * scale {
            return Err(Error::InvalidInput(format!(
                "inverse input is not symmetric (max asymmetry {asym:.3e})"
            )));
        }
        let inv = match m.clone().cholesky() {
            Some(ch) => ch.inverse(),
            None => return Err(Error::NotPositiveDefinite { min_eigenvalue: min_sym_eigenvalue(&m) }),
        };
        let t = Tensor::matrix(n, n, inv.transpose().as_slice().to_vec())?;
        self.push(t, Op::Inverse(a), &[a], "inverse")
    }

    pub fn trace(&mut self, a: Var) -> Result<Var> {
        let x = self.val(a);
        let (n, c) = x.dims()?;
        if n != c {
            return Err(Error::Shape(format!("trace of non-square {:?}", x.shape())));
        }
        let t = Tensor::scalar((0..n).map(|i| x.at(i, i)).sum());
        self.push(t, Op::Trace(a), &[a], "trace")
    }

    /// Gradients of a scalar output with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let v = self.val(loss);
        if v.len() != 1 {
            return Err(Error::Shape(format!("backward needs a scalar loss, got {:?}", v.shape())));
        }
        self.backward_from(loss, Tensor::full(v.shape(), 1.0))
    }

    /// Vector-Jacobian product: propagates `seed` (shaped like `output`) to every node.
    pub fn backward_from(&self, output: Var, seed: Tensor) -> Result<Gradients> {
        if seed.shape() != self.val(output).shape() {
            return Err(Error::Shape(format!(
                "seed {:?} for output {:?}",
                seed.shape(),
                self.val(output).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(seed);
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf | Op::Constant) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads)?;
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let y = &self.nodes[idx].value;
        let gd = g.data();
        match &self.nodes[idx].op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let (m, k) = av.dims()?;
                let n = bv.cols();
                if self.needs(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, gd, false, bv.data(), true, &mut da, 0.0);
                    self.accumulate(grads, *a, Tensor::matrix(m, k, da)?);
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, av.data(), true, gd, false, &mut db, 0.0);
                    self.accumulate(grads, *b, Tensor::matrix(k, n, db)?);
                }
            }
            Op::Linear(x, w, b) => {
                let (xv, wv) = (self.val(*x), self.val(*w));
                let (m, k) = xv.dims()?;
                let n = wv.cols();
                if self.needs(*x) {
                    let mut dx = vec![0.0; m * k];
                    gemm(m, n, k, gd, false, wv.data(), true, &mut dx, 0.0);
                    self.accumulate(grads, *x, Tensor::matrix(m, k, dx)?);
                }
                if self.needs(*w) {
                    let mut dw = vec![0.0; k * n];
                    gemm(k, m, n, xv.data(), true, gd, false, &mut dw, 0.0);
                    self.accumulate(grads, *w, Tensor::matrix(k, n, dw)?);
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, Tensor::matrix(1, n, col_sums(gd, m, n))?);
                }
            }
            Op::Add(a, b, mode) | Op::Sub(a, b, mode) => {
                let sign = if matches!(self.nodes[idx].op, Op::Sub(..)) { -1.0 } else { 1.0 };
                self.accumulate(grads, *a, g.clone());
                if self.needs(*b) {
                    let (r, c) = g.dims()?;
                    let gb: Vec<f64> = gd.iter().map(|v| sign * v).collect();
                    self.accumulate(grads, *b, reduce_to(*mode, gb, r, c));
                }
            }
            Op::Mul(a, b, mode) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let (r, c) = av.dims()?;
                if self.needs(*a) {
                    let da = gd.iter().enumerate().map(|(i, v)| v * bv.data()[b_index(*mode, i, c)]).collect();
                    self.accumulate(grads, *a, Tensor::matrix(r, c, da)?);
                }
                if self.needs(*b) {
                    let db = gd.iter().zip(av.data()).map(|(v, x)| v * x).collect();
                    self.accumulate(grads, *b, reduce_to(*mode, db, r, c));
                }
            }
            Op::Div(a, b, mode) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let (r, c) = av.dims()?;
                if self.needs(*a) {
                    let da = gd.iter().enumerate().map(|(i, v)| v / bv.data()[b_index(*mode, i, c)]).collect();
                    self.accumulate(grads, *a, Tensor::matrix(r, c, da)?);
                }
                if self.needs(*b) {
                    let db = gd
                        .iter()
                        .enumerate()
                        .map(|(i, v)| {
                            let d = bv.data()[b_index(*mode, i, c)];
                            -v * av.data()[i] / (d * d)
                        })
                        .collect();
                    self.accumulate(grads, *b, reduce_to(*mode, db, r, c));
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.map(|v| c * v)),
            Op::AddScalar(a) | Op::Reshape(a) => {
                let shape = self.val(*a).shape().to_vec();
                self.accumulate(grads, *a, g.clone().reshaped(&shape)?);
            }
            Op::Relu(a) => {
                let x = self.val(*a).data();
                let d = gd.iter().zip(x).map(|(v, &x)| if x > 0.0 { *v } else { 0.0 }).collect();
                self.accumulate(grads, *a, Tensor::new(y.shape().to_vec(), d)?);
            }
            Op::Sigmoid(a) => {
                let d = gd.iter().zip(y.data()).map(|(v, s)| v * s * (1.0 - s)).collect();
                self.accumulate(grads, *a, Tensor::new(y.shape().to_vec(), d)?);
            }
            Op::Tanh(a) => {
                let d = gd.iter().zip(y.data()).map(|(v, t)| v * (1.0 - t * t)).collect();
                self.accumulate(grads, *a, Tensor::new(y.shape().to_vec(), d)?);
            }
            Op::Exp(a) => {
                let d = gd.iter().zip(y.data()).map(|(v, e)| v * e).collect();
                self.accumulate(grads, *a, Tensor::new(y.shape().to_vec(), d)?);
            }
            Op::Log(a) => {
                let d = gd.iter().zip(self.val(*a).data()).map(|(v, x)| v / x).collect();
                self.accumulate(grads, *a, Tensor::new(y.shape().to_vec(), d)?);
            }
            Op::Sqrt(a) => {
                let d = gd.iter().zip(y.data()).map(|(v, s)| v / (2.0 * s)).collect();
                self.accumulate(grads, *a, Tensor::new(y.shape().to_vec(), d)?);
            }
            Op::Softmax(a, axis) => {
                let (r, c) = y.dims()?;
                let yd = y.data();
                let mut d = vec![0.0; r * c];
                let (outer, inner, so, si) = match axis {
                    Axis::Cols => (r, c, c, 1),
                    Axis::Rows => (c, r, 1, c),
                };
                for o in 0..outer {
                    let dot: f64 = (0..inner).map(|i| gd[o * so + i * si] * yd[o * so + i * si]).sum();
                    for i in 0..inner {
                        let k = o * so + i * si;
                        d[k] = yd[k] * (gd[k] - dot);
                    }
                }
                self.accumulate(grads, *a, Tensor::matrix(r, c, d)?);
            }
            Op::Concat(parts, axis) => {
                let (r, c) = g.dims()?;
                let mut offset = 0;
                for p in parts {
                    let (pr, pc) = self.val(*p).dims()?;
                    if self.needs(*p) {
                        let piece = match axis {
                            Axis::Cols => {
                                let mut out = Vec::with_capacity(pr * pc);
                                for i in 0..r {
                                    out.extend_from_slice(&gd[i * c + offset..i * c + offset + pc]);
                                }
                                out
                            }
                            Axis::Rows => gd[offset * c..(offset + pr) * c].to_vec(),
                        };
                        self.accumulate(grads, *p, Tensor::matrix(pr, pc, piece)?);
                    }
                    offset += if *axis == Axis::Cols { pc } else { pr };
                }
            }
            Op::Sum(a, axis) | Op::Mean(a, axis) => {
                let (r, c) = self.val(*a).dims()?;
                let count = match (&self.nodes[idx].op, axis) {
                    (Op::Sum(..), _) => 1.0,
                    (_, None) => (r * c) as f64,
                    (_, Some(Axis::Rows)) => r as f64,
                    (_, Some(Axis::Cols)) => c as f64,
                };
                let d = (0..r * c)
                    .map(|k| {
                        let src = match axis {
                            None => 0,
                            Some(Axis::Rows) => k % c,
                            Some(Axis::Cols) => k / c,
                        };
                        gd[src] / count
                    })
                    .collect();
                self.accumulate(grads, *a, Tensor::matrix(r, c, d)?);
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transposed()?),
            Op::GatherRows(a, index) => {
                let (r, c) = self.val(*a).dims()?;
                let mut d = vec![0.0; r * c];
                for (e, &i) in index.iter().enumerate() {
                    for (o, v) in d[i * c..(i + 1) * c].iter_mut().zip(&gd[e * c..(e + 1) * c]) {
                        *o += v;
                    }
                }
                self.accumulate(grads, *a, Tensor::matrix(r, c, d)?);
            }
            Op::SegmentSum(a, index) => {
                let c = g.cols();
                let mut d = Vec::with_capacity(index.len() * c);
                for &s in index.iter() {
                    d.extend_from_slice(&gd[s * c..(s + 1) * c]);
                }
                self.accumulate(grads, *a, Tensor::matrix(index.len(), c, d)?);
            }
            Op::SliceCols(a, start) => {
                let (r, c) = self.val(*a).dims()?;
                let w = g.cols();
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    d[i * c + start..i * c + start + w].copy_from_slice(&gd[i * w..(i + 1) * w]);
                }
                self.accumulate(grads, *a, Tensor::matrix(r, c, d)?);
            }
            Op::ScaleRows(a, s) => {
                let (xv, sv) = (self.val(*a), self.val(*s));
                let (r, c) = xv.dims()?;
                if self.needs(*a) {
                    let mut d = gd.to_vec();
                    for i in 0..r {
                        let f = sv.data()[i];
                        d[i * c..(i + 1) * c].iter_mut().for_each(|v| *v *= f);
                    }
                    self.accumulate(grads, *a, Tensor::matrix(r, c, d)?);
                }
                if self.needs(*s) {
                    let d = (0..r)
                        .map(|i| gd[i * c..(i + 1) * c].iter().zip(xv.row(i)).map(|(g, x)| g * x).sum())
                        .collect();
                    self.accumulate(grads, *s, Tensor::matrix(r, 1, d)?);
                }
            }
            Op::L2NormalizeRows(a) => {
                let xv = self.val(*a);
                let (r, c) = xv.dims()?;
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    let norm = xv.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm == 0.0 {
                        continue;
                    }
                    let yr = y.row(i);
                    let gr = &gd[i * c..(i + 1) * c];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        d[i * c + j] = (gr[j] - yr[j] * dot) / norm;
                    }
                }
                self.accumulate(grads, *a, Tensor::matrix(r, c, d)?);
            }
            Op::Inverse(a) => {
                // d(C^-1) = -C^-1 dC C^-1, so dL/dC = -Y^T G Y^T.
                let yt = y.transposed()?;
                let d = yt.matmul(g)?.matmul(&yt)?.map(|v| -v);
                self.accumulate(grads, *a, d);
            }
            Op::Trace(a) => {
                let n = self.val(*a).rows();
                let mut d = Tensor::zeros(&[n, n]);
                for i in 0..n {
                    d.data_mut()[i * n + i] = gd[0];
                }
                self.accumulate(grads, *a, d);
            }
        }
        Ok(())
    }
}
