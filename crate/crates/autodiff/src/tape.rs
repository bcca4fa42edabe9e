use std::f64::consts::PI;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{AutodiffError, Result};
use crate::tensor::{gemm, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Arithmetic precision of recorded values.
///
/// `F32` keeps `f64` storage but rounds every recorded value through `f32`,
/// which reproduces single-precision results without a second code path.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Precision {
    #[default]
    F64,
    F32,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    idx: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    Offset(usize),
    Transpose(usize),
    Concat(Vec<usize>),
    Silu(usize),
    Tanh(usize),
    Softmax(usize),
    LogSoftmax(usize),
    Sum(usize),
    Mean(usize),
    SumAxis(usize),
    L2Norm(usize),
    Cosine(usize, usize),
    ClampMin(usize, f64),
    Fourier(usize, usize),
    GatherRows(usize, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records primitive operations in evaluation order and replays them backwards.
///
/// Nodes are appended as operations run, so the inputs of every node precede
/// it and a single reverse sweep visits each node exactly once.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    precision: Precision,
    backward_done: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by variable.
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if `v` required gradients
    /// and the loss depends on it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.idx).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get_mut(v.idx).and_then(Option::take)
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn broadcast_shape(op: &'static str, a: [usize; 2], b: [usize; 2]) -> Result<[usize; 2]> {
    let dim = |x: usize, y: usize| {
        if x == y || y == 1 {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else {
            None
        }
    };
    match (dim(a[0], b[0]), dim(a[1], b[1])) {
        (Some(r), Some(c)) => Ok([r, c]),
        _ => Err(AutodiffError::ShapeMismatch { op, lhs: a, rhs: b }),
    }
}

/// Elementwise `f(a, b)` with rank-2 broadcasting of unit dimensions.
fn zip_broadcast(a: &Tensor, b: &Tensor, out: [usize; 2], f: impl Fn(f64, f64) -> f64) -> Tensor {
    if a.shape() == out && b.shape() == out {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::new(out[0], out[1], data).expect("shape preserved");
    }
    let [ar, ac] = a.shape();
    let [br, bc] = b.shape();
    let mut data = Vec::with_capacity(out[0] * out[1]);
    for i in 0..out[0] {
        let ia = if ar == 1 { 0 } else { i };
        let ib = if br == 1 { 0 } else { i };
        for j in 0..out[1] {
            let ja = if ac == 1 { 0 } else { j };
            let jb = if bc == 1 { 0 } else { j };
            data.push(f(a.data()[ia * ac + ja], b.data()[ib * bc + jb]));
        }
    }
    Tensor::new(out[0], out[1], data).expect("shape preserved")
}

/// Sums a broadcast gradient back down to `shape`.
fn reduce_to(g: Tensor, shape: [usize; 2]) -> Tensor {
    if g.shape() == shape {
        return g;
    }
    let [gr, gc] = g.shape();
    let mut out = Tensor::zeros(shape[0], shape[1]);
    for i in 0..gr {
        let io = if shape[0] == 1 { 0 } else { i };
        for j in 0..gc {
            let jo = if shape[1] == 1 { 0 } else { j };
            let v = out.get(io, jo) + g.get(i, j);
            out.set(io, jo, v);
        }
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for i in 0..x.rows() {
        let row = out.row_mut(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    out
}

fn fourier_row(x: f64, k: usize, out: &mut [f64]) {
    let mut freq = PI;
    for j in 0..k {
        let a = freq * x;
        out[2 * j] = a.sin();
        out[2 * j + 1] = a.cos();
        freq *= 2.0;
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::with_precision(Precision::F64)
    }

    pub fn with_precision(precision: Precision) -> Self {
        Tape { id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new(), precision, backward_done: false }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node so the tape can be reused.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.backward_done = false;
        self.id = NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed);
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable does not belong to this tape");
        &self.nodes[v.idx].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[self.index(v).expect("foreign variable")].needs_grad
    }

    /// Registers a leaf. Gradients are reported only for leaves created with
    /// `requires_grad = true`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn index(&self, v: Var) -> Result<usize> {
        if v.tape == self.id && v.idx < self.nodes.len() {
            Ok(v.idx)
        } else {
            Err(AutodiffError::ForeignVar)
        }
    }

    fn push(&mut self, mut value: Tensor, op: Op, needs_grad: bool) -> Var {
        if self.precision == Precision::F32 {
            for x in value.data_mut() {
                *x = *x as f32 as f64;
            }
        }
        // Nodes that cannot carry gradient do not need their recipe.
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, needs_grad });
        Var { tape: self.id, idx: self.nodes.len() - 1 }
    }

    fn unary(&mut self, x: Var, f: impl FnOnce(&Tensor) -> Tensor, op: impl FnOnce(usize) -> Op) -> Result<Var> {
        let i = self.index(x)?;
        let value = f(&self.nodes[i].value);
        let g = self.nodes[i].needs_grad;
        Ok(self.push(value, op(i), g))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: impl FnOnce(usize, usize) -> Op,
    ) -> Result<Var> {
        let (ia, ib) = (self.index(a)?, self.index(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let out = broadcast_shape(name, va.shape(), vb.shape())?;
        let value = zip_broadcast(va, vb, out, f);
        let g = self.nodes[ia].needs_grad || self.nodes[ib].needs_grad;
        Ok(self.push(value, op(ia, ib), g))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.index(a)?, self.index(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if va.cols() != vb.rows() {
            return Err(AutodiffError::ShapeMismatch { op: "matmul", lhs: va.shape(), rhs: vb.shape() });
        }
        let (m, n) = (va.rows(), vb.cols());
        let mut out = vec![0.0; m * n];
        gemm(va.data(), va.shape(), false, vb.data(), vb.shape(), false, &mut out, false);
        let value = Tensor::new(m, n, out)?;
        let g = self.nodes[ia].needs_grad || self.nodes[ib].needs_grad;
        Ok(self.push(value, Op::MatMul(ia, ib), g))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, |v| v.map(|e| e * c), |i| Op::Scale(i, c))
    }

    /// `x + c` for a constant `c`.
    pub fn offset(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, |v| v.map(|e| e + c), Op::Offset)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Tensor::transpose, Op::Transpose)
    }

    /// Joins tensors side by side along the column axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(AutodiffError::InvalidInput { op: "concat", detail: "no inputs".into() });
        }
        let idx: Vec<usize> = parts.iter().map(|&p| self.index(p)).collect::<Result<_>>()?;
        let rows = self.nodes[idx[0]].value.rows();
        for &i in &idx[1..] {
            let s = self.nodes[i].value.shape();
            if s[0] != rows {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat",
                    lhs: self.nodes[idx[0]].value.shape(),
                    rhs: s,
                });
            }
        }
        let cols: usize = idx.iter().map(|&i| self.nodes[i].value.cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &i in &idx {
                data.extend_from_slice(self.nodes[i].value.row(r));
            }
        }
        let g = idx.iter().any(|&i| self.nodes[i].needs_grad);
        let value = Tensor::new(rows, cols, data)?;
        Ok(self.push(value, Op::Concat(idx), g))
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v.map(|e| e * sigmoid(e)), Op::Silu)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v.map(f64::tanh), Op::Tanh)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.unary(x, softmax_rows, Op::Softmax)
    }

    /// Row-wise log-softmax, computed stably.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        self.unary(
            x,
            |v| {
                let mut out = v.clone();
                for i in 0..v.rows() {
                    let row = out.row_mut(i);
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let lse = m + row.iter().map(|&e| (e - m).exp()).sum::<f64>().ln();
                    for e in row.iter_mut() {
                        *e -= lse;
                    }
                }
                out
            },
            Op::LogSoftmax,
        )
    }

    /// Sum of all entries, as a `1 x 1` tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| Tensor::scalar(v.data().iter().sum()), Op::Sum)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| Tensor::scalar(v.data().iter().sum::<f64>() / v.len() as f64), Op::Mean)
    }

    /// Sum over `axis`: 0 collapses rows (`1 x c`), 1 collapses columns (`r x 1`).
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        if axis > 1 {
            return Err(AutodiffError::InvalidInput {
                op: "sum_axis",
                detail: format!("axis {axis} out of range for rank 2"),
            });
        }
        self.unary(
            x,
            |v| {
                let [r, c] = v.shape();
                if axis == 0 {
                    let mut out = vec![0.0; c];
                    for i in 0..r {
                        for (o, &e) in out.iter_mut().zip(v.row(i)) {
                            *o += e;
                        }
                    }
                    Tensor::new(1, c, out).expect("shape")
                } else {
                    let out = (0..r).map(|i| v.row(i).iter().sum()).collect();
                    Tensor::new(r, 1, out).expect("shape")
                }
            },
            Op::SumAxis,
        )
    }

    /// Euclidean norm of every row, `r x 1`.
    pub fn l2_norm(&mut self, x: Var) -> Result<Var> {
        self.unary(
            x,
            |v| {
                let out = (0..v.rows()).map(|i| v.row(i).iter().map(|e| e * e).sum::<f64>().sqrt()).collect();
                Tensor::new(v.rows(), 1, out).expect("shape")
            },
            Op::L2Norm,
        )
    }

    /// Row-wise cosine similarity of two equally shaped tensors, `r x 1`.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.index(a)?, self.index(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if va.shape() != vb.shape() {
            return Err(AutodiffError::ShapeMismatch { op: "cosine_similarity", lhs: va.shape(), rhs: vb.shape() });
        }
        let mut out = Vec::with_capacity(va.rows());
        for i in 0..va.rows() {
            let (ra, rb) = (va.row(i), vb.row(i));
            let na = ra.iter().map(|e| e * e).sum::<f64>().sqrt();
            let nb = rb.iter().map(|e| e * e).sum::<f64>().sqrt();
            if na == 0.0 || nb == 0.0 {
                return Err(AutodiffError::InvalidInput {
                    op: "cosine_similarity",
                    detail: format!("row {i} has zero norm"),
                });
            }
            let dot: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
            out.push(dot / (na * nb));
        }
        let value = Tensor::new(va.rows(), 1, out)?;
        let g = self.nodes[ia].needs_grad || self.nodes[ib].needs_grad;
        Ok(self.push(value, Op::Cosine(ia, ib), g))
    }

    /// `max(x, threshold)`; the gradient is zero wherever `x <= threshold`.
    pub fn clamp_min(&mut self, x: Var, threshold: f64) -> Result<Var> {
        self.unary(x, |v| v.map(|e| e.max(threshold)), |i| Op::ClampMin(i, threshold))
    }

    /// Maps an `r x 1` column to `r x 2k` sinusoidal features
    /// `[sin(pi x), cos(pi x), sin(2 pi x), cos(2 pi x), ...]`.
    pub fn fourier_features(&mut self, x: Var, k: usize) -> Result<Var> {
        let i = self.index(x)?;
        let v = &self.nodes[i].value;
        if v.cols() != 1 || k == 0 {
            return Err(AutodiffError::InvalidInput {
                op: "fourier_features",
                detail: format!("needs an r x 1 input and k >= 1, got {:?} with k={k}", v.shape()),
            });
        }
        let mut out = Tensor::zeros(v.rows(), 2 * k);
        for r in 0..v.rows() {
            let x = v.data()[r];
            fourier_row(x, k, out.row_mut(r));
        }
        let g = self.nodes[i].needs_grad;
        Ok(self.push(out, Op::Fourier(i, k), g))
    }

    /// Row lookup, the differentiable form of an embedding table.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let i = self.index(table)?;
        let v = &self.nodes[i].value;
        if idx.is_empty() {
            return Err(AutodiffError::InvalidInput { op: "gather_rows", detail: "no indices".into() });
        }
        if let Some(&bad) = idx.iter().find(|&&r| r >= v.rows()) {
            return Err(AutodiffError::InvalidInput {
                op: "gather_rows",
                detail: format!("row {bad} out of range for {} rows", v.rows()),
            });
        }
        let value = v.select_rows(idx);
        let g = self.nodes[i].needs_grad;
        Ok(self.push(value, Op::GatherRows(i, idx.to_vec()), g))
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.backward_done {
            return Err(AutodiffError::BackwardAlreadyRun);
        }
        if self.nodes.is_empty() {
            return Err(AutodiffError::EmptyTape);
        }
        let root = self.index(loss)?;
        let shape = self.nodes[root].value.shape();
        if shape != [1, 1] {
            return Err(AutodiffError::NonScalarLoss { shape });
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root] = Some(Tensor::scalar(1.0));
        for idx in (0..=root).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            if matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
        }
        for (node, slot) in self.nodes.iter().zip(grads.iter_mut()) {
            if !matches!(node.op, Op::Leaf) || !node.needs_grad {
                *slot = None;
            } else if self.precision == Precision::F32 {
                if let Some(t) = slot {
                    for x in t.data_mut() {
                        *x = *x as f32 as f64;
                    }
                }
            }
        }
        Ok(Gradients { tape: self.id, grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], i: usize, g: Tensor) {
        if !self.nodes[i].needs_grad {
            return;
        }
        match &mut grads[i] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let val = |i: usize| &self.nodes[i].value;
        let out_shape = node.value.shape();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                if self.nodes[*a].needs_grad {
                    let mut ga = vec![0.0; va.len()];
                    gemm(g.data(), g.shape(), false, vb.data(), vb.shape(), true, &mut ga, false);
                    self.accumulate(grads, *a, Tensor::new(va.rows(), va.cols(), ga).expect("shape"));
                }
                if self.nodes[*b].needs_grad {
                    let mut gb = vec![0.0; vb.len()];
                    gemm(va.data(), va.shape(), true, g.data(), g.shape(), false, &mut gb, false);
                    self.accumulate(grads, *b, Tensor::new(vb.rows(), vb.cols(), gb).expect("shape"));
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.nodes[*a].needs_grad {
                    self.accumulate(grads, *a, reduce_to(g.clone(), val(*a).shape()));
                }
                if self.nodes[*b].needs_grad {
                    let gb = if sign < 0.0 { g.map(|e| -e) } else { g.clone() };
                    self.accumulate(grads, *b, reduce_to(gb, val(*b).shape()));
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                if self.nodes[*a].needs_grad {
                    let ga = zip_broadcast(g, vb, out_shape, |x, y| x * y);
                    self.accumulate(grads, *a, reduce_to(ga, va.shape()));
                }
                if self.nodes[*b].needs_grad {
                    let gb = zip_broadcast(g, va, out_shape, |x, y| x * y);
                    self.accumulate(grads, *b, reduce_to(gb, vb.shape()));
                }
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                if self.nodes[*a].needs_grad {
                    let ga = zip_broadcast(g, vb, out_shape, |x, y| x / y);
                    self.accumulate(grads, *a, reduce_to(ga, va.shape()));
                }
                if self.nodes[*b].needs_grad {
                    // d(a/b)/db = -(a/b)/b, and a/b is this node's value.
                    let q = zip_broadcast(&node.value, vb, out_shape, |x, y| x / y);
                    let gb = zip_broadcast(g, &q, out_shape, |x, y| -x * y);
                    self.accumulate(grads, *b, reduce_to(gb, vb.shape()));
                }
            }
            Op::Scale(x, c) => self.accumulate(grads, *x, g.map(|e| e * c)),
            Op::Offset(x) => self.accumulate(grads, *x, g.clone()),
            Op::Transpose(x) => self.accumulate(grads, *x, g.transpose()),
            Op::Concat(parts) => {
                let mut start = 0;
                for &p in parts {
                    let c = val(p).cols();
                    if self.nodes[p].needs_grad {
                        let mut data = Vec::with_capacity(g.rows() * c);
                        for r in 0..g.rows() {
                            data.extend_from_slice(&g.row(r)[start..start + c]);
                        }
                        self.accumulate(grads, p, Tensor::new(g.rows(), c, data).expect("shape"));
                    }
                    start += c;
                }
            }
            Op::Silu(x) => {
                let gx = zip_broadcast(g, val(*x), out_shape, |gi, xi| {
                    let s = sigmoid(xi);
                    gi * s * (1.0 + xi * (1.0 - s))
                });
                self.accumulate(grads, *x, gx);
            }
            Op::Tanh(x) => {
                let gx = zip_broadcast(g, &node.value, out_shape, |gi, yi| gi * (1.0 - yi * yi));
                self.accumulate(grads, *x, gx);
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let mut gx = g.clone();
                for r in 0..y.rows() {
                    let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(a, b)| a * b).sum();
                    for (o, (&gi, &yi)) in gx.row_mut(r).iter_mut().zip(g.row(r).iter().zip(y.row(r))) {
                        *o = yi * (gi - dot);
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::LogSoftmax(x) => {
                let y = &node.value;
                let mut gx = g.clone();
                for r in 0..y.rows() {
                    let s: f64 = g.row(r).iter().sum();
                    for (o, (&gi, &yi)) in gx.row_mut(r).iter_mut().zip(g.row(r).iter().zip(y.row(r))) {
                        *o = gi - yi.exp() * s;
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Sum(x) => {
                let [r, c] = val(*x).shape();
                self.accumulate(grads, *x, Tensor::full(r, c, g.data()[0]));
            }
            Op::Mean(x) => {
                let [r, c] = val(*x).shape();
                self.accumulate(grads, *x, Tensor::full(r, c, g.data()[0] / (r * c) as f64));
            }
            Op::SumAxis(x) => {
                let s = val(*x).shape();
                let gx = zip_broadcast(g, &Tensor::full(s[0], s[1], 1.0), s, |gi, _| gi);
                self.accumulate(grads, *x, gx);
            }
            Op::L2Norm(x) => {
                let v = val(*x);
                let mut gx = Tensor::zeros(v.rows(), v.cols());
                for r in 0..v.rows() {
                    let n = node.value.data()[r];
                    if n > 0.0 {
                        let k = g.data()[r] / n;
                        for (o, &e) in gx.row_mut(r).iter_mut().zip(v.row(r)) {
                            *o = k * e;
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Cosine(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let mut ga = Tensor::zeros(va.rows(), va.cols());
                let mut gb = Tensor::zeros(vb.rows(), vb.cols());
                for r in 0..va.rows() {
                    let (ra, rb) = (va.row(r), vb.row(r));
                    let na = ra.iter().map(|e| e * e).sum::<f64>().sqrt();
                    let nb = rb.iter().map(|e| e * e).sum::<f64>().sqrt();
                    let c = node.value.data()[r];
                    let gr = g.data()[r];
                    let inv = 1.0 / (na * nb);
                    for j in 0..ra.len() {
                        ga.row_mut(r)[j] = gr * (rb[j] * inv - c * ra[j] / (na * na));
                        gb.row_mut(r)[j] = gr * (ra[j] * inv - c * rb[j] / (nb * nb));
                    }
                }
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::ClampMin(x, th) => {
                let th = *th;
                let gx = zip_broadcast(g, val(*x), out_shape, |gi, xi| if xi > th { gi } else { 0.0 });
                self.accumulate(grads, *x, gx);
            }
            Op::Fourier(x, k) => {
                let v = val(*x);
                let mut gx = Tensor::zeros(v.rows(), 1);
                for r in 0..v.rows() {
                    let xr = v.data()[r];
                    let gr = g.row(r);
                    let mut freq = PI;
                    let mut acc = 0.0;
                    for j in 0..*k {
                        let a = freq * xr;
                        acc += freq * (gr[2 * j] * a.cos() - gr[2 * j + 1] * a.sin());
                        freq *= 2.0;
                    }
                    gx.data_mut()[r] = acc;
                }
                self.accumulate(grads, *x, gx);
            }
            Op::GatherRows(t, idx) => {
                let v = val(*t);
                let mut gt = Tensor::zeros(v.rows(), v.cols());
                for (r, &src) in idx.iter().enumerate() {
                    for (o, &e) in gt.row_mut(src).iter_mut().zip(g.row(r)) {
                        *o += e;
                    }
                }
                self.accumulate(grads, *t, gt);
            }
        }
    }
}
