//! Reverse-mode differentiation over a linear record of primitive ops.
//!
//! A [`Tape`] borrows the parameter store for the duration of one forward
//! pass. Parameters enter the graph once each via [`Tape::param`]; values
//! of parameter nodes are read straight from the store, never copied.

use std::collections::HashMap;

use super::matrix::{check_targets, log_softmax_rows, softmax_rows};
use super::{Matrix, ParamId, ParamStore};
use crate::error::{Error, Result};

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Affine(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    LayerNorm {
        x: Var,
        p: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    LogSoftmax(Var),
    Log(Var),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Transpose(Var),
    Embedding { table: Var, indices: Vec<usize> },
    NllPairs { x: Var, pairs: Vec<(usize, usize)> },
    SumSquares(Var),
    Precomputed { x: Var, grad: Matrix },
    Combine(Vec<(Var, f64)>),
}

struct Node {
    op: Op,
    value: Option<Matrix>,
    needs_grad: bool,
}

pub struct Tape<'p> {
    params: Option<&'p ParamStore>,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Tape {
            params: None,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn with_params(params: &'p ParamStore) -> Self {
        Tape {
            params: Some(params),
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(m), _) => m,
            (None, Op::Param(id)) => self.params.expect("parameter tape").value(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    fn push(&mut self, op: Op, value: Matrix, parents: &[Var]) -> Var {
        debug_assert!(value.is_finite() || matches!(op, Op::Input | Op::LogSoftmax(_) | Op::Log(_)));
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            op,
            value: Some(value),
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that does not receive gradients.
    pub fn constant(&mut self, m: Matrix) -> Var {
        self.nodes.push(Node {
            op: Op::Input,
            value: Some(m),
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn variable(&mut self, m: Matrix) -> Var {
        self.nodes.push(Node {
            op: Op::Input,
            value: Some(m),
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(&id) {
            return *v;
        }
        assert!(self.params.is_some(), "tape has no parameter store");
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), out, &[a, b]))
    }

    /// `a * b^T`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul_nt(self.value(b))?;
        Ok(self.push(Op::MatMulNt(a, b), out, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add(a, b), out, &[a, b]))
    }

    /// `x * W[..in] + W[in]`, where the last row of `w` is the bias.
    pub fn affine(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xm, wm) = (self.value(x), self.value(w));
        if wm.rows() != xm.cols() + 1 {
            return Err(Error::shape("affine", xm.shape(), wm.shape()));
        }
        let out = with_ones_column(xm).matmul(wm)?;
        Ok(self.push(Op::Affine(x, w), out, &[x, w]))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let out = self.value(x).scaled(k);
        self.push(Op::Scale(x, k), out, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        self.push(Op::Relu(x), out, &[x])
    }

    /// Row-wise layer normalisation; `p` holds the gain in row 0 and the
    /// shift in row 1.
    pub fn layer_norm(&mut self, x: Var, p: Var) -> Result<Var> {
        let (xm, pm) = (self.value(x), self.value(p));
        if pm.rows() != 2 || pm.cols() != xm.cols() {
            return Err(Error::shape("layer_norm", xm.shape(), pm.shape()));
        }
        let cols = xm.cols();
        let mut xhat = Matrix::zeros(xm.rows(), cols);
        let mut out = Matrix::zeros(xm.rows(), cols);
        let mut inv_std = Vec::with_capacity(xm.rows());
        for r in 0..xm.rows() {
            let row = xm.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let istd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(istd);
            let (gain, shift) = (pm.row(0), pm.row(1));
            let xh = xhat.row_mut(r);
            for c in 0..cols {
                xh[c] = (row[c] - mean) * istd;
            }
            let o = out.row_mut(r);
            for c in 0..cols {
                o[c] = gain[c] * xh[c] + shift[c];
            }
        }
        Ok(self.push(Op::LayerNorm { x, p, xhat, inv_std }, out, &[x, p]))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let out = softmax_rows(self.value(x));
        self.push(Op::Softmax(x), out, &[x])
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let out = log_softmax_rows(self.value(x));
        self.push(Op::LogSoftmax(x), out, &[x])
    }

    pub fn log(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            *v = v.ln();
        }
        self.push(Op::Log(x), out, &[x])
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let m = self.value(x);
        if start > end || end > m.rows() {
            return Err(Error::shape("slice_rows", m.shape(), (start, end)));
        }
        let out = m.slice_rows(start, end);
        Ok(self.push(Op::SliceRows(x, start), out, &[x]))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let m = self.value(x);
        if start > end || end > m.cols() {
            return Err(Error::shape("slice_cols", m.shape(), (start, end)));
        }
        let out = m.slice_cols(start, end);
        Ok(self.push(Op::SliceCols(x, start), out, &[x]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        let mats: Vec<&Matrix> = parts.iter().map(|v| self.value(*v)).collect();
        let out = Matrix::concat_rows(&mats)?;
        Ok(self.push(Op::ConcatRows(parts.to_vec()), out, parts))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        let mats: Vec<&Matrix> = parts.iter().map(|v| self.value(*v)).collect();
        let out = Matrix::concat_cols(&mats)?;
        Ok(self.push(Op::ConcatCols(parts.to_vec()), out, parts))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let out = self.value(x).transpose();
        self.push(Op::Transpose(x), out, &[x])
    }

    /// Gathers rows of `table`.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let mut out = Matrix::zeros(indices.len(), t.cols());
        for (r, &i) in indices.iter().enumerate() {
            if i >= t.rows() {
                return Err(Error::IndexOutOfRange {
                    row: r,
                    index: i,
                    classes: t.rows(),
                });
            }
            out.row_mut(r).copy_from_slice(t.row(i));
        }
        Ok(self.push(
            Op::Embedding {
                table,
                indices: indices.to_vec(),
            },
            out,
            &[table],
        ))
    }

    /// Mean of `-x[r, c]` over the given coordinates (0 for an empty list).
    pub fn nll_pairs(&mut self, x: Var, pairs: &[(usize, usize)]) -> Result<Var> {
        let m = self.value(x);
        for &(r, c) in pairs {
            if r >= m.rows() || c >= m.cols() {
                return Err(Error::IndexOutOfRange {
                    row: r,
                    index: c,
                    classes: m.cols(),
                });
            }
        }
        let total: f64 = pairs.iter().map(|&(r, c)| -m.get(r, c)).sum();
        let mean = if pairs.is_empty() {
            0.0
        } else {
            total / pairs.len() as f64
        };
        Ok(self.push(
            Op::NllPairs {
                x,
                pairs: pairs.to_vec(),
            },
            Matrix::scalar(mean),
            &[x],
        ))
    }

    /// Mean negative log-probability of one target per row.
    pub fn cross_entropy(&mut self, logprobs: Var, targets: &[usize]) -> Result<Var> {
        check_targets(self.value(logprobs), targets)?;
        let pairs: Vec<(usize, usize)> = targets.iter().copied().enumerate().collect();
        self.nll_pairs(logprobs, &pairs)
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let out = Matrix::scalar(self.value(x).frobenius_sq());
        self.push(Op::SumSquares(x), out, &[x])
    }

    /// Scalar node whose value and gradient with respect to `x` were
    /// computed outside the tape (used by the CTC loss).
    pub fn precomputed(&mut self, x: Var, value: f64, grad: Matrix) -> Result<Var> {
        if grad.shape() != self.shape(x) {
            return Err(Error::shape("precomputed", self.shape(x), grad.shape()));
        }
        Ok(self.push(Op::Precomputed { x, grad }, Matrix::scalar(value), &[x]))
    }

    /// Weighted sum of equally shaped nodes.
    pub fn combine(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let first = terms
            .first()
            .ok_or_else(|| Error::EmptyInput("combine needs at least one term".into()))?;
        let mut out = Matrix::zeros(self.shape(first.0).0, self.shape(first.0).1);
        for &(v, w) in terms {
            let m = self.value(v);
            if m.shape() != out.shape() {
                return Err(Error::shape("combine", out.shape(), m.shape()));
            }
            for (o, x) in out.data_mut().iter_mut().zip(m.data()) {
                *o += w * x;
            }
        }
        let parents: Vec<Var> = terms.iter().map(|t| t.0).collect();
        Ok(self.push(Op::Combine(terms.to_vec()), out, &parents))
    }

    /// Accumulates d(loss)/d(node) for every node reachable from `loss`,
    /// visiting each node once in reverse order of creation.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::shape("backward", self.shape(loss), (1, 1)));
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(&node.op, i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let params = self.param_vars.iter().map(|(id, v)| (*id, *v)).collect();
        Ok(Gradients { grads, params })
    }

    fn propagate(&self, op: &Op, index: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let out = self.nodes[index].value.as_ref();
        match op {
            Op::Input | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    let da = g.matmul_nt(self.value(*b)).expect("shape");
                    accumulate(grads, *a, da);
                }
                if self.wants(*b) {
                    let db = self.value(*a).matmul_tn(g).expect("shape");
                    accumulate(grads, *b, db);
                }
            }
            Op::MatMulNt(a, b) => {
                if self.wants(*a) {
                    let da = g.matmul(self.value(*b)).expect("shape");
                    accumulate(grads, *a, da);
                }
                if self.wants(*b) {
                    let db = g.matmul_tn(self.value(*a)).expect("shape");
                    accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::Affine(x, w) => {
                if self.wants(*x) {
                    let full = g.matmul_nt(self.value(*w)).expect("shape");
                    let cols = self.shape(*x).1;
                    accumulate(grads, *x, full.slice_cols(0, cols));
                }
                if self.wants(*w) {
                    let dw = with_ones_column(self.value(*x)).matmul_tn(g).expect("shape");
                    accumulate(grads, *w, dw);
                }
            }
            Op::Scale(x, k) => accumulate(grads, *x, g.scaled(*k)),
            Op::Relu(x) => {
                let y = out.expect("value");
                let mut dx = g.clone();
                for (d, v) in dx.data_mut().iter_mut().zip(y.data()) {
                    if *v <= 0.0 {
                        *d = 0.0;
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::LayerNorm { x, p, xhat, inv_std } => {
                let pm = self.value(*p);
                let cols = xhat.cols();
                if self.wants(*p) {
                    let mut dp = Matrix::zeros(2, cols);
                    for r in 0..g.rows() {
                        let (gr, xr) = (g.row(r), xhat.row(r));
                        for c in 0..cols {
                            let dg = dp.get(0, c) + gr[c] * xr[c];
                            dp.set(0, c, dg);
                            let db = dp.get(1, c) + gr[c];
                            dp.set(1, c, db);
                        }
                    }
                    accumulate(grads, *p, dp);
                }
                if self.wants(*x) {
                    let mut dx = Matrix::zeros(g.rows(), cols);
                    let gain = pm.row(0);
                    let n = cols as f64;
                    for r in 0..g.rows() {
                        let (gr, xr) = (g.row(r), xhat.row(r));
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for c in 0..cols {
                            let d = gr[c] * gain[c];
                            mean_d += d;
                            mean_dx += d * xr[c];
                        }
                        mean_d /= n;
                        mean_dx /= n;
                        let out_row = dx.row_mut(r);
                        for c in 0..cols {
                            let d = gr[c] * gain[c];
                            out_row[c] = inv_std[r] * (d - mean_d - xr[c] * mean_dx);
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::Softmax(x) => {
                let y = out.expect("value");
                let mut dx = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (c, d) in dx.row_mut(r).iter_mut().enumerate() {
                        *d = yr[c] * (gr[c] - dot);
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::LogSoftmax(x) => {
                let y = out.expect("value");
                let mut dx = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let total: f64 = gr.iter().sum();
                    for (c, d) in dx.row_mut(r).iter_mut().enumerate() {
                        *d = gr[c] - yr[c].exp() * total;
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Log(x) => {
                let xm = self.value(*x);
                let mut dx = g.clone();
                for (d, v) in dx.data_mut().iter_mut().zip(xm.data()) {
                    *d /= v;
                }
                accumulate(grads, *x, dx);
            }
            Op::SliceRows(x, start) => {
                let (rows, cols) = self.shape(*x);
                let mut dx = Matrix::zeros(rows, cols);
                dx.data_mut()[start * cols..(start + g.rows()) * cols].copy_from_slice(g.data());
                accumulate(grads, *x, dx);
            }
            Op::SliceCols(x, start) => {
                let (rows, cols) = self.shape(*x);
                let mut dx = Matrix::zeros(rows, cols);
                for r in 0..rows {
                    dx.row_mut(r)[*start..start + g.cols()].copy_from_slice(g.row(r));
                }
                accumulate(grads, *x, dx);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let rows = self.shape(*p).0;
                    if self.wants(*p) {
                        accumulate(grads, *p, g.slice_rows(offset, offset + rows));
                    }
                    offset += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let cols = self.shape(*p).1;
                    if self.wants(*p) {
                        accumulate(grads, *p, g.slice_cols(offset, offset + cols));
                    }
                    offset += cols;
                }
            }
            Op::Transpose(x) => accumulate(grads, *x, g.transpose()),
            Op::Embedding { table, indices } => {
                let (rows, cols) = self.shape(*table);
                let mut dt = Matrix::zeros(rows, cols);
                for (r, &i) in indices.iter().enumerate() {
                    for (d, v) in dt.row_mut(i).iter_mut().zip(g.row(r)) {
                        *d += v;
                    }
                }
                accumulate(grads, *table, dt);
            }
            Op::NllPairs { x, pairs } => {
                let (rows, cols) = self.shape(*x);
                let mut dx = Matrix::zeros(rows, cols);
                if !pairs.is_empty() {
                    let w = -g.item() / pairs.len() as f64;
                    for &(r, c) in pairs {
                        let v = dx.get(r, c) + w;
                        dx.set(r, c, v);
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::SumSquares(x) => accumulate(grads, *x, self.value(*x).scaled(2.0 * g.item())),
            Op::Precomputed { x, grad } => accumulate(grads, *x, grad.scaled(g.item())),
            Op::Combine(terms) => {
                for &(v, w) in terms {
                    if self.wants(v) {
                        accumulate(grads, v, g.scaled(w));
                    }
                }
            }
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn with_ones_column(x: &Matrix) -> Matrix {
    let cols = x.cols() + 1;
    let mut data = Vec::with_capacity(x.rows() * cols);
    for r in 0..x.rows() {
        data.extend_from_slice(x.row(r));
        data.push(1.0);
    }
    Matrix::from_vec(x.rows(), cols, data).expect("length matches")
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }

    pub fn param(&self, id: ParamId) -> Option<&Matrix> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, v)| self.wrt(*v))
    }

    /// Adds parameter gradients into the store's `grad` fields.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        let mut params = self.params.clone();
        params.sort();
        for (id, v) in params {
            if let Some(g) = self.wrt(v) {
                store.get_mut(id).grad.add_assign(g);
            }
        }
    }
}
