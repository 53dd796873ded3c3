//! Reverse-mode differentiation over whole matrices.
//!
//! A [`Tape`] records each primitive together with the forward values its
//! backward rule needs. Nodes are appended in evaluation order, so walking the
//! node list from the end is a reverse topological order.

use super::matrix::{row_moments, Matrix};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Affine(Var, f64),
    Sigmoid(Var),
    Gelu(Var),
    Log(Var),
    Clamp(Var, f64, f64),
    RowSoftmax(Var),
    RowLogSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    ConcatCols(Var, Var),
    SelectRows(Var, Vec<usize>),
    SelectCols(Var, Vec<usize>),
    RowTopKMean(Var, Vec<Vec<usize>>),
    RowNormalize(Var, Vec<f64>),
    Sum(Var),
}

struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node of a tape.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Nodes the loss does not depend on get an all-zero gradient.
    pub fn get(&self, var: Var) -> Matrix {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[var.0];
                Matrix::zeros(r, c)
            }
        }
    }

    pub fn take(&mut self, var: Var) -> Matrix {
        match self.grads[var.0].take() {
            Some(g) => g,
            None => {
                let (r, c) = self.shapes[var.0];
                Matrix::zeros(r, c)
            }
        }
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Indices of the `k` largest values; ties go to the lower index.
pub(crate) fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
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

    fn push(&mut self, value: Matrix, op: Op) -> Result<Var> {
        if let Some(index) = value.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("tape node {}", self.nodes.len()),
                index,
            });
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        self.push(value, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        self.push(value, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        self.push(value, Op::Mul(a, b))
    }

    /// Adds a 1×c row to every row of an n×c matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ma, mr) = (self.value(a), self.value(row));
        if mr.rows() != 1 || mr.cols() != ma.cols() {
            return Err(Error::shape(
                "add_row",
                format!("{}x{} + row {}x{}", ma.rows(), ma.cols(), mr.rows(), mr.cols()),
            ));
        }
        let mut value = ma.clone();
        for r in 0..value.rows() {
            for (v, b) in value.row_mut(r).iter_mut().zip(mr.data()) {
                *v += b;
            }
        }
        self.push(value, Op::AddRow(a, row))
    }

    /// `scale * a + shift`, elementwise.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Result<Var> {
        let value = self.value(a).map(|x| scale * x + shift);
        self.push(value, Op::Affine(a, scale))
    }

    pub fn scale(&mut self, a: Var, scale: f64) -> Result<Var> {
        self.affine(a, scale, 0.0)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(sigmoid);
        self.push(value, Op::Sigmoid(a))
    }

    /// Exact GeLU, `x·Φ(x)`.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(gelu);
        self.push(value, Op::Gelu(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(index) = self.value(a).data().iter().position(|&v| v <= 0.0) {
            return Err(Error::NonFinite {
                context: "log of non-positive value".into(),
                index,
            });
        }
        let value = self.value(a).map(f64::ln);
        self.push(value, Op::Log(a))
    }

    /// Clamp into `[lo, hi]`; the gradient is zero where the clamp is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let value = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(value, Op::Clamp(a, lo, hi))
    }

    pub fn row_softmax(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).row_softmax();
        self.push(value, Op::RowSoftmax(a))
    }

    pub fn row_log_softmax(&mut self, a: Var) -> Result<Var> {
        let mut value = self.value(a).clone();
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        self.push(value, Op::RowLogSoftmax(a))
    }

    /// Row-wise layer normalization with eps = [`LAYER_NORM_EPS`]; `gamma` and
    /// `beta` are 1×c.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (mx, mg, mb) = (self.value(x), self.value(gamma), self.value(beta));
        if mg.shape() != (1, mx.cols()) || mb.shape() != (1, mx.cols()) {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "x {}x{}, gamma {}x{}, beta {}x{}",
                    mx.rows(),
                    mx.cols(),
                    mg.rows(),
                    mg.cols(),
                    mb.rows(),
                    mb.cols()
                ),
            ));
        }
        let mut xhat = mx.clone();
        let mut inv_std = Vec::with_capacity(mx.rows());
        for r in 0..mx.rows() {
            let row = xhat.row_mut(r);
            let (mean, istd) = row_moments(row, LAYER_NORM_EPS);
            for v in row.iter_mut() {
                *v = (*v - mean) * istd;
            }
            inv_std.push(istd);
        }
        let mut value = xhat.clone();
        for r in 0..value.rows() {
            for ((v, g), b) in value.row_mut(r).iter_mut().zip(mg.data()).zip(mb.data()) {
                *v = *v * g + b;
            }
        }
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ma, mb) = (self.value(a), self.value(b));
        if ma.rows() != mb.rows() {
            return Err(Error::shape(
                "concat_cols",
                format!("{} vs {} rows", ma.rows(), mb.rows()),
            ));
        }
        let cols = ma.cols() + mb.cols();
        let mut data = Vec::with_capacity(ma.rows() * cols);
        for r in 0..ma.rows() {
            data.extend_from_slice(ma.row(r));
            data.extend_from_slice(mb.row(r));
        }
        let value = Matrix::from_raw(ma.rows(), cols, data);
        self.push(value, Op::ConcatCols(a, b))
    }

    pub fn select_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let value = self.value(a).select_rows(indices)?;
        self.push(value, Op::SelectRows(a, indices.to_vec()))
    }

    pub fn select_cols(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let m = self.value(a);
        if let Some(&bad) = indices.iter().find(|&&i| i >= m.cols()) {
            return Err(Error::shape("select_cols", format!("column {bad} of {}", m.cols())));
        }
        let mut data = Vec::with_capacity(m.rows() * indices.len());
        for r in 0..m.rows() {
            data.extend(indices.iter().map(|&c| m.get(r, c)));
        }
        let value = Matrix::from_raw(m.rows(), indices.len(), data);
        self.push(value, Op::SelectCols(a, indices.to_vec()))
    }

    /// n×1 column holding, per row, the mean of its `k` largest entries.
    pub fn row_top_k_mean(&mut self, a: Var, k: usize) -> Result<Var> {
        let m = self.value(a);
        if k == 0 || k > m.cols() {
            return Err(Error::shape(
                "row_top_k_mean",
                format!("k = {k} with {} columns", m.cols()),
            ));
        }
        let mut chosen = Vec::with_capacity(m.rows());
        let mut data = Vec::with_capacity(m.rows());
        for r in 0..m.rows() {
            let row = m.row(r);
            let idx = top_k_indices(row, k);
            data.push(idx.iter().map(|&i| row[i]).sum::<f64>() / k as f64);
            chosen.push(idx);
        }
        let value = Matrix::from_raw(m.rows(), 1, data);
        self.push(value, Op::RowTopKMean(a, chosen))
    }

    /// Scales each row to unit L2 norm; a zero row is rejected.
    pub fn row_normalize(&mut self, a: Var) -> Result<Var> {
        let m = self.value(a);
        let norms = m.l2_norm_rows();
        if let Some(r) = norms.iter().position(|&n| n < 1e-12) {
            return Err(Error::Degenerate(format!("row {r} has zero norm")));
        }
        let mut value = m.clone();
        for (r, n) in norms.iter().enumerate() {
            for v in value.row_mut(r) {
                *v /= n;
            }
        }
        self.push(value, Op::RowNormalize(a, norms))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Matrix::from_raw(1, 1, vec![self.value(a).sum()]);
        self.push(value, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(Error::shape("mean", "empty input"));
        }
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Gradients of the 1×1 node `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).shape() != (1, 1) {
            let (r, c) = self.value(loss).shape();
            return Err(Error::shape("backward", format!("loss must be 1x1, got {r}x{c}")));
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::from_raw(1, 1, vec![1.0]));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let da = g.matmul(&self.value(*b).transpose())?;
                    let db = self.value(*a).transpose().matmul(&g)?;
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.transpose()),
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.map(|v| -v));
                }
                Op::Mul(a, b) => {
                    let da = g.zip_map(self.value(*b), "mul'", |x, y| x * y)?;
                    let db = g.zip_map(self.value(*a), "mul'", |x, y| x * y)?;
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::AddRow(a, row) => {
                    let mut drow = vec![0.0; g.cols()];
                    for r in 0..g.rows() {
                        for (d, v) in drow.iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    accumulate(&mut grads, *row, Matrix::from_raw(1, g.cols(), drow));
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::Affine(a, scale) => accumulate(&mut grads, *a, g.map(|v| v * scale)),
                Op::Sigmoid(a) => {
                    let da = g.zip_map(&node.value, "sigmoid'", |gv, y| gv * y * (1.0 - y))?;
                    accumulate(&mut grads, *a, da);
                }
                Op::Gelu(a) => {
                    let da = g.zip_map(self.value(*a), "gelu'", |gv, x| gv * gelu_grad(x))?;
                    accumulate(&mut grads, *a, da);
                }
                Op::Log(a) => {
                    let da = g.zip_map(self.value(*a), "log'", |gv, x| gv / x)?;
                    accumulate(&mut grads, *a, da);
                }
                Op::Clamp(a, lo, hi) => {
                    let da = g.zip_map(
                        self.value(*a),
                        "clamp'",
                        |gv, x| {
                            if x > *lo && x < *hi {
                                gv
                            } else {
                                0.0
                            }
                        },
                    )?;
                    accumulate(&mut grads, *a, da);
                }
                Op::RowSoftmax(a) => {
                    let y = &node.value;
                    let mut da = g.clone();
                    for r in 0..y.rows() {
                        let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(a, b)| a * b).sum();
                        for (d, yv) in da.row_mut(r).iter_mut().zip(y.row(r)) {
                            *d = yv * (*d - dot);
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::RowLogSoftmax(a) => {
                    let y = &node.value;
                    let mut da = g.clone();
                    for r in 0..y.rows() {
                        let total: f64 = g.row(r).iter().sum();
                        for (d, yv) in da.row_mut(r).iter_mut().zip(y.row(r)) {
                            *d -= yv.exp() * total;
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gamma_v = self.value(*gamma);
                    let cols = g.cols();
                    let mut dgamma = vec![0.0; cols];
                    let mut dbeta = vec![0.0; cols];
                    let mut dx = Matrix::zeros(g.rows(), cols);
                    for r in 0..g.rows() {
                        let (gr, hr) = (g.row(r), xhat.row(r));
                        let mut mean_d = 0.0;
                        let mut mean_dh = 0.0;
                        for c in 0..cols {
                            dgamma[c] += gr[c] * hr[c];
                            dbeta[c] += gr[c];
                            let dh = gr[c] * gamma_v.data()[c];
                            mean_d += dh;
                            mean_dh += dh * hr[c];
                        }
                        mean_d /= cols as f64;
                        mean_dh /= cols as f64;
                        let out = dx.row_mut(r);
                        for c in 0..cols {
                            let dh = gr[c] * gamma_v.data()[c];
                            out[c] = inv_std[r] * (dh - mean_d - hr[c] * mean_dh);
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *gamma, Matrix::from_raw(1, cols, dgamma));
                    accumulate(&mut grads, *beta, Matrix::from_raw(1, cols, dbeta));
                }
                Op::ConcatCols(a, b) => {
                    let ca = self.value(*a).cols();
                    let cb = self.value(*b).cols();
                    let mut da = Vec::with_capacity(g.rows() * ca);
                    let mut db = Vec::with_capacity(g.rows() * cb);
                    for r in 0..g.rows() {
                        da.extend_from_slice(&g.row(r)[..ca]);
                        db.extend_from_slice(&g.row(r)[ca..]);
                    }
                    accumulate(&mut grads, *a, Matrix::from_raw(g.rows(), ca, da));
                    accumulate(&mut grads, *b, Matrix::from_raw(g.rows(), cb, db));
                }
                Op::SelectRows(a, indices) => {
                    let src = self.value(*a);
                    let mut da = Matrix::zeros(src.rows(), src.cols());
                    for (out_r, &src_r) in indices.iter().enumerate() {
                        for (d, v) in da.row_mut(src_r).iter_mut().zip(g.row(out_r)) {
                            *d += v;
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::SelectCols(a, indices) => {
                    let src = self.value(*a);
                    let mut da = Matrix::zeros(src.rows(), src.cols());
                    for r in 0..g.rows() {
                        let gr = g.row(r).to_vec();
                        let row = da.row_mut(r);
                        for (out_c, &src_c) in indices.iter().enumerate() {
                            row[src_c] += gr[out_c];
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::RowTopKMean(a, chosen) => {
                    let src = self.value(*a);
                    let mut da = Matrix::zeros(src.rows(), src.cols());
                    for (r, idx) in chosen.iter().enumerate() {
                        let share = g.get(r, 0) / idx.len() as f64;
                        let row = da.row_mut(r);
                        for &c in idx {
                            row[c] += share;
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::RowNormalize(a, norms) => {
                    let y = &node.value;
                    let mut da = g.clone();
                    for (r, n) in norms.iter().enumerate() {
                        let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(a, b)| a * b).sum();
                        for (d, yv) in da.row_mut(r).iter_mut().zip(y.row(r)) {
                            *d = (*d - yv * dot) / n;
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::Sum(a) => {
                    let (r, c) = self.value(*a).shape();
                    let da = Matrix::from_raw(r, c, vec![g.data()[0]; r * c]);
                    accumulate(&mut grads, *a, da);
                }
            }
            grads[i] = Some(g);
        }

        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }
}

fn accumulate(grads: &mut [Option<Matrix>], var: Var, delta: Matrix) {
    match &mut grads[var.0] {
        Some(existing) => existing.add_assign(&delta),
        slot @ None => *slot = Some(delta),
    }
}
