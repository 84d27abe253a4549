//! Reverse-mode differentiation over a small fixed set of matrix operations.
//!
//! A [`Tape`] records every operation applied to its [`Var`] handles. Calling
//! [`Tape::backward`] on a scalar node walks the record in reverse and yields
//! a [`Gradients`] table with one entry per node that depends on a parameter.
//! Only the operations the matcher blocks, the rescoring head and the losses
//! need are provided.

use super::matrix::{dot, Matrix};
use super::{NumericsError, Result};

/// Rows whose norm falls below this are treated as degenerate by
/// [`Tape::l2_normalize_rows`] and mapped to zero.
pub const NORM_EPS: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
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
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    SoftmaxRows(Var),
    L2NormalizeRows(Var),
    LayerNormRows(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    SelectRows(Var, Vec<usize>),
    AppendCol(Var),
    NegLogSoftmaxMass(Var, usize, Vec<usize>),
    Sum(Vec<Var>),
    FocalLoss(Var, Vec<bool>, f64, f64),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
    // per-row norms (L2 normalize) or inverse std-devs (layer norm)
    aux: Vec<f64>,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradient table produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient of the differentiated scalar with respect to the leaf `var`.
    /// Leaves the scalar does not depend on report a zero matrix of the right
    /// shape. Interior gradients are released during the sweep.
    pub fn get(&self, tape: &Tape, var: Var) -> Matrix {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = tape.value(var).shape();
                Matrix::zeros(r, c)
            }
        }
    }
}

fn shape_err(op: &str, a: (usize, usize), b: (usize, usize)) -> NumericsError {
    NumericsError::Shape(format!(
        "{op}: incompatible shapes {}x{} and {}x{}",
        a.0, a.1, b.0, b.1
    ))
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

    pub fn value(&self, var: Var) -> &Matrix {
        &self.nodes[var.0].value
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool, aux: Vec<f64>) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            aux,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true, Vec::new())
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false, Vec::new())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::MatMul(a, b), ng, Vec::new()))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul_t(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::MatMulT(a, b), ng, Vec::new()))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err("add", va.shape(), vb.shape()));
        }
        let mut value = va.clone();
        value.add_assign(vb);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Add(a, b), ng, Vec::new()))
    }

    /// Adds a `1 × m` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (va, vr) = (self.value(a), self.value(row));
        if vr.rows() != 1 || vr.cols() != va.cols() {
            return Err(shape_err("add_row", va.shape(), vr.shape()));
        }
        let mut value = va.clone();
        for r in 0..value.rows() {
            for (x, b) in value.row_mut(r).iter_mut().zip(vr.as_slice()) {
                *x += b;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(value, Op::AddRow(a, row), ng, Vec::new()))
    }

    /// Multiplies every row of `a` elementwise by a `1 × m` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (va, vr) = (self.value(a), self.value(row));
        if vr.rows() != 1 || vr.cols() != va.cols() {
            return Err(shape_err("mul_row", va.shape(), vr.shape()));
        }
        let mut value = va.clone();
        for r in 0..value.rows() {
            for (x, g) in value.row_mut(r).iter_mut().zip(vr.as_slice()) {
                *x *= g;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(value, Op::MulRow(a, row), ng, Vec::new()))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|v| v * factor);
        let ng = self.ng(a);
        self.push(value, Op::Scale(a, factor), ng, Vec::new())
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.max(0.0));
        let ng = self.ng(a);
        self.push(value, Op::Relu(a), ng, Vec::new())
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let mut value = va.clone();
        for r in 0..value.rows() {
            softmax_in_place(value.row_mut(r));
        }
        let ng = self.ng(a);
        self.push(value, Op::SoftmaxRows(a), ng, Vec::new())
    }

    /// Scales every row to unit Euclidean norm; rows with norm below
    /// [`NORM_EPS`] become zero rows.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let mut value = va.clone();
        let mut norms = Vec::with_capacity(va.rows());
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            let n = dot(row, row).sqrt();
            norms.push(n);
            if n < NORM_EPS {
                row.iter_mut().for_each(|x| *x = 0.0);
            } else {
                row.iter_mut().for_each(|x| *x /= n);
            }
        }
        let ng = self.ng(a);
        self.push(value, Op::L2NormalizeRows(a), ng, norms)
    }

    /// Per-row standardization `(x − mean) / sqrt(var + eps)` without the
    /// affine part; compose with [`Tape::mul_row`] and [`Tape::add_row`].
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let va = self.value(a);
        let mut value = va.clone();
        let mut inv_std = Vec::with_capacity(va.rows());
        let n = va.cols() as f64;
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            let s = 1.0 / (var + eps).sqrt();
            inv_std.push(s);
            row.iter_mut().for_each(|x| *x = (*x - mean) * s);
        }
        let ng = self.ng(a);
        self.push(value, Op::LayerNormRows(a), ng, inv_std)
    }

    pub fn concat_rows(&mut self, parts: &[Var], cols: usize) -> Result<Var> {
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Matrix::vstack(&mats, cols)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), ng, Vec::new()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map(|&p| self.value(p).rows()).unwrap_or(0);
        let mut cols = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rows() != rows {
                return Err(shape_err("concat_cols", (rows, cols), v.shape()));
            }
            cols += v.cols();
        }
        let mut value = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let v = self.value(p);
            for r in 0..rows {
                value.row_mut(r)[offset..offset + v.cols()].copy_from_slice(v.row(r));
            }
            offset += v.cols();
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), ng, Vec::new()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let va = self.value(a);
        if start + width > va.cols() {
            return Err(NumericsError::Shape(format!(
                "slice_cols {start}..{} out of {} columns",
                start + width,
                va.cols()
            )));
        }
        let mut value = Matrix::zeros(va.rows(), width);
        for r in 0..va.rows() {
            value
                .row_mut(r)
                .copy_from_slice(&va.row(r)[start..start + width]);
        }
        let ng = self.ng(a);
        Ok(self.push(value, Op::SliceCols(a, start), ng, Vec::new()))
    }

    pub fn select_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let va = self.value(a);
        if let Some(&bad) = indices.iter().find(|&&i| i >= va.rows()) {
            return Err(NumericsError::Shape(format!(
                "select_rows index {bad} out of {} rows",
                va.rows()
            )));
        }
        let value = va.select_rows(indices);
        let ng = self.ng(a);
        Ok(self.push(value, Op::SelectRows(a, indices.to_vec()), ng, Vec::new()))
    }

    /// Appends a constant column holding `fill` on every row.
    pub fn append_const_col(&mut self, a: Var, fill: f64) -> Var {
        let va = self.value(a);
        let mut value = Matrix::zeros(va.rows(), va.cols() + 1);
        for r in 0..va.rows() {
            let row = value.row_mut(r);
            row[..va.cols()].copy_from_slice(va.row(r));
            row[va.cols()] = fill;
        }
        let ng = self.ng(a);
        self.push(value, Op::AppendCol(a), ng, Vec::new())
    }

    /// `−log Σ_{c ∈ cols} softmax(logits[row])_c`, as a `1 × 1` node.
    ///
    /// Computed from logits as `lse(row) − lse(row[cols])`, which stays finite
    /// even when the selected probability mass underflows.
    pub fn neg_log_softmax_mass(&mut self, logits: Var, row: usize, cols: &[usize]) -> Result<Var> {
        let v = self.value(logits);
        if row >= v.rows() || cols.is_empty() || cols.iter().any(|&c| c >= v.cols()) {
            return Err(NumericsError::Shape(format!(
                "neg_log_softmax_mass: row {row} / cols {cols:?} invalid for {}x{}",
                v.rows(),
                v.cols()
            )));
        }
        let r = v.row(row);
        let picked: Vec<f64> = cols.iter().map(|&c| r[c]).collect();
        let value = log_sum_exp(r) - log_sum_exp(&picked);
        let ng = self.ng(logits);
        Ok(self.push(
            Matrix::scalar(value),
            Op::NegLogSoftmaxMass(logits, row, cols.to_vec()),
            ng,
            Vec::new(),
        ))
    }

    /// Sum of `1 × 1` nodes. The empty sum is the constant 0.
    pub fn sum(&mut self, terms: &[Var]) -> Result<Var> {
        let mut total = 0.0;
        for &t in terms {
            let v = self.value(t);
            if v.shape() != (1, 1) {
                return Err(shape_err("sum", (1, 1), v.shape()));
            }
            total += v.item();
        }
        let ng = terms.iter().any(|&t| self.ng(t));
        Ok(self.push(Matrix::scalar(total), Op::Sum(terms.to_vec()), ng, Vec::new()))
    }

    /// Binary focal loss summed over an `n × 1` column of logits.
    ///
    /// Positive entries contribute `−α (1−p)^γ log p`, negatives
    /// `−(1−α) p^γ log(1−p)`, with `p = σ(logit)`.
    pub fn focal_loss(&mut self, logits: Var, positive: &[bool], alpha: f64, gamma: f64) -> Result<Var> {
        let v = self.value(logits);
        if v.cols() != 1 || v.rows() != positive.len() {
            return Err(shape_err("focal_loss", v.shape(), (positive.len(), 1)));
        }
        let total = v
            .as_slice()
            .iter()
            .zip(positive)
            .map(|(&z, &pos)| focal_from_logit(z, pos, alpha, gamma).0)
            .sum();
        let ng = self.ng(logits);
        Ok(self.push(
            Matrix::scalar(total),
            Op::FocalLoss(logits, positive.to_vec(), alpha, gamma),
            ng,
            Vec::new(),
        ))
    }

    /// Back-propagates from the `1 × 1` node `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_val = self.value(root);
        if root_val.shape() != (1, 1) {
            return Err(NumericsError::Shape(format!(
                "backward needs a scalar root, got {}x{}",
                root_val.rows(),
                root_val.cols()
            )));
        }
        if !root_val.is_finite() {
            return Err(NumericsError::NonFinite("loss".into()));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    if self.ng(*a) {
                        let ga = g.matmul_t(self.value(*b))?;
                        accumulate(&mut grads, *a, ga);
                    }
                    if self.ng(*b) {
                        let gb = self.value(*a).t_matmul(&g)?;
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::MatMulT(a, b) => {
                    // out = a bᵀ: da = g b, db = gᵀ a
                    if self.ng(*a) {
                        let ga = g.matmul(self.value(*b))?;
                        accumulate(&mut grads, *a, ga);
                    }
                    if self.ng(*b) {
                        let gb = g.t_matmul(self.value(*a))?;
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Add(a, b) => {
                    if self.ng(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.ng(*b) {
                        accumulate(&mut grads, *b, g);
                    }
                }
                Op::AddRow(a, row) => {
                    if self.ng(*row) {
                        accumulate(&mut grads, *row, g.sum_rows());
                    }
                    if self.ng(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::MulRow(a, row) => {
                    let va = self.value(*a);
                    let vr = self.value(*row);
                    if self.ng(*row) {
                        let mut gr = Matrix::zeros(1, vr.cols());
                        for r in 0..g.rows() {
                            for ((o, gv), av) in gr.as_mut_slice().iter_mut().zip(g.row(r)).zip(va.row(r)) {
                                *o += gv * av;
                            }
                        }
                        accumulate(&mut grads, *row, gr);
                    }
                    if self.ng(*a) {
                        let mut ga = g;
                        for r in 0..ga.rows() {
                            for (x, s) in ga.row_mut(r).iter_mut().zip(vr.as_slice()) {
                                *x *= s;
                            }
                        }
                        accumulate(&mut grads, *a, ga);
                    }
                }
                Op::Scale(a, f) => {
                    let f = *f;
                    accumulate(&mut grads, *a, g.map(|v| v * f));
                }
                Op::Relu(a) => {
                    let va = self.value(*a);
                    let mut ga = g;
                    for (x, &inp) in ga.as_mut_slice().iter_mut().zip(va.as_slice()) {
                        if inp <= 0.0 {
                            *x = 0.0;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = g;
                    for r in 0..ga.rows() {
                        let yr = y.row(r);
                        let s = dot(ga.row(r), yr);
                        for (x, &p) in ga.row_mut(r).iter_mut().zip(yr) {
                            *x = p * (*x - s);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::L2NormalizeRows(a) => {
                    let y = &node.value;
                    let mut ga = g;
                    for r in 0..ga.rows() {
                        let n = node.aux[r];
                        if n < NORM_EPS {
                            ga.row_mut(r).iter_mut().for_each(|x| *x = 0.0);
                            continue;
                        }
                        let yr = y.row(r);
                        let s = dot(ga.row(r), yr);
                        for (x, &yv) in ga.row_mut(r).iter_mut().zip(yr) {
                            *x = (*x - yv * s) / n;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::LayerNormRows(a) => {
                    let y = &node.value;
                    let n = y.cols() as f64;
                    let mut ga = g;
                    for r in 0..ga.rows() {
                        let inv = node.aux[r];
                        let yr = y.row(r);
                        let mean_g = ga.row(r).iter().sum::<f64>() / n;
                        let mean_gy = dot(ga.row(r), yr) / n;
                        for (x, &yv) in ga.row_mut(r).iter_mut().zip(yr) {
                            *x = inv * (*x - mean_g - yv * mean_gy);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let rows = self.value(p).rows();
                        if self.ng(p) {
                            let idx: Vec<usize> = (start..start + rows).collect();
                            accumulate(&mut grads, p, g.select_rows(&idx));
                        }
                        start += rows;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let cols = self.value(p).cols();
                        if self.ng(p) {
                            let mut gp = Matrix::zeros(g.rows(), cols);
                            for r in 0..g.rows() {
                                gp.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + cols]);
                            }
                            accumulate(&mut grads, p, gp);
                        }
                        offset += cols;
                    }
                }
                Op::SliceCols(a, start) => {
                    let va = self.value(*a);
                    let mut ga = Matrix::zeros(va.rows(), va.cols());
                    for r in 0..g.rows() {
                        ga.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::SelectRows(a, indices) => {
                    let va = self.value(*a);
                    let mut ga = Matrix::zeros(va.rows(), va.cols());
                    for (k, &i) in indices.iter().enumerate() {
                        for (x, gv) in ga.row_mut(i).iter_mut().zip(g.row(k)) {
                            *x += gv;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::AppendCol(a) => {
                    let va = self.value(*a);
                    let mut ga = Matrix::zeros(va.rows(), va.cols());
                    for r in 0..va.rows() {
                        ga.row_mut(r).copy_from_slice(&g.row(r)[..va.cols()]);
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::NegLogSoftmaxMass(logits, row, cols) => {
                    let v = self.value(*logits);
                    let up = g.item();
                    let mut gl = Matrix::zeros(v.rows(), v.cols());
                    let r = v.row(*row);
                    let full = softmax_vec(r);
                    let picked: Vec<f64> = cols.iter().map(|&c| r[c]).collect();
                    let sub = softmax_vec(&picked);
                    let out = gl.row_mut(*row);
                    for (o, p) in out.iter_mut().zip(&full) {
                        *o = up * p;
                    }
                    for (&c, q) in cols.iter().zip(&sub) {
                        out[c] -= up * q;
                    }
                    accumulate(&mut grads, *logits, gl);
                }
                Op::Sum(terms) => {
                    let up = g.item();
                    for &t in terms {
                        if self.ng(t) {
                            accumulate(&mut grads, t, Matrix::scalar(up));
                        }
                    }
                }
                Op::FocalLoss(logits, positive, alpha, gamma) => {
                    let v = self.value(*logits);
                    let up = g.item();
                    let data: Vec<f64> = v
                        .as_slice()
                        .iter()
                        .zip(positive)
                        .map(|(&z, &pos)| up * focal_from_logit(z, pos, *alpha, *gamma).1)
                        .collect();
                    accumulate(&mut grads, *logits, Matrix::from_vec(v.rows(), 1, data)?);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

fn softmax_vec(row: &[f64]) -> Vec<f64> {
    let mut out = row.to_vec();
    softmax_in_place(&mut out);
    out
}

/// `ln σ(z)` without overflow.
fn log_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Focal loss term and its derivative with respect to the logit.
fn focal_from_logit(z: f64, positive: bool, alpha: f64, gamma: f64) -> (f64, f64) {
    let p = sigmoid(z);
    let q = 1.0 - p;
    let log_p = log_sigmoid(z);
    let log_q = log_sigmoid(-z);
    if positive {
        let loss = -alpha * q.powf(gamma) * log_p;
        // dL/dz = α [γ (1−p)^γ p ln p − (1−p)^{γ+1}]
        let grad = alpha * (gamma * q.powf(gamma) * p * log_p - q.powf(gamma + 1.0));
        (loss, grad)
    } else {
        let loss = -(1.0 - alpha) * p.powf(gamma) * log_q;
        // dL/dz = −(1−α) [γ p^γ (1−p) ln(1−p) − p^{γ+1}]
        let grad = -(1.0 - alpha) * (gamma * p.powf(gamma) * q * log_q - p.powf(gamma + 1.0));
        (loss, grad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_of_matmul_chain() {
        let mut t = Tape::new();
        let x = t.constant(Matrix::from_vec(1, 2, vec![1.0, 2.0]).unwrap());
        let w = t.param(Matrix::from_vec(2, 1, vec![3.0, 4.0]).unwrap());
        let y = t.matmul(x, w).unwrap();
        let loss = t.sum(&[y]).unwrap();
        assert_eq!(t.value(loss).item(), 11.0);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(&t, w).as_slice(), &[1.0, 2.0]);
        // constants are never differentiated
        assert_eq!(g.get(&t, x).as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn neg_log_mass_matches_direct_evaluation() {
        let mut t = Tape::new();
        let s = t.constant(Matrix::from_vec(1, 3, vec![0.3, -1.0, 2.0]).unwrap());
        let l = t.neg_log_softmax_mass(s, 0, &[0, 2]).unwrap();
        let mut p = vec![0.3, -1.0, 2.0];
        softmax_in_place(&mut p);
        assert!((t.value(l).item() + (p[0] + p[2]).ln()).abs() < 1e-14);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut t = Tape::new();
        let a = t.param(Matrix::zeros(2, 2));
        assert!(t.backward(a).is_err());
    }

    #[test]
    fn log_sigmoid_is_stable() {
        assert!((log_sigmoid(800.0)).abs() < 1e-300);
        assert!((log_sigmoid(-800.0) + 800.0).abs() < 1e-9);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
    }
}
