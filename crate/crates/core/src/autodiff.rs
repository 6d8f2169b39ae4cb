//! Define-by-run reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records every operation applied to its [`Var`] handles along
//! with the forward value. [`Tape::backward`] then walks the records in
//! reverse and accumulates vector-Jacobian products, summing contributions
//! from every path that reaches a node.
//!
//! Only nodes that descend from a parameter leaf carry gradients; constants
//! and their pure descendants are skipped during the backward walk.
//!
//! Conventions: the derivative of `relu` at exactly zero is zero, and dropout
//! is inverted (kept activations are scaled by `1 / keep_prob`).

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::matrix::{gemm, gemm_new, log_sum_exp, Matrix, Operand};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Reduction direction for [`Tape::logsumexp`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Reduce across the columns of each row, giving an `n x 1` result.
    Rows,
    /// Reduce down each column, giving a `1 x k` result.
    Cols,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Exp(Var),
    LogSoftmaxRows(Var),
    LogSumExp(Var, Axis),
    GatherRows(Var, Arc<[usize]>),
    SegmentSum(Var, Arc<[usize]>),
    Dropout(Var, Arc<[f64]>),
    Transpose(Var),
    LogMatMul(Var, Var),
    ScaleRows(Var, Arc<[f64]>),
    OverwriteRows(Var, Arc<[usize]>),
    PickPerRow(Var, Arc<[usize]>),
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    tracked: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    /// A differentiable leaf.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Matrix, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn check_log_input(&self, op: &'static str, v: Var) -> Result<()> {
        if self
            .value(v)
            .as_slice()
            .iter()
            .any(|x| x.is_nan() || *x == f64::INFINITY)
        {
            return Err(Error::Numeric(format!("{op}: NaN or +inf input")));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let t = self.tracked(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), t))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let t = self.tracked(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), t))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let t = self.tracked(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), t))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let t = self.tracked(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), t))
    }

    /// Adds a `1 x k` row to every row of an `n x k` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (n, k) = self.shape(a);
        if self.shape(row) != (1, k) {
            return Err(Error::shape(
                "add_row",
                format!("{n}x{k} plus {:?}", self.shape(row)),
            ));
        }
        let r = self.value(row).as_slice().to_vec();
        let mut out = self.value(a).clone();
        for i in 0..n {
            for (x, b) in out.row_mut(i).iter_mut().zip(&r) {
                *x += b;
            }
        }
        let t = self.tracked(&[a, row]);
        Ok(self.push(out, Op::AddRow(a, row), t))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        let t = self.tracked(&[a]);
        self.push(out, Op::Scale(a, s), t)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        let t = self.tracked(&[a]);
        self.push(out, Op::Relu(a), t)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        let t = self.tracked(&[a]);
        self.push(out, Op::Exp(a), t)
    }

    /// Row-wise `x - logsumexp(x)`.
    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.check_log_input("log_softmax_rows", a)?;
        let mut out = self.value(a).clone();
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            let lse = log_sum_exp(row);
            if !lse.is_finite() {
                return Err(Error::Numeric(format!(
                    "log_softmax_rows: row {i} has no finite entry"
                )));
            }
            row.iter_mut().for_each(|x| *x -= lse);
        }
        let t = self.tracked(&[a]);
        Ok(self.push(out, Op::LogSoftmaxRows(a), t))
    }

    pub fn logsumexp(&mut self, a: Var, axis: Axis) -> Result<Var> {
        self.check_log_input("logsumexp", a)?;
        let m = self.value(a);
        let out = match axis {
            Axis::Rows => {
                let vals = m.iter_rows().map(log_sum_exp).collect::<Vec<_>>();
                Matrix::from_vec(m.rows(), 1, vals)?
            }
            Axis::Cols => {
                let t = m.transpose();
                let vals = t.iter_rows().map(log_sum_exp).collect::<Vec<_>>();
                Matrix::from_vec(1, m.cols(), vals)?
            }
        };
        let t = self.tracked(&[a]);
        Ok(self.push(out, Op::LogSumExp(a, axis), t))
    }

    pub fn gather_rows(&mut self, a: Var, idx: Arc<[usize]>) -> Result<Var> {
        let n = self.shape(a).0;
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::shape(
                "gather_rows",
                format!("row {bad} of a {n}-row matrix"),
            ));
        }
        let out = self.value(a).gather_rows(&idx);
        let t = self.tracked(&[a]);
        Ok(self.push(out, Op::GatherRows(a, idx), t))
    }

    /// Sums rows that share a segment id: `out[seg[r]] += a[r]`.
    pub fn segment_sum(
        &mut self,
        a: Var,
        segment_ids: Arc<[usize]>,
        num_segments: usize,
    ) -> Result<Var> {
        let (n, k) = self.shape(a);
        if segment_ids.len() != n {
            return Err(Error::shape(
                "segment_sum",
                format!("{} segment ids for {n} rows", segment_ids.len()),
            ));
        }
        if let Some(&bad) = segment_ids.iter().find(|&&s| s >= num_segments) {
            return Err(Error::shape(
                "segment_sum",
                format!("segment id {bad} >= {num_segments}"),
            ));
        }
        let src = self.value(a);
        let mut out = Matrix::zeros(num_segments, k);
        for (r, &s) in segment_ids.iter().enumerate() {
            for (o, x) in out.row_mut(s).iter_mut().zip(src.row(r)) {
                *o += x;
            }
        }
        let t = self.tracked(&[a]);
        Ok(self.push(out, Op::SegmentSum(a, segment_ids), t))
    }

    /// Inverted dropout. `keep_prob == 1` returns `a` unchanged.
    pub fn dropout(&mut self, a: Var, keep_prob: f64, rng: &mut impl Rng) -> Result<Var> {
        if !(keep_prob > 0.0 && keep_prob <= 1.0) {
            return Err(Error::input(format!(
                "keep_prob must lie in (0, 1], got {keep_prob}"
            )));
        }
        if keep_prob == 1.0 {
            return Ok(a);
        }
        let scale = 1.0 / keep_prob;
        let mask: Arc<[f64]> = (0..self.value(a).len())
            .map(|_| if rng.gen::<f64>() < keep_prob { scale } else { 0.0 })
            .collect();
        let src = self.value(a);
        let data = src
            .as_slice()
            .iter()
            .zip(mask.iter())
            .map(|(x, m)| x * m)
            .collect();
        let out = Matrix::from_vec(src.rows(), src.cols(), data)?;
        let t = self.tracked(&[a]);
        Ok(self.push(out, Op::Dropout(a, mask), t))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let t = self.tracked(&[a]);
        self.push(out, Op::Transpose(a), t)
    }

    /// Matrix product in the log semiring:
    /// `out[r, i] = logsumexp_j (a[r, j] + b[j, i])`.
    pub fn log_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.shape(a);
        let (k2, m) = self.shape(b);
        if k != k2 {
            return Err(Error::shape(
                "log_matmul",
                format!("{n}x{k} with {k2}x{m}"),
            ));
        }
        self.check_log_input("log_matmul", a)?;
        self.check_log_input("log_matmul", b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Matrix::zeros(n, m);
        let mut buf = vec![0.0; k];
        for r in 0..n {
            let arow = av.row(r);
            for i in 0..m {
                for j in 0..k {
                    buf[j] = arow[j] + bv.get(j, i);
                }
                out.set(r, i, log_sum_exp(&buf));
            }
        }
        let t = self.tracked(&[a, b]);
        Ok(self.push(out, Op::LogMatMul(a, b), t))
    }

    /// Multiplies row `r` by the constant `factors[r]`.
    pub fn scale_rows(&mut self, a: Var, factors: Arc<[f64]>) -> Result<Var> {
        let n = self.shape(a).0;
        if factors.len() != n {
            return Err(Error::shape(
                "scale_rows",
                format!("{} factors for {n} rows", factors.len()),
            ));
        }
        let mut out = self.value(a).clone();
        for (r, &f) in factors.iter().enumerate() {
            out.row_mut(r).iter_mut().for_each(|x| *x *= f);
        }
        let t = self.tracked(&[a]);
        Ok(self.push(out, Op::ScaleRows(a, factors), t))
    }

    /// Replaces the listed rows with constant values; no gradient flows into
    /// the replaced rows.
    pub fn overwrite_rows(
        &mut self,
        a: Var,
        rows: Arc<[usize]>,
        values: &Matrix,
    ) -> Result<Var> {
        let (n, k) = self.shape(a);
        if values.shape() != (rows.len(), k) || rows.iter().any(|&r| r >= n) {
            return Err(Error::shape(
                "overwrite_rows",
                format!(
                    "{} rows / {:?} values into {n}x{k}",
                    rows.len(),
                    values.shape()
                ),
            ));
        }
        if rows.is_empty() {
            return Ok(a);
        }
        let mut out = self.value(a).clone();
        for (i, &r) in rows.iter().enumerate() {
            out.row_mut(r).copy_from_slice(values.row(i));
        }
        let t = self.tracked(&[a]);
        Ok(self.push(out, Op::OverwriteRows(a, rows), t))
    }

    /// `out[r] = a[r, cols[r]]` as an `n x 1` column.
    pub fn pick_per_row(&mut self, a: Var, cols: Arc<[usize]>) -> Result<Var> {
        let (n, k) = self.shape(a);
        if cols.len() != n || cols.iter().any(|&c| c >= k) {
            return Err(Error::shape(
                "pick_per_row",
                format!("{} indices into {n}x{k}", cols.len()),
            ));
        }
        let src = self.value(a);
        let vals = cols.iter().enumerate().map(|(r, &c)| src.get(r, c)).collect();
        let out = Matrix::from_vec(n, 1, vals)?;
        let t = self.tracked(&[a]);
        Ok(self.push(out, Op::PickPerRow(a, cols), t))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).as_slice().iter().sum();
        let t = self.tracked(&[a]);
        self.push(Matrix::scalar(s), Op::Sum(a), t)
    }

    /// Reverse pass from a `1 x 1` output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.shape(output) != (1, 1) {
            return Err(Error::input(format!(
                "backward needs a scalar output, got {:?}",
                self.shape(output)
            )));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let (lower, upper) = grads.split_at_mut(idx);
            let Some(g) = upper[0].as_ref() else {
                continue;
            };
            self.node_vjp(idx, g, lower);
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn node_vjp(&self, idx: usize, g: &Matrix, acc: &mut [Option<Matrix>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        let want = |v: Var| self.nodes[v.0].tracked;
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = val(*a).shape();
                let n = val(*b).cols();
                if want(*a) {
                    gemm_acc(acc, *a, Operand::plain(g), Operand::transposed(val(*b)), (m, n, k));
                }
                if want(*b) {
                    gemm_acc(acc, *b, Operand::transposed(val(*a)), Operand::plain(g), (k, m, n));
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if want(v) {
                        accumulate(acc, v, g, 1.0);
                    }
                }
            }
            Op::Sub(a, b) => {
                if want(*a) {
                    accumulate(acc, *a, g, 1.0);
                }
                if want(*b) {
                    accumulate(acc, *b, g, -1.0);
                }
            }
            Op::Mul(a, b) => {
                if want(*a) {
                    accumulate_owned(acc, *a, zip_map(g, val(*b), |g, y| g * y));
                }
                if want(*b) {
                    accumulate_owned(acc, *b, zip_map(g, val(*a), |g, x| g * x));
                }
            }
            Op::AddRow(a, row) => {
                if want(*a) {
                    accumulate(acc, *a, g, 1.0);
                }
                if want(*row) {
                    let s = slot(acc, *row, (1, g.cols()));
                    for r in g.iter_rows() {
                        for (o, x) in s.as_mut_slice().iter_mut().zip(r) {
                            *o += x;
                        }
                    }
                }
            }
            Op::Scale(a, s) => {
                if want(*a) {
                    accumulate(acc, *a, g, *s);
                }
            }
            Op::Relu(a) => {
                if want(*a) {
                    accumulate_owned(acc, *a, zip_map(g, val(*a), |g, x| if x > 0.0 { g } else { 0.0 }));
                }
            }
            Op::Exp(a) => {
                if want(*a) {
                    accumulate_owned(acc, *a, zip_map(g, out, |g, y| g * y));
                }
            }
            Op::LogSoftmaxRows(a) => {
                if want(*a) {
                    let s = slot(acc, *a, g.shape());
                    for r in 0..g.rows() {
                        let gr = g.row(r);
                        let total: f64 = gr.iter().sum();
                        let yr = out.row(r);
                        for ((o, gv), y) in s.row_mut(r).iter_mut().zip(gr).zip(yr) {
                            *o += gv - y.exp() * total;
                        }
                    }
                }
            }
            Op::LogSumExp(a, axis) => {
                if want(*a) {
                    let x = val(*a);
                    let s = slot(acc, *a, x.shape());
                    for r in 0..x.rows() {
                        for c in 0..x.cols() {
                            let (gi, oi) = match axis {
                                Axis::Rows => (g.get(r, 0), out.get(r, 0)),
                                Axis::Cols => (g.get(0, c), out.get(0, c)),
                            };
                            let d = gi * (x.get(r, c) - oi).exp();
                            s.set(r, c, s.get(r, c) + d);
                        }
                    }
                }
            }
            Op::GatherRows(a, idx) => {
                if want(*a) {
                    let s = slot(acc, *a, val(*a).shape());
                    for (r, &i) in idx.iter().enumerate() {
                        for (o, x) in s.row_mut(i).iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                }
            }
            Op::SegmentSum(a, seg) => {
                if want(*a) {
                    let s = slot(acc, *a, val(*a).shape());
                    for (r, &sid) in seg.iter().enumerate() {
                        for (o, x) in s.row_mut(r).iter_mut().zip(g.row(sid)) {
                            *o += x;
                        }
                    }
                }
            }
            Op::Dropout(a, mask) => {
                if want(*a) {
                    let d = g.as_slice().iter().zip(mask.iter()).map(|(gv, m)| gv * m).collect();
                    let d = Matrix::from_vec(g.rows(), g.cols(), d).expect("mask matches gradient");
                    accumulate_owned(acc, *a, d);
                }
            }
            Op::Transpose(a) => {
                if want(*a) {
                    accumulate_owned(acc, *a, g.transpose());
                }
            }
            Op::LogMatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (n, k) = av.shape();
                let m = bv.cols();
                let mut da = want(*a).then(|| Matrix::zeros(n, k));
                let mut db = want(*b).then(|| Matrix::zeros(k, m));
                for r in 0..n {
                    for i in 0..m {
                        let gi = g.get(r, i);
                        if gi == 0.0 {
                            continue;
                        }
                        let oi = out.get(r, i);
                        for j in 0..k {
                            let w = gi * (av.get(r, j) + bv.get(j, i) - oi).exp();
                            if let Some(da) = da.as_mut() {
                                da.set(r, j, da.get(r, j) + w);
                            }
                            if let Some(db) = db.as_mut() {
                                db.set(j, i, db.get(j, i) + w);
                            }
                        }
                    }
                }
                if let Some(da) = da {
                    accumulate_owned(acc, *a, da);
                }
                if let Some(db) = db {
                    accumulate_owned(acc, *b, db);
                }
            }
            Op::ScaleRows(a, f) => {
                if want(*a) {
                    let s = slot(acc, *a, g.shape());
                    for (r, &fr) in f.iter().enumerate() {
                        for (o, x) in s.row_mut(r).iter_mut().zip(g.row(r)) {
                            *o += fr * x;
                        }
                    }
                }
            }
            Op::OverwriteRows(a, rows) => {
                if want(*a) {
                    let mut d = g.clone();
                    for &r in rows.iter() {
                        d.row_mut(r).iter_mut().for_each(|x| *x = 0.0);
                    }
                    accumulate_owned(acc, *a, d);
                }
            }
            Op::PickPerRow(a, cols) => {
                if want(*a) {
                    let s = slot(acc, *a, val(*a).shape());
                    for (r, &c) in cols.iter().enumerate() {
                        s.set(r, c, s.get(r, c) + g.get(r, 0));
                    }
                }
            }
            Op::Sum(a) => {
                if want(*a) {
                    let gv = g.get(0, 0);
                    slot(acc, *a, val(*a).shape())
                        .as_mut_slice()
                        .iter_mut()
                        .for_each(|x| *x += gv);
                }
            }
        }
    }
}

/// Adds `a * b` to the gradient of `v`, creating it on first use.
fn gemm_acc(acc: &mut [Option<Matrix>], v: Var, a: Operand<'_>, b: Operand<'_>, dims: (usize, usize, usize)) {
    match &mut acc[v.0] {
        Some(slot) => gemm(a, b, slot, dims, 1.0),
        empty => *empty = Some(gemm_new(a, b, dims)),
    }
}

/// Adds `alpha * g` to the gradient of `v`.
fn accumulate(acc: &mut [Option<Matrix>], v: Var, g: &Matrix, alpha: f64) {
    match &mut acc[v.0] {
        Some(slot) => axpy(slot, g, alpha),
        empty if alpha == 1.0 => *empty = Some(g.clone()),
        empty => *empty = Some(g.map(|x| alpha * x)),
    }
}

/// Adds `d` to the gradient of `v`, taking ownership on first use.
fn accumulate_owned(acc: &mut [Option<Matrix>], v: Var, d: Matrix) {
    match &mut acc[v.0] {
        Some(slot) => axpy(slot, &d, 1.0),
        empty => *empty = Some(d),
    }
}

fn slot(acc: &mut [Option<Matrix>], v: Var, shape: (usize, usize)) -> &mut Matrix {
    acc[v.0].get_or_insert_with(|| Matrix::zeros(shape.0, shape.1))
}

fn axpy(dst: &mut Matrix, src: &Matrix, alpha: f64) {
    for (d, s) in dst.as_mut_slice().iter_mut().zip(src.as_slice()) {
        *d += alpha * s;
    }
}

fn zip_map(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    let data = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Matrix::from_vec(a.rows(), a.cols(), data).expect("same-shape operands")
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient with respect to `v`; zeros when no path reaches the output.
    pub fn get(&self, v: Var) -> Matrix {
        match self.grads.get(v.0).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }
}

/// Outcome of comparing tape gradients with central differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub coords_checked: usize,
}

/// Options for [`grad_check`].
#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Coarse finite-difference step.
    pub epsilon: f64,
    /// Relative errors are `|a - n| / max(|a|, |n|, floor * max(1, |f(x)|))`.
    /// Finite-difference round-off grows with `|f|`, so the floor does too.
    pub floor: f64,
    /// Check at most this many coordinates per parameter, chosen at random.
    pub max_coords_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            epsilon: 1e-3,
            floor: 1e-6,
            max_coords_per_param: None,
            seed: 0,
        }
    }
}

/// Compares the tape gradient of a scalar function against central finite
/// differences at steps `epsilon` and `epsilon / 2`, combined by Richardson
/// extrapolation. `f` receives a fresh tape and one parameter leaf per entry of
/// `params`, and must be deterministic.
pub fn grad_check<F>(f: F, params: &[Matrix], opts: GradCheckOptions) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    use rand::seq::index::sample;
    use rand::SeedableRng;

    let eval = |values: &[Matrix]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|m| tape.param(m.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).get(0, 0))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|m| tape.param(m.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let floor = opts.floor * tape.value(out).get(0, 0).abs().max(1.0);
    let grads = tape.backward(out)?;

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = params.to_vec();
    let mut report = GradCheck {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        coords_checked: 0,
    };
    for (p, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var);
        let len = params[p].len();
        let coords: Vec<usize> = match opts.max_coords_per_param {
            Some(k) if k < len => sample(&mut rng, len, k).into_vec(),
            _ => (0..len).collect(),
        };
        for c in coords {
            let orig = params[p].as_slice()[c];
            let mut central = |h: f64| -> Result<f64> {
                work[p].as_mut_slice()[c] = orig + h;
                let up = eval(&work)?;
                work[p].as_mut_slice()[c] = orig - h;
                let down = eval(&work)?;
                work[p].as_mut_slice()[c] = orig;
                Ok((up - down) / (2.0 * h))
            };
            // Richardson extrapolation cancels the h^2 error term, which lets
            // the step stay large enough to keep round-off small.
            let coarse = central(opts.epsilon)?;
            let fine = central(opts.epsilon / 2.0)?;
            let numeric = (4.0 * fine - coarse) / 3.0;
            let a = analytic.as_slice()[c];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(floor);
            report.max_abs_error = report.max_abs_error.max(abs);
            report.max_rel_error = report.max_rel_error.max(rel);
            report.coords_checked += 1;
        }
    }
    Ok(report)
}
