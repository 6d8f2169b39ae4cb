//! Dense row-major `f64` matrices and the matmul kernel.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "from_vec",
                format!("{} values for a {rows}x{cols} matrix", data.len()),
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows. An empty slice yields 0x0.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::shape(
                    "from_rows",
                    format!("row {i} has {} entries, expected {cols}", r.len()),
                ));
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn scalar(v: f64) -> Self {
        Matrix {
            rows: 1,
            cols: 1,
            data: vec![v],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact(0) panics, so handle zero-width matrices separately
        let cols = self.cols.max(1);
        let n = if self.cols == 0 { 0 } else { self.rows };
        self.data.chunks_exact(cols).take(n)
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn gather_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::shape(
                "matmul",
                format!(
                    "{}x{} times {}x{}",
                    self.rows, self.cols, other.rows, other.cols
                ),
            ));
        }
        Ok(gemm_new(
            Operand::plain(self),
            Operand::plain(other),
            (self.rows, self.cols, other.cols),
        ))
    }
}

/// Strided view of a matrix operand, letting transposes be free.
#[derive(Clone, Copy)]
pub(crate) struct Operand<'a> {
    pub data: &'a [f64],
    pub row_stride: isize,
    pub col_stride: isize,
}

impl<'a> Operand<'a> {
    pub fn plain(m: &'a Matrix) -> Self {
        Operand {
            data: &m.data,
            row_stride: m.cols as isize,
            col_stride: 1,
        }
    }

    pub fn transposed(m: &'a Matrix) -> Self {
        Operand {
            data: &m.data,
            row_stride: 1,
            col_stride: m.cols as isize,
        }
    }
}

struct SendPtr(*mut f64);
unsafe impl Send for SendPtr {}
unsafe impl Sync for SendPtr {}

const PAR_MIN_ROWS: usize = 256;
const PAR_CHUNK_ROWS: usize = 128;

/// `out = a * b + beta * out` for an `m x k` by `k x n` product.
///
/// With more than one rayon thread available the output rows are split into
/// fixed-size blocks. Every output element is still produced by the same
/// kernel with the same reduction order, so results are bit-identical to the
/// single-threaded path.
pub(crate) fn gemm(
    a: Operand<'_>,
    b: Operand<'_>,
    out: &mut Matrix,
    dims: (usize, usize, usize),
    beta: f64,
) {
    debug_assert_eq!(out.shape(), (dims.0, dims.2));
    // SAFETY: `out` holds exactly m x n initialised elements.
    unsafe { gemm_raw(a, b, out.data.as_mut_ptr(), dims, beta) }
}

/// `a * b` into a fresh matrix, without zero-filling the output first.
pub(crate) fn gemm_new(a: Operand<'_>, b: Operand<'_>, (m, k, n): (usize, usize, usize)) -> Matrix {
    if k == 0 {
        return Matrix::zeros(m, n);
    }
    let mut data = Vec::<f64>::with_capacity(m * n);
    // SAFETY: with beta = 0 the kernel writes every one of the m x n output
    // elements without reading them, so the buffer is fully initialised
    // before `set_len`.
    unsafe {
        gemm_raw(a, b, data.as_mut_ptr(), (m, k, n), 0.0);
        data.set_len(m * n);
    }
    Matrix { rows: m, cols: n, data }
}

/// # Safety
/// `c` must be valid for writes of `m * n` elements, and for reads as well
/// unless `beta == 0`.
unsafe fn gemm_raw(a: Operand<'_>, b: Operand<'_>, c: *mut f64, (m, k, n): (usize, usize, usize), beta: f64) {
    if m == 0 || n == 0 {
        return;
    }
    let c_ptr = SendPtr(c);
    let c_rs = n as isize;
    let run = |r0: usize, r1: usize| {
        let c = &c_ptr;
        // SAFETY: operand slices cover every strided element addressed by the
        // kernel for rows r0..r1, and distinct row blocks of the output never
        // alias.
        unsafe {
            matrixmultiply::dgemm(
                r1 - r0,
                k,
                n,
                1.0,
                a.data.as_ptr().offset(r0 as isize * a.row_stride),
                a.row_stride,
                a.col_stride,
                b.data.as_ptr(),
                b.row_stride,
                b.col_stride,
                beta,
                c.0.offset(r0 as isize * c_rs),
                c_rs,
                1,
            );
        }
    };
    if rayon::current_num_threads() > 1 && m >= PAR_MIN_ROWS {
        let blocks: Vec<usize> = (0..m).step_by(PAR_CHUNK_ROWS).collect();
        blocks
            .par_iter()
            .for_each(|&r0| run(r0, (r0 + PAR_CHUNK_ROWS).min(m)));
    } else {
        run(0, m);
    }
}

/// Numerically stable `ln(sum(exp(xs)))`. Returns `-inf` for an empty or
/// all-`-inf` slice.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}
