//! Dense linear algebra: matrices, products and the SVD.

mod matrix;
mod svd;

pub use matrix::Matrix;
pub use svd::{svd, SvdResult, MAX_SWEEPS};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("data length {len} does not match {rows}x{cols}")]
    BadLength { rows: usize, cols: usize, len: usize },
    #[error("non-finite entry at flat index {index}")]
    NonFinite { index: usize },
    #[error("SVD of {rows}x{cols} matrix did not converge after {sweeps} sweeps")]
    SvdNoConvergence {
        rows: usize,
        cols: usize,
        sweeps: usize,
    },
}

impl LinalgError {
    pub(crate) fn shape(op: &'static str, left: (usize, usize), right: (usize, usize)) -> Self {
        Self::ShapeMismatch { op, left, right }
    }
}

/// Strided description of an operand for `gemm`.
#[derive(Clone, Copy)]
struct View<'a> {
    data: &'a [f64],
    rows: usize,
    cols: usize,
    row_stride: isize,
    col_stride: isize,
}

impl<'a> View<'a> {
    fn plain(m: &'a Matrix) -> Self {
        Self {
            data: m.as_slice(),
            rows: m.rows(),
            cols: m.cols(),
            row_stride: m.cols() as isize,
            col_stride: 1,
        }
    }

    fn transposed(m: &'a Matrix) -> Self {
        Self {
            data: m.as_slice(),
            rows: m.cols(),
            cols: m.rows(),
            row_stride: 1,
            col_stride: m.cols() as isize,
        }
    }
}

fn gemm(op: &'static str, a: View<'_>, b: View<'_>) -> Result<Matrix, LinalgError> {
    if a.cols != b.rows {
        return Err(LinalgError::shape(op, (a.rows, a.cols), (b.rows, b.cols)));
    }
    let mut c = Matrix::zeros(a.rows, b.cols);
    if a.rows == 0 || b.cols == 0 || a.cols == 0 {
        return Ok(c);
    }
    let n = b.cols;
    // SAFETY: the views describe in-bounds strided layouts of the borrowed
    // slices, and `c` is a freshly allocated a.rows x b.cols buffer.
    unsafe {
        matrixmultiply::dgemm(
            a.rows,
            a.cols,
            n,
            1.0,
            a.data.as_ptr(),
            a.row_stride,
            a.col_stride,
            b.data.as_ptr(),
            b.row_stride,
            b.col_stride,
            0.0,
            c.as_mut_slice().as_mut_ptr(),
            n as isize,
            1,
        );
    }
    Ok(c)
}

/// `a · b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix, LinalgError> {
    gemm("matmul", View::plain(a), View::plain(b))
}

/// `aᵀ · b` without materializing the transpose.
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Result<Matrix, LinalgError> {
    gemm("matmul_tn", View::transposed(a), View::plain(b))
}

/// `a · bᵀ` without materializing the transpose.
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix, LinalgError> {
    gemm("matmul_nt", View::plain(a), View::transposed(b))
}

/// Frobenius inner product `tr(aᵀ b)`.
pub fn frobenius_inner(a: &Matrix, b: &Matrix) -> Result<f64, LinalgError> {
    if a.shape() != b.shape() {
        return Err(LinalgError::shape("frobenius_inner", a.shape(), b.shape()));
    }
    Ok(a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| x * y).sum())
}

/// Outer product `u vᵀ`.
pub fn outer(u: &[f64], v: &[f64]) -> Matrix {
    Matrix::from_fn(u.len(), v.len(), |i, j| u[i] * v[j])
}
