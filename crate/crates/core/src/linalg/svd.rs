//! Thin SVD by one-sided (Hestenes) Jacobi rotations.
//!
//! The shorter dimension is orthogonalized column by column; columns are
//! kept contiguous so every rotation is a pair of streaming passes.

use super::{LinalgError, Matrix};

/// Sweep cap before reporting non-convergence.
pub const MAX_SWEEPS: usize = 60;

/// `W = U · diag(S) · Vᵀ` with zero singular values dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdResult {
    /// n×r, orthonormal columns.
    pub u: Matrix,
    /// r singular values, strictly positive and descending.
    pub s: Vec<f64>,
    /// m×r, orthonormal columns.
    pub v: Matrix,
}

impl SvdResult {
    pub fn rank(&self) -> usize {
        self.s.len()
    }

    /// Dense `U · diag(S) · Vᵀ`.
    pub fn reconstruct(&self) -> Matrix {
        let us = self.u.scale_columns(&self.s).expect("u and s agree");
        super::matmul_nt(&us, &self.v).expect("u and v agree")
    }
}

#[inline]
fn dots(a: &[f64], b: &[f64]) -> (f64, f64, f64) {
    let (mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        aa += x * x;
        bb += y * y;
        ab += x * y;
    }
    (aa, bb, ab)
}

#[inline]
fn rotate(a: &mut [f64], b: &mut [f64], c: f64, s: f64) {
    for (x, y) in a.iter_mut().zip(b.iter_mut()) {
        let (xp, yp) = (*x, *y);
        *x = c * xp - s * yp;
        *y = s * xp + c * yp;
    }
}

/// Borrows columns `p < q` of a contiguous column store mutably at once.
fn pair_mut(store: &mut [f64], len: usize, p: usize, q: usize) -> (&mut [f64], &mut [f64]) {
    debug_assert!(p < q);
    let (head, tail) = store.split_at_mut(q * len);
    (&mut head[p * len..(p + 1) * len], &mut tail[..len])
}

/// Singular value decomposition of `w`.
///
/// Singular values at or below `max(n, m) · ε · s₁` are dropped along with
/// their vectors. Each `u_i` is signed so that its largest-magnitude entry
/// is nonnegative (first such entry on ties), with `v_i` flipped to match.
pub fn svd(w: &Matrix) -> Result<SvdResult, LinalgError> {
    let (n, m) = w.shape();
    if !w.is_finite() {
        let index = w.as_slice().iter().position(|x| !x.is_finite()).unwrap_or(0);
        return Err(LinalgError::NonFinite { index });
    }
    if n == 0 || m == 0 {
        return Ok(SvdResult {
            u: Matrix::zeros(n, 0),
            s: Vec::new(),
            v: Matrix::zeros(m, 0),
        });
    }

    // Orthogonalize the k = min(n, m) columns of W (or of Wᵀ when wide).
    let transposed = n < m;
    let (len, k) = if transposed { (m, n) } else { (n, m) };
    let mut cols = if transposed {
        w.as_slice().to_vec()
    } else {
        w.transpose().into_vec()
    };
    let mut right = Matrix::identity(k).into_vec();

    let tol = (len as f64).sqrt() * f64::EPSILON;
    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..k {
            for q in p + 1..k {
                let (ap, aq) = pair_mut(&mut cols, len, p, q);
                let (alpha, beta, gamma) = dots(ap, aq);
                if gamma == 0.0 || alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                if gamma.abs() <= tol * (alpha.sqrt() * beta.sqrt()) {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + zeta.hypot(1.0));
                let c = 1.0 / t.hypot(1.0);
                let s = c * t;
                rotate(ap, aq, c, s);
                let (vp, vq) = pair_mut(&mut right, k, p, q);
                rotate(vp, vq, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(LinalgError::SvdNoConvergence {
            rows: n,
            cols: m,
            sweeps: MAX_SWEEPS,
        });
    }

    let norms: Vec<f64> = cols
        .chunks_exact(len)
        .map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..k).collect();
    // Stable sort: equal values keep column order.
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]));
    let largest = norms[order[0]];
    let threshold = n.max(m) as f64 * f64::EPSILON * largest;
    order.retain(|&j| norms[j] > threshold && norms[j] > 0.0);

    let r = order.len();
    let mut left_vecs = Matrix::zeros(len, r);
    let mut right_vecs = Matrix::zeros(k, r);
    let mut s = Vec::with_capacity(r);
    for (out, &j) in order.iter().enumerate() {
        let sigma = norms[j];
        let col = &cols[j * len..(j + 1) * len];
        let rv = &right[j * k..(j + 1) * k];
        for i in 0..len {
            left_vecs.set(i, out, col[i] / sigma);
        }
        for i in 0..k {
            right_vecs.set(i, out, rv[i]);
        }
        s.push(sigma);
    }

    let (mut u, mut v) = if transposed {
        (right_vecs, left_vecs)
    } else {
        (left_vecs, right_vecs)
    };
    fix_signs(&mut u, &mut v);
    Ok(SvdResult { u, s, v })
}

fn fix_signs(u: &mut Matrix, v: &mut Matrix) {
    for j in 0..u.cols() {
        let mut best = 0.0f64;
        let mut sign = 1.0;
        for i in 0..u.rows() {
            let x = u.get(i, j);
            if x.abs() > best {
                best = x.abs();
                sign = x.signum();
            }
        }
        if sign < 0.0 {
            for i in 0..u.rows() {
                u.set(i, j, -u.get(i, j));
            }
            for i in 0..v.rows() {
                v.set(i, j, -v.get(i, j));
            }
        }
    }
}
