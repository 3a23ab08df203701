//! Small dense helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub(crate) fn ensure_shape<T: Scalar>(
    op: &'static str,
    what: &str,
    mat: &DMatrix<T>,
    rows: usize,
    cols: usize,
) -> Result<()> {
    if mat.nrows() != rows || mat.ncols() != cols {
        return Err(Error::DimensionMismatch {
            op,
            expected: format!("{what} {rows}x{cols}"),
            got: format!("{what} {}x{}", mat.nrows(), mat.ncols()),
        });
    }
    Ok(())
}

pub(crate) fn ensure_finite<T: Scalar>(op: &'static str, mat: &DMatrix<T>) -> Result<()> {
    if mat.iter().all(|x| x.is_finite_value()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

/// Frobenius pairing `<X, Y> = sum_ij X_ij Y_ij`.
pub fn frobenius_inner<T: Scalar>(x: &DMatrix<T>, y: &DMatrix<T>) -> T {
    x.dot(y)
}

/// `diag(left) * M * diag(right)` without materializing the diagonals.
pub fn diag_sandwich<T: Scalar>(left: &DVector<T>, mat: &DMatrix<T>, right: &DVector<T>) -> DMatrix<T> {
    DMatrix::from_fn(mat.nrows(), mat.ncols(), |i, j| left[i] * mat[(i, j)] * right[j])
}

/// `diag(v) * M`.
pub fn scale_rows<T: Scalar>(v: &DVector<T>, mat: &DMatrix<T>) -> DMatrix<T> {
    DMatrix::from_fn(mat.nrows(), mat.ncols(), |i, j| v[i] * mat[(i, j)])
}

/// `M * diag(v)`.
pub fn scale_cols<T: Scalar>(mat: &DMatrix<T>, v: &DVector<T>) -> DMatrix<T> {
    DMatrix::from_fn(mat.nrows(), mat.ncols(), |i, j| mat[(i, j)] * v[j])
}

/// Ratio of extreme eigenvalues of a symmetric matrix. Infinite when the
/// smallest eigenvalue is not positive.
pub fn spd_condition<T: Scalar>(gram: &DMatrix<T>) -> f64 {
    let eig = gram.clone().symmetric_eigen();
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for v in eig.eigenvalues.iter() {
        let v = v.as_f64();
        lo = lo.min(v);
        hi = hi.max(v.abs());
    }
    if lo <= 0.0 || !lo.is_finite() {
        f64::INFINITY
    } else {
        hi / lo
    }
}

/// Inverse of a symmetric positive-definite matrix via Cholesky.
pub fn spd_inverse<T: Scalar>(gram: &DMatrix<T>) -> Option<DMatrix<T>> {
    gram.clone().cholesky().map(|c| c.inverse())
}

/// Inverse of `gram + eps*I`. Cholesky first; an SVD pseudo-inverse takes over
/// if the regularized matrix is still not numerically positive definite.
pub(crate) fn regularized_inverse<T: Scalar>(op: &'static str, gram: &DMatrix<T>, eps: T) -> DMatrix<T> {
    let k = gram.nrows();
    let reg = gram + DMatrix::<T>::identity(k, k) * eps;
    let cond = spd_condition(&reg);
    if cond > 1e10 {
        log::warn!("{op}: regularized Gram condition number {cond:.3e} exceeds 1e10");
    }
    match spd_inverse(&reg) {
        Some(inv) => inv,
        None => pseudo_inverse(&reg, T::lit(1e-12)),
    }
}

/// Moore-Penrose pseudo-inverse with singular values below
/// `rel_cutoff * sigma_max` treated as zero.
pub fn pseudo_inverse<T: Scalar>(mat: &DMatrix<T>, rel_cutoff: T) -> DMatrix<T> {
    let svd = mat.clone().svd(true, true);
    let smax = svd.singular_values.iter().copied().fold(T::zero(), |a, b| a.max(b));
    let cutoff = smax * rel_cutoff;
    let u = svd.u.expect("U requested");
    let vt = svd.v_t.expect("V^T requested");
    let mut out = DMatrix::<T>::zeros(mat.ncols(), mat.nrows());
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s > cutoff && s > T::zero() {
            let inv = T::one() / s;
            out += vt.row(k).transpose() * u.column(k).transpose() * inv;
        }
    }
    out
}

/// Singular values in descending order.
pub fn singular_values<T: Scalar>(mat: &DMatrix<T>) -> Vec<T> {
    let mut s: Vec<T> = mat.clone().svd(false, false).singular_values.iter().copied().collect();
    s.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    s
}

/// Number of singular values above `rel_tol * sigma_max`.
pub fn numerical_rank<T: Scalar>(mat: &DMatrix<T>, rel_tol: T) -> usize {
    let s = singular_values(mat);
    let Some(&smax) = s.first() else { return 0 };
    if smax <= T::zero() {
        return 0;
    }
    s.iter().filter(|&&v| v > smax * rel_tol).count()
}

/// Column-major vectorization.
pub fn vec_col_major<T: Scalar>(mat: &DMatrix<T>) -> DVector<T> {
    DVector::from_column_slice(mat.as_slice())
}

/// Inverse of [`vec_col_major`].
pub fn unvec_col_major<T: Scalar>(v: &[T], rows: usize, cols: usize) -> DMatrix<T> {
    DMatrix::from_column_slice(rows, cols, v)
}
