//! Brute-force reference computations used only for verification.
//!
//! Nothing here calls into [`crate::solver`]'s closed forms: the weighted
//! least-squares problem is solved on the dense vectorized Jacobian with a
//! pseudo-inverse, and the balance criterion is minimized over an explicit
//! kernel basis by solving its normal equations.

use nalgebra::{DMatrix, DVector};

use crate::adafactor::DiagWeights;
use crate::error::{Error, Result};
use crate::generator::{
    kernel_direction, unvectorize_direction, vectorize_direction, vectorized_jacobian, FactorDirection, FactorPair,
};
use crate::linalg::{pseudo_inverse, vec_col_major};
use crate::scalar::Scalar;
use crate::solver::UpdateDelta;

/// Relative singular-value cutoff for the oracle pseudo-inverse.
pub const PINV_CUTOFF: f64 = 1e-10;
/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Largest dense Jacobian (entries) the oracle will build.
pub const MAX_DENSE_ENTRIES: usize = 1_000_000;

fn desk_scale<T: Scalar>(fp: &FactorPair<T>) -> Result<()> {
    let (m, n, r) = (fp.rows(), fp.cols(), fp.rank());
    let entries = m * n * (m + n) * r;
    if entries > MAX_DENSE_ENTRIES {
        return Err(Error::InvalidArgument(format!(
            "oracle limited to {MAX_DENSE_ENTRIES} dense Jacobian entries; m={m}, n={n}, r={r} needs {entries}"
        )));
    }
    Ok(())
}

/// `sqrt` of the vectorized `H` diagonal, i.e. `sqrt(l_half_i r_half_j)` in
/// column-major order.
fn sqrt_h_diagonal<T: Scalar>(w: &DiagWeights<T>) -> DVector<T> {
    let (m, n) = (w.rows(), w.cols());
    DVector::from_fn(m * n, |k, _| (w.l_half()[k % m] * w.r_half()[k / m]).sqrt())
}

/// Minimum-Frobenius-norm minimizer of `|| J d - H^{-1} G ||_H`.
pub fn min_norm_update<T: Scalar>(fp: &FactorPair<T>, w: &DiagWeights<T>, g: &DMatrix<T>) -> Result<UpdateDelta<T>> {
    const OP: &str = "min_norm_update";
    desk_scale(fp)?;
    fp.ensure_weight_shape(OP, "G", g)?;
    w.ensure_weight_shape(OP, "weights", g)?;
    let d_sqrt = sqrt_h_diagonal(w);
    let jac = vectorized_jacobian(fp);
    let weighted_jac = DMatrix::from_fn(jac.nrows(), jac.ncols(), |i, j| d_sqrt[i] * jac[(i, j)]);
    let rhs = vec_col_major(&w.apply_h_inv(g)?).component_mul(&d_sqrt);
    let sol = pseudo_inverse(&weighted_jac, T::lit(PINV_CUTOFF)) * rhs;
    let dir = unvectorize_direction(fp, sol.as_slice());
    UpdateDelta::new(fp, dir.p, dir.q)
}

/// Balance-optimal minimizer found by brute force: the pseudo-inverse
/// solution shifted by the kernel combination that minimizes the weighted
/// imbalance `1/2 || dB A - B dA ||_H^2`.
pub fn brute_force_update<T: Scalar>(fp: &FactorPair<T>, w: &DiagWeights<T>, g: &DMatrix<T>) -> Result<UpdateDelta<T>> {
    let base = min_norm_update(fp, w, g)?;
    let r = fp.rank();
    let d_sqrt = sqrt_h_diagonal(w);
    let two = T::lit(2.0);

    // Kernel basis (B E_ij, -E_ij A). Shifting by c_k along basis k changes
    // dB A - B dA by 2 c_k B E_ij A.
    let basis: Vec<_> = (0..r * r)
        .map(|k| {
            let mut e = DMatrix::<T>::zeros(r, r);
            e[(k % r, k / r)] = T::one();
            kernel_direction(fp, &e)
        })
        .collect::<Result<_>>()?;
    let mut design = DMatrix::<T>::zeros(d_sqrt.len(), r * r);
    for (k, dir) in basis.iter().enumerate() {
        let effect = vec_col_major(&(&dir.p * fp.a() * two));
        design.set_column(k, &effect.component_mul(&d_sqrt));
    }
    let base_diff = vec_col_major(&(&base.d_b * fp.a() - fp.b() * &base.d_a)).component_mul(&d_sqrt);

    // normal equations of min_c || design c + base_diff ||
    let normal = design.transpose() * &design;
    let rhs = -(design.transpose() * base_diff);
    let coeffs = match normal.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => pseudo_inverse(&normal, T::lit(PINV_CUTOFF)) * rhs,
    };

    let mut flat = DVector::from_vec(vectorize_direction(&FactorDirection::new(base.d_b, base.d_a)));
    for (k, dir) in basis.iter().enumerate() {
        flat += DVector::from_vec(vectorize_direction(dir)) * coeffs[k];
    }
    let dir = unvectorize_direction(fp, flat.as_slice());
    UpdateDelta::new(fp, dir.p, dir.q)
}

/// Central differences `(f(X + h E_ij) - f(X - h E_ij)) / 2h`.
pub fn finite_diff_gradient<T: Scalar, F>(f: F, at: &DMatrix<T>, h: T) -> Result<DMatrix<T>>
where
    F: Fn(&DMatrix<T>) -> T,
{
    if !(h > T::zero()) {
        return Err(Error::InvalidArgument(format!("finite-difference step must be positive, got {h}")));
    }
    let mut grad = DMatrix::zeros(at.nrows(), at.ncols());
    let mut probe = at.clone();
    for j in 0..at.ncols() {
        for i in 0..at.nrows() {
            let orig = probe[(i, j)];
            probe[(i, j)] = orig + h;
            let up = f(&probe);
            probe[(i, j)] = orig - h;
            let down = f(&probe);
            probe[(i, j)] = orig;
            if !up.is_finite_value() || !down.is_finite_value() {
                return Err(Error::NonFinite { op: "finite_diff_gradient" });
            }
            grad[(i, j)] = (up - down) / (h + h);
        }
    }
    Ok(grad)
}
