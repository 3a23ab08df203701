//! Orthogonal projection onto the tangent subspace `range(J) = {P A + B Q}`.
//!
//! With `P_B` the projector onto the column space of `B` and `Q_A` the
//! projector onto the row space of `A`, every projection here has the form
//! `P_B Z + Z Q_A - P_B Z Q_A`. The weighted version uses the
//! `H`-orthogonal projectors
//!
//! ```text
//! P_B = B (B^T L^{1/2} B)^{-1} B^T L^{1/2}
//! Q_A = R^{1/2} A^T (A R^{1/2} A^T)^{-1} A
//! ```
//!
//! in all three terms, which is what makes the result idempotent and
//! self-adjoint under `<.,.>_H`. No regularization is applied: callers that
//! can hit rank-deficient factors must regularize first.

use nalgebra::DMatrix;

use crate::adafactor::DiagWeights;
use crate::error::{Error, Result};
use crate::generator::FactorPair;
use crate::linalg::{scale_cols, scale_rows, spd_condition, spd_inverse};
use crate::scalar::Scalar;

/// Gram matrices with condition above this are reported as singular.
pub const SINGULAR_CONDITION: f64 = 1e12;

fn checked_inverse<T: Scalar>(op: &'static str, gram: &DMatrix<T>) -> Result<DMatrix<T>> {
    let condition = spd_condition(gram);
    if condition > SINGULAR_CONDITION {
        return Err(Error::Singular { op, condition });
    }
    spd_inverse(gram).ok_or(Error::Singular { op, condition })
}

fn combine<T: Scalar>(b_side: DMatrix<T>, a_side: DMatrix<T>, cross: DMatrix<T>) -> DMatrix<T> {
    b_side + a_side - cross
}

/// Frobenius-orthogonal projection onto the tangent subspace at `fp`.
pub fn project_standard<T: Scalar>(fp: &FactorPair<T>, z: &DMatrix<T>) -> Result<DMatrix<T>> {
    const OP: &str = "project_standard";
    fp.ensure_weight_shape(OP, "Z", z)?;
    let (b, a) = (fp.b(), fp.a());
    let bt = b.transpose();
    let at = a.transpose();
    let btb_inv = checked_inverse(OP, &(&bt * b))?;
    let aat_inv = checked_inverse(OP, &(a * &at))?;

    // P_B Z and Z Q_A
    let pz = b * (&btb_inv * (&bt * z));
    let zq = (z * &at) * &aat_inv * a;
    let pzq = (&pz * &at) * &aat_inv * a;
    Ok(combine(pz, zq, pzq))
}

/// `H`-orthogonal projection onto the tangent subspace at `fp`.
pub fn project_weighted<T: Scalar>(fp: &FactorPair<T>, w: &DiagWeights<T>, z: &DMatrix<T>) -> Result<DMatrix<T>> {
    const OP: &str = "project_weighted";
    fp.ensure_weight_shape(OP, "Z", z)?;
    w.ensure_weight_shape(OP, "weights", z)?;
    let (b, a) = (fp.b(), fp.a());
    // B^T L^{1/2} (r x m) and R^{1/2} A^T (n x r)
    let bt_l = scale_cols(&b.transpose(), w.l_half());
    let r_at = scale_rows(w.r_half(), &a.transpose());
    let k_inv = checked_inverse(OP, &(&bt_l * b))?;
    let s_inv = checked_inverse(OP, &(a * &r_at))?;

    let pz = b * (&k_inv * (&bt_l * z));
    let zq = (z * &r_at) * &s_inv * a;
    let pzq = (&pz * &r_at) * &s_inv * a;
    Ok(combine(pz, zq, pzq))
}
