//! The generator map `[B, A] -> B A` and its first-order calculus.
//!
//! For factors `B` (m x r) and `A` (r x n) the Jacobian sends a factor
//! direction `(P, Q)` to the weight-space direction `P A + B Q`. Its adjoint
//! under the Frobenius pairing is `C -> (C A^T, B^T C)`. At full-rank factors
//! the Jacobian has an `r^2`-dimensional kernel spanned by `(B X, -X A)`,
//! which is the infinitesimal form of the gauge `(B, A) -> (B C, C^-1 A)`.
//!
//! Rank statements in this module hold only when `B` has full column rank
//! and `A` has full row rank. At `B = 0` (the usual initialization) the
//! operators are still well defined but the kernel is larger.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::ensure_shape;
use crate::scalar::Scalar;

/// Trainable low-rank factors `B` (m x r) and `A` (r x n).
#[derive(Debug, Clone, PartialEq)]
pub struct FactorPair<T: Scalar> {
    b: DMatrix<T>,
    a: DMatrix<T>,
}

impl<T: Scalar> FactorPair<T> {
    pub fn new(b: DMatrix<T>, a: DMatrix<T>) -> Result<Self> {
        let (m, r) = b.shape();
        let (ra, n) = a.shape();
        if r != ra {
            return Err(Error::DimensionMismatch {
                op: "FactorPair::new",
                expected: format!("A with {r} rows"),
                got: format!("A with {ra} rows"),
            });
        }
        if r == 0 || m == 0 || n == 0 || r > m.min(n) {
            return Err(Error::InvalidArgument(format!(
                "factor rank must satisfy 1 <= r <= min(m, n); got m={m}, n={n}, r={r}"
            )));
        }
        Ok(Self { b, a })
    }

    pub fn b(&self) -> &DMatrix<T> {
        &self.b
    }

    pub fn a(&self) -> &DMatrix<T> {
        &self.a
    }

    pub fn into_parts(self) -> (DMatrix<T>, DMatrix<T>) {
        (self.b, self.a)
    }

    pub fn rows(&self) -> usize {
        self.b.nrows()
    }

    pub fn cols(&self) -> usize {
        self.a.ncols()
    }

    pub fn rank(&self) -> usize {
        self.b.ncols()
    }

    /// The represented weight change `B A`.
    pub fn product(&self) -> DMatrix<T> {
        &self.b * &self.a
    }

    pub(crate) fn ensure_weight_shape(&self, op: &'static str, what: &str, c: &DMatrix<T>) -> Result<()> {
        ensure_shape(op, what, c, self.rows(), self.cols())
    }

    pub(crate) fn ensure_direction(&self, op: &'static str, d: &FactorDirection<T>) -> Result<()> {
        ensure_shape(op, "P", &d.p, self.rows(), self.rank())?;
        ensure_shape(op, "Q", &d.q, self.rank(), self.cols())
    }
}

/// A tangent direction `(P, Q)` in factor space.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorDirection<T: Scalar> {
    pub p: DMatrix<T>,
    pub q: DMatrix<T>,
}

impl<T: Scalar> FactorDirection<T> {
    pub fn new(p: DMatrix<T>, q: DMatrix<T>) -> Self {
        Self { p, q }
    }

    pub fn zeros(fp: &FactorPair<T>) -> Self {
        Self {
            p: DMatrix::zeros(fp.rows(), fp.rank()),
            q: DMatrix::zeros(fp.rank(), fp.cols()),
        }
    }

    /// Frobenius pairing on the product space.
    pub fn inner(&self, other: &Self) -> T {
        self.p.dot(&other.p) + self.q.dot(&other.q)
    }

    pub fn norm(&self) -> T {
        self.inner(self).sqrt()
    }
}

/// `J(P, Q) = P A + B Q`.
pub fn apply_jacobian<T: Scalar>(fp: &FactorPair<T>, d: &FactorDirection<T>) -> Result<DMatrix<T>> {
    fp.ensure_direction("apply_jacobian", d)?;
    Ok(&d.p * fp.a() + fp.b() * &d.q)
}

/// `J*(C) = (C A^T, B^T C)`.
pub fn apply_adjoint<T: Scalar>(fp: &FactorPair<T>, c: &DMatrix<T>) -> Result<FactorDirection<T>> {
    fp.ensure_weight_shape("apply_adjoint", "C", c)?;
    Ok(FactorDirection {
        p: c * fp.a().transpose(),
        q: fp.b().transpose() * c,
    })
}

/// `J J*(C) = C A^T A + B B^T C`.
pub fn jacobian_gram_w<T: Scalar>(fp: &FactorPair<T>, c: &DMatrix<T>) -> Result<DMatrix<T>> {
    fp.ensure_weight_shape("jacobian_gram_w", "C", c)?;
    let (b, a) = (fp.b(), fp.a());
    Ok(c * (a.transpose() * a) + (b * b.transpose()) * c)
}

/// `J* J(P, Q) = (P A A^T + B Q A^T, B^T P A + B^T B Q)`.
pub fn jacobian_gram_factor<T: Scalar>(fp: &FactorPair<T>, d: &FactorDirection<T>) -> Result<FactorDirection<T>> {
    fp.ensure_direction("jacobian_gram_factor", d)?;
    let (b, a) = (fp.b(), fp.a());
    let bt = b.transpose();
    let at = a.transpose();
    Ok(FactorDirection {
        p: &d.p * (a * &at) + b * &d.q * &at,
        q: &bt * &d.p * a + (&bt * b) * &d.q,
    })
}

/// Kernel direction `(B X, -X A)` generated by an r x r matrix `X`.
pub fn kernel_direction<T: Scalar>(fp: &FactorPair<T>, x: &DMatrix<T>) -> Result<FactorDirection<T>> {
    ensure_shape("kernel_direction", "X", x, fp.rank(), fp.rank())?;
    Ok(FactorDirection {
        p: fp.b() * x,
        q: -(x * fp.a()),
    })
}

/// Dense `(m n) x ((m + n) r)` matrix of the Jacobian.
///
/// Column ordering: entries of `P` in column-major order, then entries of `Q`
/// in column-major order. Rows follow the column-major vectorization of the
/// m x n output. Intended for desk-scale oracle work only.
pub fn vectorized_jacobian<T: Scalar>(fp: &FactorPair<T>) -> DMatrix<T> {
    let (m, n, r) = (fp.rows(), fp.cols(), fp.rank());
    let (b, a) = (fp.b(), fp.a());
    let mut jac = DMatrix::<T>::zeros(m * n, (m + n) * r);
    // P = E_ij contributes row i of the output equal to row j of A.
    for j in 0..r {
        for i in 0..m {
            let col = i + j * m;
            for c in 0..n {
                jac[(i + c * m, col)] = a[(j, c)];
            }
        }
    }
    // Q = E_ij contributes column j of the output equal to column i of B.
    for j in 0..n {
        for i in 0..r {
            let col = m * r + i + j * r;
            for p in 0..m {
                jac[(p + j * m, col)] = b[(p, i)];
            }
        }
    }
    jac
}

/// Flattens a direction in the column order used by [`vectorized_jacobian`].
pub fn vectorize_direction<T: Scalar>(d: &FactorDirection<T>) -> Vec<T> {
    d.p.as_slice().iter().chain(d.q.as_slice()).copied().collect()
}

/// Inverse of [`vectorize_direction`] for the shapes of `fp`.
pub fn unvectorize_direction<T: Scalar>(fp: &FactorPair<T>, v: &[T]) -> FactorDirection<T> {
    let (m, n, r) = (fp.rows(), fp.cols(), fp.rank());
    FactorDirection {
        p: DMatrix::from_column_slice(m, r, &v[..m * r]),
        q: DMatrix::from_column_slice(r, n, &v[m * r..m * r + r * n]),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{numerical_rank, vec_col_major};
    use crate::sampling::{random_direction, random_full_rank_pair, random_matrix, rng_from_seed};

    fn m(rows: usize, cols: usize, data: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(rows, cols, data)
    }

    fn e1_pair() -> FactorPair<f64> {
        FactorPair::new(m(2, 1, &[1.0, 0.0]), m(1, 2, &[1.0, 0.0])).unwrap()
    }

    #[test]
    fn factor_pair_rejects_bad_shapes() {
        assert!(FactorPair::new(DMatrix::<f64>::zeros(3, 2), DMatrix::zeros(1, 3)).is_err());
        assert!(FactorPair::new(DMatrix::<f64>::zeros(2, 3), DMatrix::zeros(3, 2)).is_err());
        assert!(FactorPair::new(DMatrix::<f64>::zeros(2, 0), DMatrix::zeros(0, 2)).is_err());
    }

    #[test]
    fn jacobian_hand_example() {
        let fp = e1_pair();
        let d = FactorDirection::new(m(2, 1, &[0.0, 1.0]), m(1, 2, &[0.0, 1.0]));
        assert_eq!(apply_jacobian(&fp, &d).unwrap(), m(2, 2, &[0.0, 1.0, 1.0, 0.0]));
        let zero = FactorDirection::zeros(&fp);
        assert_eq!(apply_jacobian(&fp, &zero).unwrap(), DMatrix::zeros(2, 2));
        let k = FactorDirection::new(fp.b().clone(), -fp.a().clone());
        assert_eq!(apply_jacobian(&fp, &k).unwrap(), DMatrix::zeros(2, 2));
    }

    #[test]
    fn jacobian_shape_mismatch() {
        let fp = e1_pair();
        let d = FactorDirection::new(DMatrix::zeros(3, 1), DMatrix::zeros(1, 2));
        assert!(matches!(apply_jacobian(&fp, &d), Err(Error::DimensionMismatch { .. })));
        assert!(apply_adjoint(&fp, &DMatrix::zeros(2, 3)).is_err());
        assert!(kernel_direction(&fp, &DMatrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn adjoint_hand_example() {
        let fp = e1_pair();
        let id = DMatrix::<f64>::identity(2, 2);
        let d = apply_adjoint(&fp, &id).unwrap();
        assert_eq!(d.p, m(2, 1, &[1.0, 0.0]));
        assert_eq!(d.q, m(1, 2, &[1.0, 0.0]));
        assert_eq!(apply_adjoint(&fp, &DMatrix::zeros(2, 2)).unwrap(), FactorDirection::zeros(&fp));
        // both sides of the pairing vanish for the Jacobian example direction
        let dir = FactorDirection::new(m(2, 1, &[0.0, 1.0]), m(1, 2, &[0.0, 1.0]));
        let lhs = apply_jacobian(&fp, &dir).unwrap().dot(&id);
        let rhs = dir.inner(&d);
        assert_eq!(lhs, 0.0);
        assert_eq!(rhs, 0.0);
    }

    #[test]
    fn gram_w_hand_example() {
        let fp = e1_pair();
        let out = jacobian_gram_w(&fp, &DMatrix::identity(2, 2)).unwrap();
        assert_eq!(out, m(2, 2, &[2.0, 0.0, 0.0, 0.0]));
        assert_eq!(jacobian_gram_w(&fp, &DMatrix::zeros(2, 2)).unwrap(), DMatrix::zeros(2, 2));
    }

    #[test]
    fn gram_factor_hand_example() {
        let fp = e1_pair();
        let d = FactorDirection::new(m(2, 1, &[0.0, 1.0]), m(1, 2, &[0.0, 1.0]));
        let out = jacobian_gram_factor(&fp, &d).unwrap();
        assert_eq!(out.p, m(2, 1, &[0.0, 1.0]));
        assert_eq!(out.q, m(1, 2, &[0.0, 1.0]));
        let z = FactorDirection::zeros(&fp);
        assert_eq!(jacobian_gram_factor(&fp, &z).unwrap(), z);
    }

    #[test]
    fn grams_match_compositions() {
        let mut rng = rng_from_seed(11);
        for _ in 0..50 {
            let fp = random_full_rank_pair::<f64>(&mut rng, 5, 4, 2);
            let c = random_matrix(&mut rng, 5, 4);
            let composed = apply_jacobian(&fp, &apply_adjoint(&fp, &c).unwrap()).unwrap();
            let direct = jacobian_gram_w(&fp, &c).unwrap();
            assert!((composed - direct).norm() <= 1e-12 * (1.0 + c.norm()));

            let d = random_direction(&mut rng, &fp);
            let composed = apply_adjoint(&fp, &apply_jacobian(&fp, &d).unwrap()).unwrap();
            let direct = jacobian_gram_factor(&fp, &d).unwrap();
            let diff = FactorDirection::new(&composed.p - &direct.p, &composed.q - &direct.q);
            assert!(diff.norm() <= 1e-12 * (1.0 + d.norm()));
        }
    }

    #[test]
    fn kernel_direction_cases() {
        let fp = e1_pair();
        let zero = kernel_direction(&fp, &DMatrix::zeros(1, 1)).unwrap();
        assert_eq!(zero, FactorDirection::zeros(&fp));
        let id = kernel_direction(&fp, &DMatrix::identity(1, 1)).unwrap();
        assert_eq!(id.p, *fp.b());
        assert_eq!(id.q, -fp.a().clone());

        let mut rng = rng_from_seed(3);
        for _ in 0..20 {
            let fp = random_full_rank_pair::<f64>(&mut rng, 6, 5, 3);
            let x = random_matrix(&mut rng, 3, 3);
            let img = apply_jacobian(&fp, &kernel_direction(&fp, &x).unwrap()).unwrap();
            let scale = fp.b().norm() * x.norm() * fp.a().norm();
            assert!(img.norm() <= 1e-12 * scale);
        }
    }

    #[test]
    fn vectorized_scalar_case() {
        let fp = FactorPair::new(m(1, 1, &[2.0]), m(1, 1, &[3.0])).unwrap();
        assert_eq!(vectorized_jacobian(&fp), m(1, 2, &[3.0, 2.0]));
    }

    #[test]
    fn vectorized_rank_and_matvec() {
        let mut rng = rng_from_seed(5);
        let fp = random_full_rank_pair::<f64>(&mut rng, 4, 3, 2);
        let jac = vectorized_jacobian(&fp);
        assert_eq!(numerical_rank(&jac, 1e-8), (4 + 3) * 2 - 4);
        for _ in 0..50 {
            let d = random_direction(&mut rng, &fp);
            let v = nalgebra::DVector::from_vec(vectorize_direction(&d));
            let lhs = &jac * v;
            let rhs = vec_col_major(&apply_jacobian(&fp, &d).unwrap());
            assert!((lhs - rhs).norm() <= 1e-12 * (1.0 + d.norm()));
        }
    }

    #[test]
    fn direction_vectorization_round_trip() {
        let mut rng = rng_from_seed(9);
        let fp = random_full_rank_pair::<f64>(&mut rng, 4, 5, 2);
        let d = random_direction(&mut rng, &fp);
        assert_eq!(unvectorize_direction(&fp, &vectorize_direction(&d)), d);
    }

    #[test]
    fn works_in_single_precision() {
        let fp = FactorPair::new(
            DMatrix::from_row_slice(2, 1, &[1.0f32, 0.0]),
            DMatrix::from_row_slice(1, 2, &[1.0f32, 0.0]),
        )
        .unwrap();
        let k = kernel_direction(&fp, &DMatrix::identity(1, 1)).unwrap();
        assert_eq!(apply_jacobian(&fp, &k).unwrap(), DMatrix::zeros(2, 2));
    }
}
