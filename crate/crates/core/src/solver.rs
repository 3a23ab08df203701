//! Weighted least-squares factor update.
//!
//! The factor update `(dB, dA)` minimizes `|| dB A + B dA - H^{-1} G ||_H`.
//! That problem has an `r^2`-parameter family of minimizers
//!
//! ```text
//! dB(X) = (I - P_B) L^{-1/2} G_B S^{-1} - B X
//! dA(X) = K^{-1} G_A R^{-1/2} + X A
//! K = B^T L^{1/2} B + eps I,   S = A R^{1/2} A^T + eps I
//! P_B = B K^{-1} B^T L^{1/2},  Q_A = R^{1/2} A^T S^{-1} A
//! ```
//!
//! all sharing the same weight-space image. Minimizing the imbalance
//! `1/2 || dB A - B dA ||_H^2` over `X` selects
//! `X* = -1/2 K^{-1} G_A A^T S^{-1}`, which gives the closed form
//!
//! ```text
//! dB = (I - 1/2 P_B) L^{-1/2} G_B S^{-1}
//! dA = K^{-1} G_A R^{-1/2} (I - 1/2 Q_A)
//! ```
//!
//! `eps I` is always added to both r x r Grams.

use nalgebra::DMatrix;

use crate::adafactor::DiagWeights;
use crate::error::{Error, Result};
use crate::generator::FactorPair;
use crate::linalg::{ensure_finite, ensure_shape, regularized_inverse, scale_cols, scale_rows};
use crate::scalar::Scalar;

/// Weight-space gradient `G` together with the factor gradients it induces.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle<T: Scalar> {
    g: Option<DMatrix<T>>,
    g_b: DMatrix<T>,
    g_a: DMatrix<T>,
}

impl<T: Scalar> GradientBundle<T> {
    /// Builds `G_B = G A^T` and `G_A = B^T G` from the weight gradient.
    pub fn from_w_gradient(fp: &FactorPair<T>, g: DMatrix<T>) -> Result<Self> {
        const OP: &str = "GradientBundle::from_w_gradient";
        fp.ensure_weight_shape(OP, "G", &g)?;
        ensure_finite(OP, &g)?;
        Ok(Self {
            g_b: &g * fp.a().transpose(),
            g_a: fp.b().transpose() * &g,
            g: Some(g),
        })
    }

    /// Bundle from factor-space quantities alone (e.g. factor-space momentum
    /// buffers). No weight-space gradient is attached.
    pub fn from_factor_gradients(fp: &FactorPair<T>, g_b: DMatrix<T>, g_a: DMatrix<T>) -> Result<Self> {
        const OP: &str = "GradientBundle::from_factor_gradients";
        ensure_shape(OP, "G_B", &g_b, fp.rows(), fp.rank())?;
        ensure_shape(OP, "G_A", &g_a, fp.rank(), fp.cols())?;
        ensure_finite(OP, &g_b)?;
        ensure_finite(OP, &g_a)?;
        Ok(Self { g: None, g_b, g_a })
    }

    pub fn g(&self) -> Option<&DMatrix<T>> {
        self.g.as_ref()
    }

    pub fn g_b(&self) -> &DMatrix<T> {
        &self.g_b
    }

    pub fn g_a(&self) -> &DMatrix<T> {
        &self.g_a
    }
}

/// A factor update and the weight-space direction `dB A + B dA` it induces.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateDelta<T: Scalar> {
    pub d_b: DMatrix<T>,
    pub d_a: DMatrix<T>,
    pub induced_w: DMatrix<T>,
}

impl<T: Scalar> UpdateDelta<T> {
    pub fn new(fp: &FactorPair<T>, d_b: DMatrix<T>, d_a: DMatrix<T>) -> Result<Self> {
        const OP: &str = "UpdateDelta::new";
        ensure_shape(OP, "dB", &d_b, fp.rows(), fp.rank())?;
        ensure_shape(OP, "dA", &d_a, fp.rank(), fp.cols())?;
        let induced_w = &d_b * fp.a() + fp.b() * &d_a;
        Ok(Self { d_b, d_a, induced_w })
    }
}

/// The r x r offset `X` selecting one member of the solution family.
#[derive(Debug, Clone, PartialEq)]
pub struct GaugeParameter<T: Scalar> {
    pub x: DMatrix<T>,
}

impl<T: Scalar> GaugeParameter<T> {
    pub fn new(x: DMatrix<T>) -> Self {
        Self { x }
    }

    pub fn zeros(r: usize) -> Self {
        Self { x: DMatrix::zeros(r, r) }
    }
}

/// Regularized Gram inverses and the weighted factor products shared by
/// every solver routine.
struct Grams<T: Scalar> {
    /// `B^T L^{1/2}` (r x m)
    bt_l: DMatrix<T>,
    /// `R^{1/2} A^T` (n x r)
    r_at: DMatrix<T>,
    k_inv: DMatrix<T>,
    s_inv: DMatrix<T>,
}

impl<T: Scalar> Grams<T> {
    fn new(fp: &FactorPair<T>, w: &DiagWeights<T>) -> Self {
        let bt_l = scale_cols(&fp.b().transpose(), w.l_half());
        let r_at = scale_rows(w.r_half(), &fp.a().transpose());
        let k_inv = regularized_inverse("factor_solver: B^T L^1/2 B", &(&bt_l * fp.b()), w.eps());
        let s_inv = regularized_inverse("factor_solver: A R^1/2 A^T", &(fp.a() * &r_at), w.eps());
        Self { bt_l, r_at, k_inv, s_inv }
    }

    /// `L^{-1/2} G_B S^{-1}`
    fn b_core(&self, w: &DiagWeights<T>, gb: &GradientBundle<T>) -> DMatrix<T> {
        scale_rows(w.l_neg_half(), gb.g_b()) * &self.s_inv
    }

    /// `K^{-1} G_A R^{-1/2}`
    fn a_core(&self, w: &DiagWeights<T>, gb: &GradientBundle<T>) -> DMatrix<T> {
        &self.k_inv * scale_cols(gb.g_a(), w.r_neg_half())
    }
}

fn check_inputs<T: Scalar>(op: &'static str, fp: &FactorPair<T>, w: &DiagWeights<T>, gb: &GradientBundle<T>) -> Result<()> {
    if w.rows() != fp.rows() || w.cols() != fp.cols() {
        return Err(Error::DimensionMismatch {
            op,
            expected: format!("weights for {}x{}", fp.rows(), fp.cols()),
            got: format!("weights for {}x{}", w.rows(), w.cols()),
        });
    }
    ensure_shape(op, "G_B", gb.g_b(), fp.rows(), fp.rank())?;
    ensure_shape(op, "G_A", gb.g_a(), fp.rank(), fp.cols())
}

/// Member of the solution family selected by the gauge `x`.
pub fn family_solution<T: Scalar>(
    fp: &FactorPair<T>,
    w: &DiagWeights<T>,
    gb: &GradientBundle<T>,
    x: &GaugeParameter<T>,
) -> Result<UpdateDelta<T>> {
    const OP: &str = "family_solution";
    check_inputs(OP, fp, w, gb)?;
    ensure_shape(OP, "X", &x.x, fp.rank(), fp.rank())?;
    let grams = Grams::new(fp, w);
    let b = fp.b();
    let y = grams.b_core(w, gb);
    // (I - P_B) Y - B X
    let d_b = &y - b * (&grams.k_inv * (&grams.bt_l * &y)) - b * &x.x;
    let d_a = grams.a_core(w, gb) + &x.x * fp.a();
    UpdateDelta::new(fp, d_b, d_a)
}

/// `1/2 || dB A - B dA ||_H^2`.
pub fn imbalance<T: Scalar>(fp: &FactorPair<T>, w: &DiagWeights<T>, d: &UpdateDelta<T>) -> Result<T> {
    const OP: &str = "imbalance";
    ensure_shape(OP, "dB", &d.d_b, fp.rows(), fp.rank())?;
    ensure_shape(OP, "dA", &d.d_a, fp.rank(), fp.cols())?;
    let diff = &d.d_b * fp.a() - fp.b() * &d.d_a;
    Ok(T::lit(0.5) * w.weighted_inner(&diff, &diff)?)
}

/// The balance-optimal gauge `X* = -1/2 K^{-1} G_A A^T S^{-1}`.
pub fn optimal_gauge<T: Scalar>(fp: &FactorPair<T>, w: &DiagWeights<T>, gb: &GradientBundle<T>) -> Result<GaugeParameter<T>> {
    check_inputs("optimal_gauge", fp, w, gb)?;
    let grams = Grams::new(fp, w);
    let x = &grams.k_inv * (gb.g_a() * fp.a().transpose()) * &grams.s_inv * T::lit(-0.5);
    Ok(GaugeParameter { x })
}

/// Closed-form balance-optimal factor update.
pub fn closed_form_update<T: Scalar>(fp: &FactorPair<T>, w: &DiagWeights<T>, gb: &GradientBundle<T>) -> Result<UpdateDelta<T>> {
    check_inputs("closed_form_update", fp, w, gb)?;
    let grams = Grams::new(fp, w);
    let half = T::lit(0.5);
    let y = grams.b_core(w, gb);
    // (I - 1/2 P_B) Y
    let d_b = &y - fp.b() * (&grams.k_inv * (&grams.bt_l * &y)) * half;
    // Z (I - 1/2 Q_A)
    let z = grams.a_core(w, gb);
    let d_a = &z - (&z * &grams.r_at) * &grams.s_inv * fp.a() * half;
    UpdateDelta::new(fp, d_b, d_a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::{apply_adjoint, apply_jacobian, FactorDirection};
    use crate::projection::project_weighted;
    use crate::sampling::{random_full_rank_pair, random_matrix, random_weights, rng_from_seed};

    fn m(rows: usize, cols: usize, data: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(rows, cols, data)
    }

    fn hand_case(eps: f64) -> (FactorPair<f64>, DiagWeights<f64>, GradientBundle<f64>) {
        let fp = FactorPair::new(m(2, 1, &[1.0, 0.0]), m(1, 2, &[1.0, 0.0])).unwrap();
        let w = DiagWeights::identity(2, 2, eps);
        let gb = GradientBundle::from_w_gradient(&fp, m(2, 2, &[1.0, 2.0, 3.0, 4.0])).unwrap();
        (fp, w, gb)
    }

    fn close(a: &DMatrix<f64>, b: &DMatrix<f64>, tol: f64) -> bool {
        (a - b).norm() <= tol
    }

    #[test]
    fn chain_rule_bundle() {
        let (_, _, gb) = hand_case(1e-12);
        assert_eq!(gb.g_b(), &m(2, 1, &[1.0, 3.0]));
        assert_eq!(gb.g_a(), &m(1, 2, &[1.0, 2.0]));
    }

    #[test]
    fn bundle_rejects_nan() {
        let fp = FactorPair::new(m(2, 1, &[1.0, 0.0]), m(1, 2, &[1.0, 0.0])).unwrap();
        let g = m(2, 2, &[1.0, f64::NAN, 0.0, 0.0]);
        assert!(GradientBundle::from_w_gradient(&fp, g).is_err());
    }

    #[test]
    fn family_hand_example() {
        let (fp, w, gb) = hand_case(1e-12);
        let d = family_solution(&fp, &w, &gb, &GaugeParameter::zeros(1)).unwrap();
        assert!(close(&d.d_b, &m(2, 1, &[0.0, 3.0]), 1e-10));
        assert!(close(&d.d_a, &m(1, 2, &[1.0, 2.0]), 1e-10));
        assert!(close(&d.induced_w, &m(2, 2, &[1.0, 2.0, 3.0, 0.0]), 1e-10));
    }

    #[test]
    fn zero_gradient_gives_zero_update() {
        let fp = random_full_rank_pair::<f64>(&mut rng_from_seed(1), 4, 3, 2);
        let w = DiagWeights::identity(4, 3, 1e-6);
        let gb = GradientBundle::from_w_gradient(&fp, DMatrix::zeros(4, 3)).unwrap();
        let d = family_solution(&fp, &w, &gb, &GaugeParameter::zeros(2)).unwrap();
        assert_eq!(d.d_b.norm() + d.d_a.norm(), 0.0);
        assert_eq!(optimal_gauge(&fp, &w, &gb).unwrap().x, DMatrix::zeros(2, 2));
        let d = closed_form_update(&fp, &w, &gb).unwrap();
        assert_eq!(d.d_b.norm() + d.d_a.norm(), 0.0);
    }

    #[test]
    fn imbalance_examples() {
        let fp = FactorPair::new(m(1, 1, &[1.0]), m(1, 1, &[1.0])).unwrap();
        let w = DiagWeights::identity(1, 1, 1e-6);
        let d = UpdateDelta::new(&fp, m(1, 1, &[1.0]), m(1, 1, &[1.0])).unwrap();
        assert_eq!(imbalance(&fp, &w, &d).unwrap(), 0.0);

        // dB A = diag(2, 0), B dA = 0
        let fp = FactorPair::new(m(2, 1, &[1.0, 0.0]), m(1, 2, &[1.0, 0.0])).unwrap();
        let w = DiagWeights::identity(2, 2, 1e-6);
        let d = UpdateDelta::new(&fp, m(2, 1, &[2.0, 0.0]), m(1, 2, &[0.0, 0.0])).unwrap();
        assert_eq!(imbalance(&fp, &w, &d).unwrap(), 2.0);
        let neg = UpdateDelta::new(&fp, -d.d_b.clone(), -d.d_a.clone()).unwrap();
        assert_eq!(imbalance(&fp, &w, &neg).unwrap(), 2.0);
    }

    #[test]
    fn optimal_gauge_hand_example() {
        let (fp, w, gb) = hand_case(1e-12);
        let x = optimal_gauge(&fp, &w, &gb).unwrap();
        assert!((x.x[(0, 0)] + 0.5).abs() < 1e-10);
    }

    #[test]
    fn closed_form_hand_example() {
        let (fp, w, gb) = hand_case(1e-12);
        let d = closed_form_update(&fp, &w, &gb).unwrap();
        assert!(close(&d.d_b, &m(2, 1, &[0.5, 3.0]), 1e-10));
        assert!(close(&d.d_a, &m(1, 2, &[0.5, 2.0]), 1e-10));
        assert!(close(&d.induced_w, &m(2, 2, &[1.0, 2.0, 3.0, 0.0]), 1e-10));
    }

    #[test]
    fn closed_form_matches_family_at_optimal_gauge() {
        let mut rng = rng_from_seed(31);
        for _ in 0..20 {
            let fp = random_full_rank_pair::<f64>(&mut rng, 6, 5, 2);
            let w = random_weights::<f64>(&mut rng, 6, 5, 0.1, 10.0, 1e-12);
            let gb = GradientBundle::from_w_gradient(&fp, random_matrix(&mut rng, 6, 5)).unwrap();
            let x = optimal_gauge(&fp, &w, &gb).unwrap();
            let fam = family_solution(&fp, &w, &gb, &x).unwrap();
            let cf = closed_form_update(&fp, &w, &gb).unwrap();
            assert!(close(&fam.d_b, &cf.d_b, 1e-11 * (1.0 + cf.d_b.norm())));
            assert!(close(&fam.d_a, &cf.d_a, 1e-11 * (1.0 + cf.d_a.norm())));
        }
    }

    #[test]
    fn gauge_leaves_induced_update_invariant() {
        let mut rng = rng_from_seed(32);
        let fp = random_full_rank_pair::<f64>(&mut rng, 5, 7, 3);
        let w = random_weights::<f64>(&mut rng, 5, 7, 0.1, 10.0, 1e-12);
        let gb = GradientBundle::from_w_gradient(&fp, random_matrix(&mut rng, 5, 7)).unwrap();
        let d1 = family_solution(&fp, &w, &gb, &GaugeParameter::new(random_matrix(&mut rng, 3, 3))).unwrap();
        let d2 = family_solution(&fp, &w, &gb, &GaugeParameter::new(random_matrix(&mut rng, 3, 3))).unwrap();
        assert!((&d1.induced_w - &d2.induced_w).norm() <= 1e-9 * d1.induced_w.norm());
    }

    #[test]
    fn induced_update_is_weighted_projection() {
        let mut rng = rng_from_seed(33);
        for _ in 0..20 {
            let fp = random_full_rank_pair::<f64>(&mut rng, 6, 4, 2);
            let w = random_weights::<f64>(&mut rng, 6, 4, 0.1, 10.0, 1e-12);
            let g = random_matrix(&mut rng, 6, 4);
            let gb = GradientBundle::from_w_gradient(&fp, g.clone()).unwrap();
            let d = closed_form_update(&fp, &w, &gb).unwrap();
            let p = project_weighted(&fp, &w, &w.apply_h_inv(&g).unwrap()).unwrap();
            assert!((&d.induced_w - p).norm() <= 1e-9 * (1.0 + g.norm()));

            // normal equation J* H (J d - H^{-1} G) = 0
            let dir = FactorDirection::new(d.d_b.clone(), d.d_a.clone());
            let resid = apply_jacobian(&fp, &dir).unwrap() - w.apply_h_inv(&g).unwrap();
            let ne = apply_adjoint(&fp, &w.apply_h(&resid).unwrap()).unwrap();
            assert!(ne.norm() <= 1e-8 * (1.0 + g.norm()));
        }
    }

    #[test]
    fn optimal_gauge_minimizes_imbalance() {
        let mut rng = rng_from_seed(34);
        let fp = random_full_rank_pair::<f64>(&mut rng, 5, 5, 2);
        let w = random_weights::<f64>(&mut rng, 5, 5, 0.1, 10.0, 1e-12);
        let gb = GradientBundle::from_w_gradient(&fp, random_matrix(&mut rng, 5, 5)).unwrap();
        let x = optimal_gauge(&fp, &w, &gb).unwrap();
        let best = imbalance(&fp, &w, &family_solution(&fp, &w, &gb, &x).unwrap()).unwrap();
        for _ in 0..50 {
            let delta: DMatrix<f64> = random_matrix(&mut rng, 2, 2);
            let delta = &delta * (1e-2 / delta.norm());
            let other = family_solution(&fp, &w, &gb, &GaugeParameter::new(&x.x + delta)).unwrap();
            assert!(best <= imbalance(&fp, &w, &other).unwrap());
        }
    }

    #[test]
    fn solver_handles_zero_b_factor() {
        // initialization point: B = 0, only the B-side moves
        let mut rng = rng_from_seed(35);
        let a: DMatrix<f64> = random_matrix(&mut rng, 2, 5);
        let fp = FactorPair::new(DMatrix::zeros(4, 2), a).unwrap();
        let w = DiagWeights::identity(4, 5, 1e-6);
        let gb = GradientBundle::from_w_gradient(&fp, random_matrix(&mut rng, 4, 5)).unwrap();
        let d = closed_form_update(&fp, &w, &gb).unwrap();
        assert_eq!(d.d_a.norm(), 0.0);
        assert!(d.d_b.norm() > 0.0);
        assert!(d.d_b.iter().all(|v| v.is_finite()));
    }
}
