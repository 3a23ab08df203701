//! Seeded property suites over every module.
//!
//! Each property runs once per seed and records the largest deviation it
//! sees. A report passes when that deviation is within tolerance and no
//! trial returned an error. The closed-form solver is injectable so a
//! deliberately broken implementation can be shown to fail.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::adafactor::{AdafactorState, DiagWeights};
use crate::error::Result;
use crate::generator::{
    apply_adjoint, apply_jacobian, jacobian_gram_factor, jacobian_gram_w, kernel_direction, vectorized_jacobian,
    FactorDirection, FactorPair,
};
use crate::linalg::{frobenius_inner, numerical_rank, pseudo_inverse, vec_col_major};
use crate::optim::{GradientSource, MomentumMode, Optimizer, OptimizerConfig, OptimizerKind};
use crate::oracle::{brute_force_update, finite_diff_gradient, min_norm_update, FD_STEP};
use crate::problems::{make_problem, ProblemKind};
use crate::projection::{project_standard, project_weighted};
use crate::sampling::{
    derive_seed, random_direction, random_full_rank_pair, random_matrix, random_weights, rng_from_seed, SeededRng,
};
use crate::solver::{closed_form_update, family_solution, imbalance, optimal_gauge, GaugeParameter, GradientBundle, UpdateDelta};

pub type ClosedFormFn =
    fn(&FactorPair<f64>, &DiagWeights<f64>, &GradientBundle<f64>) -> Result<UpdateDelta<f64>>;

/// Regularizer used by the solver properties so that the `eps` bias stays
/// far below every tolerance.
pub const VERIFY_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Intensity {
    Quick,
    Full,
}

impl Intensity {
    pub fn seeds(self) -> usize {
        match self {
            Self::Quick => 20,
            Self::Full => 200,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct VerifyOptions {
    pub intensity: Intensity,
    pub master_seed: u64,
    pub closed_form: ClosedFormFn,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self { intensity: Intensity::Quick, master_seed: 0x5eed, closed_form: closed_form_update::<f64> }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropertyReport {
    pub module: &'static str,
    pub name: &'static str,
    pub trials: usize,
    pub max_deviation: f64,
    pub tolerance: f64,
    pub worst_seed: Option<u64>,
    pub error: Option<String>,
}

impl PropertyReport {
    pub fn passed(&self) -> bool {
        self.error.is_none() && self.max_deviation <= self.tolerance
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyReport {
    pub properties: Vec<PropertyReport>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.properties.iter().all(PropertyReport::passed)
    }

    pub fn failures(&self) -> Vec<&PropertyReport> {
        self.properties.iter().filter(|p| !p.passed()).collect()
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<6} {:<11} {:<30} {:>6} {:>12} {:>10}  worst_seed", "status", "module", "property", "trials", "max_dev", "tol")?;
        for p in &self.properties {
            let seed = p.worst_seed.map_or_else(|| "-".to_string(), |s| s.to_string());
            writeln!(
                f,
                "{:<6} {:<11} {:<30} {:>6} {:>12.3e} {:>10.1e}  {}",
                if p.passed() { "PASS" } else { "FAIL" },
                p.module,
                p.name,
                p.trials,
                p.max_deviation,
                p.tolerance,
                seed
            )?;
            if let Some(e) = &p.error {
                writeln!(f, "       error: {e}")?;
            }
        }
        let failed = self.failures().len();
        write!(f, "{} properties, {} failed", self.properties.len(), failed)
    }
}

struct Ctx {
    seeds: Vec<u64>,
    closed_form: ClosedFormFn,
}

fn check<F>(ctx: &Ctx, module: &'static str, name: &'static str, tolerance: f64, trial: F) -> PropertyReport
where
    F: Fn(&mut SeededRng, &Ctx) -> Result<f64>,
{
    let mut report =
        PropertyReport { module, name, trials: 0, max_deviation: 0.0, tolerance, worst_seed: None, error: None };
    for &seed in &ctx.seeds {
        report.trials += 1;
        match trial(&mut rng_from_seed(seed), ctx) {
            Ok(dev) => {
                let dev = if dev.is_nan() { f64::INFINITY } else { dev };
                if report.worst_seed.is_none() || dev > report.max_deviation {
                    report.max_deviation = dev;
                    report.worst_seed = Some(seed);
                }
            }
            Err(e) => {
                if report.error.is_none() {
                    report.error = Some(format!("seed {seed}: {e}"));
                    report.worst_seed = Some(seed);
                }
            }
        }
    }
    report
}

fn rel(x: &DMatrix<f64>, y: &DMatrix<f64>) -> f64 {
    (x - y).norm() / y.norm().max(f64::MIN_POSITIVE)
}

fn dims(rng: &mut SeededRng) -> (usize, usize, usize) {
    let m = rng.random_range(2..=8);
    let n = rng.random_range(2..=8);
    let r = rng.random_range(1..=m.min(n).min(3));
    (m, n, r)
}

struct Instance {
    fp: FactorPair<f64>,
    w: DiagWeights<f64>,
    g: DMatrix<f64>,
}

fn instance(rng: &mut SeededRng) -> Instance {
    let (m, n, r) = dims(rng);
    let fp = random_full_rank_pair::<f64>(rng, m, n, r);
    let w = random_weights::<f64>(rng, m, n, 0.1, 10.0, VERIFY_EPS);
    let g = random_matrix(rng, m, n);
    Instance { fp, w, g }
}

fn flag(ok: bool) -> f64 {
    if ok {
        0.0
    } else {
        1.0
    }
}

// generator

fn adjointness(rng: &mut SeededRng, _: &Ctx) -> Result<f64> {
    let (m, n, r) = dims(rng);
    let fp = random_full_rank_pair::<f64>(rng, m, n, r);
    let d = random_direction(rng, &fp);
    let c: DMatrix<f64> = random_matrix(rng, m, n);
    let jd = apply_jacobian(&fp, &d)?;
    let jtc = apply_adjoint(&fp, &c)?;
    let scale = (jd.norm() * c.norm()).max(d.norm() * jtc.norm());
    Ok((frobenius_inner(&jd, &c) - d.inner(&jtc)).abs() / scale)
}

fn kernel_annihilation(rng: &mut SeededRng, _: &Ctx) -> Result<f64> {
    let (m, n, r) = dims(rng);
    let fp = random_full_rank_pair::<f64>(rng, m, n, r);
    let x: DMatrix<f64> = random_matrix(rng, r, r);
    let out = apply_jacobian(&fp, &kernel_direction(&fp, &x)?)?;
    Ok(out.norm() / (fp.b().norm() * x.norm() * fp.a().norm()))
}

fn rank_deficiency(rng: &mut SeededRng, _: &Ctx) -> Result<f64> {
    let (m, n, r) = dims(rng);
    let fp = random_full_rank_pair::<f64>(rng, m, n, r);
    let rank = numerical_rank(&vectorized_jacobian(&fp), 1e-8);
    Ok((rank as f64 - ((m + n) * r - r * r) as f64).abs())
}

/// Kernel basis `(B E_ij, -E_ij A)` as columns of a dense matrix.
fn kernel_basis(fp: &FactorPair<f64>) -> Result<DMatrix<f64>> {
    let r = fp.rank();
    let len = (fp.rows() + fp.cols()) * r;
    let mut basis = DMatrix::zeros(len, r * r);
    for k in 0..r * r {
        let mut e = DMatrix::zeros(r, r);
        e[(k % r, k / r)] = 1.0;
        let dir = kernel_direction(fp, &e)?;
        let v: Vec<f64> = dir.p.iter().chain(dir.q.iter()).copied().collect();
        basis.set_column(k, &DVector::from_vec(v));
    }
    Ok(basis)
}

fn kernel_completeness(rng: &mut SeededRng, _: &Ctx) -> Result<f64> {
    let (m, n, r) = dims(rng);
    let fp = random_full_rank_pair::<f64>(rng, m, n, r);
    let jac = vectorized_jacobian(&fp);
    let eig = (jac.transpose() * &jac).symmetric_eigen();
    let lmax = eig.eigenvalues.max();
    let smax = lmax.sqrt();
    // Eigenvectors of J^T J with zero eigenvalue span the null space of J.
    let mut d = DVector::<f64>::zeros(jac.ncols());
    let mut found = 0;
    for (k, &lambda) in eig.eigenvalues.iter().enumerate() {
        if lambda <= 1e-12 * lmax {
            d += eig.eigenvectors.column(k) * rng.random_range(-1.0..1.0);
            found += 1;
        }
    }
    if found == 0 {
        return Ok(f64::INFINITY);
    }
    if (&jac * &d).norm() > 1e-12 * d.norm() * smax {
        return Ok(f64::INFINITY);
    }
    let basis = kernel_basis(&fp)?;
    let coeffs = pseudo_inverse(&basis, 1e-12) * &d;
    Ok((&basis * coeffs - &d).norm() / d.norm())
}

fn gram_compositions(rng: &mut SeededRng, _: &Ctx) -> Result<f64> {
    let (m, n, r) = dims(rng);
    let fp = random_full_rank_pair::<f64>(rng, m, n, r);
    let c: DMatrix<f64> = random_matrix(rng, m, n);
    let d = random_direction(rng, &fp);
    let w_side = rel(&jacobian_gram_w(&fp, &c)?, &apply_jacobian(&fp, &apply_adjoint(&fp, &c)?)?);
    let lhs = jacobian_gram_factor(&fp, &d)?;
    let rhs = apply_adjoint(&fp, &apply_jacobian(&fp, &d)?)?;
    let diff = FactorDirection::new(&lhs.p - &rhs.p, &lhs.q - &rhs.q);
    Ok(w_side.max(diff.norm() / rhs.norm()))
}

// adafactor

fn weight_positivity(rng: &mut SeededRng, _: &Ctx) -> Result<f64> {
    let (m, n, _) = dims(rng);
    let eps: f64 = 1e-6;
    let mut draw = |len: usize| {
        DVector::from_fn(len, |_, _| if rng.random_bool(0.3) { 0.0 } else { rng.random_range(0.0..5.0) })
    };
    let (rows, cols) = (draw(m), draw(n));
    let zero_rows = DVector::zeros(m);
    let mut worst: f64 = 0.0;
    for (l, r) in [(rows.clone(), cols.clone()), (zero_rows, cols)] {
        let w = AdafactorState::new(m, n, 0.98, 0.98, eps)?.with_stats(l, r)?.build_weights();
        let floor = eps.sqrt() * (1.0 - 1e-15);
        let ok = w.l_half().iter().chain(w.r_half().iter()).all(|&v: &f64| v.is_finite() && v >= floor);
        worst = worst.max(flag(ok));
    }
    Ok(worst)
}

fn h_round_trip(rng: &mut SeededRng, _: &Ctx) -> Result<f64> {
    let (m, n, _) = dims(rng);
    let w = random_weights::<f64>(rng, m, n, 0.1, 10.0, VERIFY_EPS);
    let y: DMatrix<f64> = random_matrix(rng, m, n);
    Ok(rel(&w.apply_h_inv(&w.apply_h(&y)?)?, &y).max(rel(&w.apply_h(&w.apply_h_inv(&y)?)?, &y)))
}

fn inner_product_axioms(rng: &mut SeededRng, _: &Ctx) -> Result<f64> {
    let (m, n, _) = dims(rng);
    let w = random_weights::<f64>(rng, m, n, 0.1, 10.0, VERIFY_EPS);
    let y: DMatrix<f64> = random_matrix(rng, m, n);
    let z: DMatrix<f64> = random_matrix(rng, m, n);
    let u: DMatrix<f64> = random_matrix(rng, m, n);
    let a: f64 = rng.random_range(-2.0..2.0);
    let scale = w.weighted_norm(&y)? * w.weighted_norm(&z)?;
    let symmetry = (w.weighted_inner(&y, &z)? - w.weighted_inner(&z, &y)?).abs() / scale;
    let lhs = w.weighted_inner(&(&y * a + &u), &z)?;
    let rhs = a * w.weighted_inner(&y, &z)? + w.weighted_inner(&u, &z)?;
    let linear = (lhs - rhs).abs() / (scale.max(w.weighted_norm(&u)? * w.weighted_norm(&z)?) * (1.0 + a.abs()));
    let positive = flag(w.weighted_inner(&y, &y)? > 0.0);
    Ok(symmetry.max(linear).max(positive))
}

// projection

fn projector_idempotence(rng: &mut SeededRng, _: &Ctx) -> Result<f64> {
    let Instance { fp, w, g: z } = instance(rng);
    let pw = project_weighted(&fp, &w, &z)?;
    let ps = project_standard(&fp, &z)?;
    Ok(rel(&project_weighted(&fp, &w, &pw)?, &pw).max(rel(&project_standard(&fp, &ps)?, &ps)))
}

fn projector_self_adjoint(rng: &mut SeededRng, _: &Ctx) -> Result<f64> {
    let Instance { fp, w, g: y } = instance(rng);
    let z: DMatrix<f64> = random_matrix(rng, fp.rows(), fp.cols());
    let scale = w.weighted_norm(&y)? * w.weighted_norm(&z)?;
    let weighted = (w.weighted_inner(&project_weighted(&fp, &w, &y)?, &z)? - w.weighted_inner(&y, &project_weighted(&fp, &w, &z)?)?)
        .abs()
        / scale;
    let standard = (frobenius_inner(&project_standard(&fp, &y)?, &z) - frobenius_inner(&y, &project_standard(&fp, &z)?)).abs()
        / (y.norm() * z.norm());
    Ok(weighted.max(standard))
}

fn identity_weight_reduction(rng: &mut SeededRng, _: &Ctx) -> Result<f64> {
    let Instance { fp, g: z, .. } = instance(rng);
    let id = DiagWeights::identity(fp.rows(), fp.cols(), VERIFY_EPS);
    Ok(rel(&project_weighted(&fp, &id, &z)?, &project_standard(&fp, &z)?))
}

fn residual_orthogonality(rng: &mut SeededRng, _: &Ctx) -> Result<f64> {
    let Instance { fp, w, g: z } = instance(rng);
    let d = random_direction(rng, &fp);
    let jd = apply_jacobian(&fp, &d)?;
    let resid = &z - project_weighted(&fp, &w, &z)?;
    Ok(w.weighted_inner(&resid, &jd)?.abs() / (w.weighted_norm(&z)? * w.weighted_norm(&jd)?))
}

fn range_membership(rng: &mut SeededRng, _: &Ctx) -> Result<f64> {
    let Instance { fp, w, g: z } = instance(rng);
    let pz = project_weighted(&fp, &w, &z)?;
    let jac = vectorized_jacobian(&fp);
    let target = vec_col_major(&pz);
    let coeffs = pseudo_inverse(&jac, 1e-12) * &target;
    Ok((&jac * coeffs - &target).norm() / target.norm())
}

fn best_approximation(rng: &mut SeededRng, _: &Ctx) -> Result<f64> {
    let Instance { fp, w, g: z } = instance(rng);
    let best = w.weighted_norm(&(&z - project_weighted(&fp, &w, &z)?))?;
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let d = random_direction(rng, &fp);
        let other = w.weighted_norm(&(&z - apply_jacobian(&fp, &d)?))?;
        worst = worst.max((best - other) / w.weighted_norm(&z)?);
    }
    Ok(worst)
}

// solver

fn oracle_equivalence(rng: &mut SeededRng, ctx: &Ctx) -> Result<f64> {
    let Instance { fp, w, g } = instance(rng);
    let gb = GradientBundle::from_w_gradient(&fp, g.clone())?;
    let cf = (ctx.closed_form)(&fp, &w, &gb)?;
    let bf = brute_force_update(&fp, &w, &g)?;
    Ok(rel(&cf.d_b, &bf.d_b).max(rel(&cf.d_a, &bf.d_a)))
}

fn projection_identity(rng: &mut SeededRng, ctx: &Ctx) -> Result<f64> {
    let Instance { fp, w, g } = instance(rng);
    let target = project_weighted(&fp, &w, &w.apply_h_inv(&g)?)?;
    let gb = GradientBundle::from_w_gradient(&fp, g)?;
    let cf = (ctx.closed_form)(&fp, &w, &gb)?;
    Ok(rel(&cf.induced_w, &target))
}

fn gauge_invariance(rng: &mut SeededRng, ctx: &Ctx) -> Result<f64> {
    let Instance { fp, w, g } = instance(rng);
    let gb = GradientBundle::from_w_gradient(&fp, g)?;
    let reference = (ctx.closed_form)(&fp, &w, &gb)?.induced_w;
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let x = GaugeParameter::new(random_matrix(rng, fp.rank(), fp.rank()));
        worst = worst.max(rel(&family_solution(&fp, &w, &gb, &x)?.induced_w, &reference));
    }
    Ok(worst)
}

fn balance_stationarity(rng: &mut SeededRng, _: &Ctx) -> Result<f64> {
    let Instance { fp, w, g } = instance(rng);
    let gb = GradientBundle::from_w_gradient(&fp, g)?;
    let x_opt = optimal_gauge(&fp, &w, &gb)?;
    let psi = |x: &DMatrix<f64>| {
        family_solution(&fp, &w, &gb, &GaugeParameter::new(x.clone()))
            .and_then(|d| imbalance(&fp, &w, &d))
            .unwrap_or(f64::NAN)
    };
    let grad = finite_diff_gradient(psi, &x_opt.x, FD_STEP)?;
    Ok(grad.norm() / (1.0 + psi(&x_opt.x)))
}

fn balance_optimality(rng: &mut SeededRng, ctx: &Ctx) -> Result<f64> {
    let Instance { fp, w, g } = instance(rng);
    let gb = GradientBundle::from_w_gradient(&fp, g)?;
    let best = imbalance(&fp, &w, &(ctx.closed_form)(&fp, &w, &gb)?)?;
    let x_opt = optimal_gauge(&fp, &w, &gb)?;
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let mut delta: DMatrix<f64> = random_matrix(rng, fp.rank(), fp.rank());
        delta *= 1e-2 / delta.norm();
        let other = imbalance(&fp, &w, &family_solution(&fp, &w, &gb, &GaugeParameter::new(&x_opt.x + delta))?)?;
        worst = worst.max(best - other);
    }
    Ok(worst)
}

fn normal_equation_residual(rng: &mut SeededRng, ctx: &Ctx) -> Result<f64> {
    let Instance { fp, w, g } = instance(rng);
    let target = w.apply_h_inv(&g)?;
    let gb = GradientBundle::from_w_gradient(&fp, g.clone())?;
    let cf = (ctx.closed_form)(&fp, &w, &gb)?;
    let resid = apply_adjoint(&fp, &w.apply_h(&(&cf.induced_w - target))?)?;
    Ok(resid.norm() / (1.0 + g.norm()))
}

// oracle

fn min_norm_kernel_offset(rng: &mut SeededRng, _: &Ctx) -> Result<f64> {
    let Instance { fp, w, g } = instance(rng);
    let mn = min_norm_update(&fp, &w, &g)?;
    let bf = brute_force_update(&fp, &w, &g)?;
    let same_image = rel(&bf.induced_w, &mn.induced_w);
    let (db, da) = (&bf.d_b - &mn.d_b, &bf.d_a - &mn.d_a);
    // Recover X from dB = B X and check dA = -X A.
    let x = pseudo_inverse(fp.b(), 1e-12) * &db;
    let scale = mn.d_b.norm() + mn.d_a.norm();
    let offset = ((&db - fp.b() * &x).norm() + (&da + &x * fp.a()).norm()) / scale;
    Ok(same_image.max(offset))
}

fn pseudo_inverse_normal_equation(rng: &mut SeededRng, _: &Ctx) -> Result<f64> {
    let Instance { fp, w, g } = instance(rng);
    let mn = min_norm_update(&fp, &w, &g)?;
    let resid = apply_adjoint(&fp, &w.apply_h(&(&mn.induced_w - w.apply_h_inv(&g)?))?)?;
    Ok(resid.norm() / (1.0 + g.norm()))
}

// problems

fn chain_rule_gradients(rng: &mut SeededRng, _: &Ctx) -> Result<f64> {
    let m = rng.random_range(3..=6);
    let n = rng.random_range(3..=6);
    let k = rng.random_range(1..=2);
    let kind = if rng.random_bool(0.5) { ProblemKind::Recovery } else { ProblemKind::Sensing };
    let p = make_problem::<f64>(kind, m, n, k, 10.0, rng.random())?;
    let fp = random_full_rank_pair::<f64>(rng, m, n, k);
    let (_, g) = p.loss_and_gradient(&fp)?;
    let gb = GradientBundle::from_w_gradient(&fp, g)?;
    let (b, a) = (fp.b().clone(), fp.a().clone());
    let f_b = |x: &DMatrix<f64>| FactorPair::new(x.clone(), a.clone()).and_then(|q| p.loss(&q)).unwrap_or(f64::NAN);
    let f_a = |x: &DMatrix<f64>| FactorPair::new(b.clone(), x.clone()).and_then(|q| p.loss(&q)).unwrap_or(f64::NAN);
    let fd_b = finite_diff_gradient(f_b, &b, FD_STEP)?;
    let fd_a = finite_diff_gradient(f_a, &a, FD_STEP)?;
    let scale = gb.g_b().norm().max(gb.g_a().norm()).max(1.0);
    Ok(((fd_b - gb.g_b()).norm()).max((fd_a - gb.g_a()).norm()) / scale)
}

// optim

fn identity_coincidence(rng: &mut SeededRng, _: &Ctx) -> Result<f64> {
    let m = rng.random_range(2..=8);
    let r = rng.random_range(1..=m.min(3));
    let fp = random_full_rank_pair::<f64>(rng, m, m, r);
    let g = DMatrix::from_fn(m, m, |_, _| if rng.random_bool(0.5) { 1.0 } else { -1.0 });
    let mut cfg = OptimizerConfig::new(rng.random_range(1e-3..1.0));
    cfg.decay_row = 0.0;
    cfg.decay_col = 0.0;
    let ada = Optimizer::new(OptimizerKind::AdaPreLoraSgd, cfg.clone(), m, m, r)?.step(&fp, &g)?;
    let id = Optimizer::new(OptimizerKind::IdentityProjected, cfg, m, m, r)?.step(&fp, &g)?;
    Ok((ada.b() - id.b()).abs().max().max((ada.a() - id.a()).abs().max()))
}

fn momentum_collapse(rng: &mut SeededRng, _: &Ctx) -> Result<f64> {
    let Instance { fp, g, .. } = instance(rng);
    let (m, n, r) = (fp.rows(), fp.cols(), fp.rank());
    let mut cfg = OptimizerConfig::new(0.05);
    cfg.decay_row = 0.0;
    cfg.decay_col = 0.0;
    cfg.momentum_decay = 0.0;
    let sgd = Optimizer::new(OptimizerKind::AdaPreLoraSgd, cfg.clone(), m, n, r)?;
    let mut worst: f64 = 0.0;
    for mode in [MomentumMode::WSpace, MomentumMode::FactorSpace] {
        let mut mcfg = cfg.clone();
        mcfg.momentum_mode = mode;
        let mut mom = Optimizer::new(OptimizerKind::AdaPreLoraMomentum, mcfg, m, n, r)?;
        let a = sgd.clone().step(&fp, &g)?;
        let b = mom.step(&fp, &g)?;
        worst = worst.max(rel(b.b(), a.b())).max(rel(b.a(), a.a()));
    }
    Ok(worst)
}

fn memory_accounting(rng: &mut SeededRng, _: &Ctx) -> Result<f64> {
    let (m, n, r) = dims(rng);
    let mut ok = true;
    for kind in OptimizerKind::ALL {
        for mode in [MomentumMode::WSpace, MomentumMode::FactorSpace] {
            let mut cfg = OptimizerConfig::<f64>::new(0.1);
            cfg.momentum_mode = mode;
            let opt = Optimizer::new(kind, cfg, m, n, r)?;
            let expected = match (kind, mode) {
                (OptimizerKind::AdaPreLoraSgd, _) => m + n,
                (OptimizerKind::AdaPreLoraMomentum, MomentumMode::WSpace) => m + n + m * n,
                (OptimizerKind::AdaPreLoraMomentum, _) => m + n + (m + n) * r,
                _ => 0,
            };
            ok &= opt.state_scalars() == expected;
        }
    }
    Ok(flag(ok))
}

fn descent_sanity(rng: &mut SeededRng, _: &Ctx) -> Result<f64> {
    let p = make_problem::<f64>(ProblemKind::Recovery, 8, 8, 2, 10.0, rng.random())?;
    let init_seed: u64 = rng.random();
    let mut worst: f64 = 0.0;
    for kind in OptimizerKind::ALL {
        let mut cfg = OptimizerConfig::new(1e-3);
        cfg.momentum_mode = MomentumMode::WSpace;
        let mut opt = Optimizer::new(kind, cfg, 8, 8, 2)?;
        let mut fp = crate::optim::init_factors::<f64>(8, 8, 2, init_seed)?;
        let (mut loss, mut g) = p.loss_and_gradient(&fp)?;
        let l0 = loss;
        for _ in 0..100 {
            fp = opt.step(&fp, &g)?;
            let (next, ng) = p.loss_and_gradient(&fp)?;
            worst = worst.max((next - loss) / l0);
            loss = next;
            g = ng;
        }
    }
    Ok(worst)
}

fn determinism(rng: &mut SeededRng, _: &Ctx) -> Result<f64> {
    let kind = if rng.random_bool(0.5) { ProblemKind::Recovery } else { ProblemKind::Sensing };
    let seed: u64 = rng.random();
    let trajectory = |opt_kind: OptimizerKind| -> Result<Vec<f64>> {
        let p = make_problem::<f64>(kind, 6, 5, 2, 10.0, seed)?;
        let mut cfg = OptimizerConfig::new(1e-4);
        cfg.momentum_mode = MomentumMode::FactorSpace;
        cfg.gradient_source = GradientSource::Surrogate;
        let mut opt = Optimizer::new(opt_kind, cfg, 6, 5, 2)?;
        let mut fp = crate::optim::init_factors::<f64>(6, 5, 2, seed)?;
        let mut losses = Vec::new();
        for _ in 0..10 {
            let (l, g) = p.loss_and_gradient(&fp)?;
            losses.push(l);
            fp = opt.step(&fp, &g)?;
        }
        losses.extend(fp.b().iter().chain(fp.a().iter()));
        Ok(losses)
    };
    let mut same = true;
    for kind in OptimizerKind::ALL {
        let (a, b) = (trajectory(kind)?, trajectory(kind)?);
        same &= a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits());
    }
    Ok(flag(same))
}

type Property = (&'static str, &'static str, f64, fn(&mut SeededRng, &Ctx) -> Result<f64>);

const PROPERTIES: &[Property] = &[
    ("generator", "adjointness", 1e-12, adjointness),
    ("generator", "kernel_annihilation", 1e-12, kernel_annihilation),
    ("generator", "rank_deficiency", 0.0, rank_deficiency),
    ("generator", "kernel_completeness", 1e-8, kernel_completeness),
    ("generator", "gram_compositions", 1e-12, gram_compositions),
    ("adafactor", "weight_positivity", 0.0, weight_positivity),
    ("adafactor", "h_round_trip", 1e-13, h_round_trip),
    ("adafactor", "inner_product_axioms", 1e-13, inner_product_axioms),
    ("projection", "projector_idempotence", 1e-10, projector_idempotence),
    ("projection", "projector_self_adjoint", 1e-10, projector_self_adjoint),
    ("projection", "identity_weight_reduction", 1e-13, identity_weight_reduction),
    ("projection", "residual_orthogonality", 1e-10, residual_orthogonality),
    ("projection", "range_membership", 1e-9, range_membership),
    ("projection", "best_approximation", 1e-12, best_approximation),
    ("solver", "oracle_equivalence", 1e-8, oracle_equivalence),
    ("solver", "projection_identity", 1e-9, projection_identity),
    ("solver", "gauge_invariance", 1e-9, gauge_invariance),
    ("solver", "balance_stationarity", 1e-5, balance_stationarity),
    ("solver", "balance_optimality", 0.0, balance_optimality),
    ("solver", "normal_equation_residual", 1e-8, normal_equation_residual),
    ("oracle", "min_norm_kernel_offset", 1e-8, min_norm_kernel_offset),
    ("oracle", "pseudo_inverse_normal_eq", 1e-8, pseudo_inverse_normal_equation),
    ("problems", "chain_rule_gradients", 1e-6, chain_rule_gradients),
    ("optim", "identity_coincidence", 1e-12, identity_coincidence),
    ("optim", "momentum_collapse", 1e-13, momentum_collapse),
    ("optim", "memory_accounting", 0.0, memory_accounting),
    ("optim", "descent_sanity", 1e-12, descent_sanity),
    ("optim", "determinism", 0.0, determinism),
];

/// Names of every property, in run order.
pub fn property_names() -> Vec<&'static str> {
    PROPERTIES.iter().map(|p| p.1).collect()
}

fn context(trials: usize, opts: &VerifyOptions) -> Ctx {
    Ctx {
        seeds: (0..trials as u64).map(|i| derive_seed(opts.master_seed, i)).collect(),
        closed_form: opts.closed_form,
    }
}

/// Runs a single named property over `trials` seeds.
pub fn run_property(name: &str, trials: usize, opts: &VerifyOptions) -> Option<PropertyReport> {
    let ctx = context(trials, opts);
    PROPERTIES
        .iter()
        .find(|p| p.1 == name)
        .map(|&(module, name, tol, f)| check(&ctx, module, name, tol, f))
}

pub fn run_properties(opts: &VerifyOptions) -> VerifyReport {
    let ctx = context(opts.intensity.seeds(), opts);
    let properties = PROPERTIES
        .iter()
        .map(|&(module, name, tol, f)| check(&ctx, module, name, tol, f))
        .collect();
    VerifyReport { properties }
}
