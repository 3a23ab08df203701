//! Optimizer steps on the low-rank factors.
//!
//! * [`step_adaprelora_sgd`]: Adafactor statistics, then the closed-form
//!   balance-optimal update, then a plain SGD step.
//! * [`step_adaprelora_momentum`]: adds a first-moment buffer, decoupled
//!   weight decay and the bias factor `sqrt(1 - decay_row^t) / (1 - beta3^t)`.
//! * Baselines: [`step_factor_sgd`], [`step_scaled_gd`] and
//!   [`step_identity_projected`] (the closed form with identity weights).

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::Rng;

use crate::adafactor::{AdafactorState, DiagWeights, DEFAULT_DECAY, DEFAULT_EPS};
use crate::error::{Error, Result};
use crate::generator::{jacobian_gram_w, FactorPair};
use crate::linalg::{ensure_finite, regularized_inverse};
use crate::sampling::rng_from_seed;
use crate::scalar::Scalar;
use crate::solver::{closed_form_update, GradientBundle, UpdateDelta};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MomentumMode {
    None,
    WSpace,
    FactorSpace,
}

impl FromStr for MomentumMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "w_space" => Ok(Self::WSpace),
            "factor_space" => Ok(Self::FactorSpace),
            other => Err(Error::InvalidArgument(format!(
                "unknown momentum mode `{other}` (expected none, w_space or factor_space)"
            ))),
        }
    }
}

impl fmt::Display for MomentumMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::WSpace => "w_space",
            Self::FactorSpace => "factor_space",
        })
    }
}

/// Where the weight-space gradient comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GradientSource {
    /// `G` as returned by the objective.
    Exact,
    /// `G <- G_B A + B G_A`, the image of the factor gradients.
    Surrogate,
}

impl FromStr for GradientSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(Self::Exact),
            "surrogate" => Ok(Self::Surrogate),
            other => Err(Error::InvalidArgument(format!(
                "unknown gradient source `{other}` (expected exact or surrogate)"
            ))),
        }
    }
}

impl fmt::Display for GradientSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Exact => "exact",
            Self::Surrogate => "surrogate",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig<T: Scalar> {
    pub learning_rate: T,
    pub weight_decay: T,
    pub decay_row: T,
    pub decay_col: T,
    /// First-moment decay (`beta3`).
    pub momentum_decay: T,
    pub eps: T,
    pub momentum_mode: MomentumMode,
    pub gradient_source: GradientSource,
}

impl<T: Scalar> OptimizerConfig<T> {
    pub fn new(learning_rate: T) -> Self {
        Self {
            learning_rate,
            weight_decay: T::zero(),
            decay_row: T::lit(DEFAULT_DECAY),
            decay_col: T::lit(DEFAULT_DECAY),
            momentum_decay: T::lit(0.9),
            eps: T::lit(DEFAULT_EPS),
            momentum_mode: MomentumMode::None,
            gradient_source: GradientSource::Exact,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |x: T| x >= T::zero() && x <= T::one();
        if !(self.learning_rate > T::zero()) {
            return Err(Error::InvalidArgument(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !(self.weight_decay >= T::zero()) {
            return Err(Error::InvalidArgument(format!("weight_decay must be nonnegative, got {}", self.weight_decay)));
        }
        if !unit(self.decay_row) || !unit(self.decay_col) {
            return Err(Error::InvalidArgument("decay_row and decay_col must lie in [0, 1]".into()));
        }
        if !(self.momentum_decay >= T::zero() && self.momentum_decay < T::one()) {
            return Err(Error::InvalidArgument(format!(
                "momentum_decay must lie in [0, 1), got {}",
                self.momentum_decay
            )));
        }
        if !(self.eps > T::zero()) {
            return Err(Error::InvalidArgument(format!("eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }

    /// Fresh Adafactor state with this configuration's decays and `eps`.
    pub fn adafactor_state(&self, m: usize, n: usize) -> Result<AdafactorState<T>> {
        AdafactorState::new(m, n, self.decay_row, self.decay_col, self.eps)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum MomentumBuffer<T: Scalar> {
    WSpace(DMatrix<T>),
    FactorSpace { m_b: DMatrix<T>, m_a: DMatrix<T> },
}

/// First-moment buffer in exactly one representation.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentumState<T: Scalar> {
    pub buffer: MomentumBuffer<T>,
    pub step_count: u64,
}

impl<T: Scalar> MomentumState<T> {
    pub fn new(mode: MomentumMode, m: usize, n: usize, r: usize) -> Result<Self> {
        let buffer = match mode {
            MomentumMode::WSpace => MomentumBuffer::WSpace(DMatrix::zeros(m, n)),
            MomentumMode::FactorSpace => MomentumBuffer::FactorSpace {
                m_b: DMatrix::zeros(m, r),
                m_a: DMatrix::zeros(r, n),
            },
            MomentumMode::None => {
                return Err(Error::InvalidArgument(
                    "momentum state requires momentum_mode w_space or factor_space".into(),
                ))
            }
        };
        Ok(Self { buffer, step_count: 0 })
    }

    pub fn mode(&self) -> MomentumMode {
        match self.buffer {
            MomentumBuffer::WSpace(_) => MomentumMode::WSpace,
            MomentumBuffer::FactorSpace { .. } => MomentumMode::FactorSpace,
        }
    }

    /// Stored scalars: `m n` for w_space, `(m + n) r` for factor_space.
    pub fn num_scalars(&self) -> usize {
        match &self.buffer {
            MomentumBuffer::WSpace(m) => m.len(),
            MomentumBuffer::FactorSpace { m_b, m_a } => m_b.len() + m_a.len(),
        }
    }
}

/// `B = 0`, `A` uniform on `[-1/sqrt(n), 1/sqrt(n)]` from a Xoshiro256++
/// stream seeded with `seed` via SplitMix64.
pub fn init_factors<T: Scalar>(m: usize, n: usize, r: usize, seed: u64) -> Result<FactorPair<T>> {
    if r == 0 || r > m.min(n) {
        return Err(Error::InvalidArgument(format!(
            "factor rank must satisfy 1 <= r <= min(m, n); got m={m}, n={n}, r={r}"
        )));
    }
    let bound = 1.0 / (n as f64).sqrt();
    let mut rng = rng_from_seed(seed);
    let a = DMatrix::from_fn(r, n, |_, _| T::lit(rng.random_range(-bound..=bound)));
    FactorPair::new(DMatrix::zeros(m, r), a)
}

fn effective_gradient<T: Scalar>(fp: &FactorPair<T>, g: &DMatrix<T>, cfg: &OptimizerConfig<T>) -> Result<DMatrix<T>> {
    fp.ensure_weight_shape("optimizer step", "G", g)?;
    ensure_finite("optimizer step", g)?;
    match cfg.gradient_source {
        GradientSource::Exact => Ok(g.clone()),
        // G_B A + B G_A = G A^T A + B B^T G
        GradientSource::Surrogate => jacobian_gram_w(fp, g),
    }
}

fn apply_step<T: Scalar>(fp: &FactorPair<T>, d: &UpdateDelta<T>, shrink: T, step: T) -> Result<FactorPair<T>> {
    FactorPair::new(fp.b() * shrink - &d.d_b * step, fp.a() * shrink - &d.d_a * step)
}

fn preconditioned_step<T: Scalar>(fp: &FactorPair<T>, w: &DiagWeights<T>, g: DMatrix<T>, lr: T) -> Result<FactorPair<T>> {
    let gb = GradientBundle::from_w_gradient(fp, g)?;
    let d = closed_form_update(fp, w, &gb)?;
    apply_step(fp, &d, T::one(), lr)
}

/// One AdaPreLoRA step with plain SGD (no weight decay, no bias correction).
pub fn step_adaprelora_sgd<T: Scalar>(
    fp: &FactorPair<T>,
    state: &AdafactorState<T>,
    g: &DMatrix<T>,
    cfg: &OptimizerConfig<T>,
) -> Result<(FactorPair<T>, AdafactorState<T>)> {
    let g = effective_gradient(fp, g, cfg)?;
    let state = state.update_stats(&g)?;
    let w = state.build_weights();
    let next = preconditioned_step(fp, &w, g, cfg.learning_rate)?;
    Ok((next, state))
}

/// Bias factor `sqrt(1 - decay_row^t) / (1 - beta3^t)`.
pub fn bias_correction<T: Scalar>(decay_row: T, momentum_decay: T, t: u64) -> T {
    let t = t.min(i32::MAX as u64) as i32;
    (T::one() - decay_row.powi(t)).sqrt() / (T::one() - momentum_decay.powi(t))
}

/// One AdaPreLoRA step with momentum and decoupled weight decay.
pub fn step_adaprelora_momentum<T: Scalar>(
    fp: &FactorPair<T>,
    state: &AdafactorState<T>,
    mstate: &MomentumState<T>,
    g: &DMatrix<T>,
    cfg: &OptimizerConfig<T>,
) -> Result<(FactorPair<T>, AdafactorState<T>, MomentumState<T>)> {
    let g = effective_gradient(fp, g, cfg)?;
    let state = state.update_stats(&g)?;
    let w = state.build_weights();
    let beta = cfg.momentum_decay;
    let keep = T::one() - beta;

    let (buffer, bundle) = match &mstate.buffer {
        MomentumBuffer::WSpace(m) => {
            let m = m * beta + &g * keep;
            let bundle = GradientBundle::from_w_gradient(fp, m.clone())?;
            (MomentumBuffer::WSpace(m), bundle)
        }
        MomentumBuffer::FactorSpace { m_b, m_a } => {
            let gb = GradientBundle::from_w_gradient(fp, g)?;
            let m_b = m_b * beta + gb.g_b() * keep;
            let m_a = m_a * beta + gb.g_a() * keep;
            let bundle = GradientBundle::from_factor_gradients(fp, m_b.clone(), m_a.clone())?;
            (MomentumBuffer::FactorSpace { m_b, m_a }, bundle)
        }
    };
    let t = mstate.step_count + 1;
    if t == 1 && state.decay_row != state.decay_col {
        log::warn!("decay_row != decay_col; bias correction uses decay_row only");
    }
    let c_t = bias_correction(state.decay_row, beta, t);
    let d = closed_form_update(fp, &w, &bundle)?;
    let lr = cfg.learning_rate;
    let next = apply_step(fp, &d, T::one() - cfg.weight_decay * lr, lr * c_t)?;
    Ok((next, state, MomentumState { buffer, step_count: t }))
}

/// Plain SGD on the factor gradients `G_B = G A^T`, `G_A = B^T G`.
pub fn step_factor_sgd<T: Scalar>(fp: &FactorPair<T>, g: &DMatrix<T>, cfg: &OptimizerConfig<T>) -> Result<FactorPair<T>> {
    let gb = GradientBundle::from_w_gradient(fp, g.clone())?;
    let lr = cfg.learning_rate;
    FactorPair::new(fp.b() - gb.g_b() * lr, fp.a() - gb.g_a() * lr)
}

/// Scaled GD: `dB = G_B (A A^T + eps I)^{-1}`, `dA = (B^T B + eps I)^{-1} G_A`.
pub fn step_scaled_gd<T: Scalar>(fp: &FactorPair<T>, g: &DMatrix<T>, cfg: &OptimizerConfig<T>) -> Result<FactorPair<T>> {
    let gb = GradientBundle::from_w_gradient(fp, g.clone())?;
    let (b, a) = (fp.b(), fp.a());
    let aat_inv = regularized_inverse("scaled_gd: A A^T", &(a * a.transpose()), cfg.eps);
    let btb_inv = regularized_inverse("scaled_gd: B^T B", &(b.transpose() * b), cfg.eps);
    let lr = cfg.learning_rate;
    FactorPair::new(b - gb.g_b() * aat_inv * lr, a - btb_inv * gb.g_a() * lr)
}

/// The closed-form update with identity weights (Frobenius projection).
pub fn step_identity_projected<T: Scalar>(fp: &FactorPair<T>, g: &DMatrix<T>, cfg: &OptimizerConfig<T>) -> Result<FactorPair<T>> {
    let g = effective_gradient(fp, g, cfg)?;
    let w = DiagWeights::identity(fp.rows(), fp.cols(), cfg.eps);
    preconditioned_step(fp, &w, g, cfg.learning_rate)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OptimizerKind {
    AdaPreLoraSgd,
    AdaPreLoraMomentum,
    FactorSgd,
    ScaledGd,
    IdentityProjected,
}

impl OptimizerKind {
    pub const ALL: [OptimizerKind; 5] = [
        Self::AdaPreLoraSgd,
        Self::AdaPreLoraMomentum,
        Self::FactorSgd,
        Self::ScaledGd,
        Self::IdentityProjected,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::AdaPreLoraSgd => "adaprelora_sgd",
            Self::AdaPreLoraMomentum => "adaprelora_momentum",
            Self::FactorSgd => "factor_sgd",
            Self::ScaledGd => "scaled_gd",
            Self::IdentityProjected => "identity_projected",
        }
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Self::ALL.iter().map(|k| k.name()).collect();
                Error::InvalidArgument(format!("unknown optimizer `{s}` (expected one of {})", names.join(", ")))
            })
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One layer's optimizer: a kind, its configuration and its state.
#[derive(Debug, Clone)]
pub struct Optimizer<T: Scalar> {
    kind: OptimizerKind,
    cfg: OptimizerConfig<T>,
    adafactor: Option<AdafactorState<T>>,
    momentum: Option<MomentumState<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind, cfg: OptimizerConfig<T>, m: usize, n: usize, r: usize) -> Result<Self> {
        cfg.validate()?;
        let (adafactor, momentum) = match kind {
            OptimizerKind::AdaPreLoraSgd => (Some(cfg.adafactor_state(m, n)?), None),
            OptimizerKind::AdaPreLoraMomentum => {
                let mode = match cfg.momentum_mode {
                    MomentumMode::None => MomentumMode::WSpace,
                    mode => mode,
                };
                (Some(cfg.adafactor_state(m, n)?), Some(MomentumState::new(mode, m, n, r)?))
            }
            _ => (None, None),
        };
        Ok(Self { kind, cfg, adafactor, momentum })
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn config(&self) -> &OptimizerConfig<T> {
        &self.cfg
    }

    /// Scalars of optimizer state kept between steps.
    pub fn state_scalars(&self) -> usize {
        self.adafactor.as_ref().map_or(0, |s| s.num_scalars()) + self.momentum.as_ref().map_or(0, |s| s.num_scalars())
    }

    pub fn step(&mut self, fp: &FactorPair<T>, g: &DMatrix<T>) -> Result<FactorPair<T>> {
        let cfg = &self.cfg;
        match self.kind {
            OptimizerKind::AdaPreLoraSgd => {
                let state = self.adafactor.as_ref().expect("adafactor state");
                let (next, state) = step_adaprelora_sgd(fp, state, g, cfg)?;
                self.adafactor = Some(state);
                Ok(next)
            }
            OptimizerKind::AdaPreLoraMomentum => {
                let state = self.adafactor.as_ref().expect("adafactor state");
                let mstate = self.momentum.as_ref().expect("momentum state");
                let (next, state, mstate) = step_adaprelora_momentum(fp, state, mstate, g, cfg)?;
                self.adafactor = Some(state);
                self.momentum = Some(mstate);
                Ok(next)
            }
            OptimizerKind::FactorSgd => step_factor_sgd(fp, g, cfg),
            OptimizerKind::ScaledGd => step_scaled_gd(fp, g, cfg),
            OptimizerKind::IdentityProjected => step_identity_projected(fp, g, cfg),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::projection::project_standard;
    use crate::sampling::{random_full_rank_pair, random_matrix, random_orthonormal, rng_from_seed};

    fn m(rows: usize, cols: usize, data: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(rows, cols, data)
    }

    fn e1_pair() -> FactorPair<f64> {
        FactorPair::new(m(2, 1, &[1.0, 0.0]), m(1, 2, &[1.0, 0.0])).unwrap()
    }

    #[test]
    fn init_factors_contract() {
        let fp = init_factors::<f64>(5, 4, 2, 17).unwrap();
        assert_eq!(fp.b(), &DMatrix::zeros(5, 2));
        assert!(fp.a().iter().all(|&x| (-0.5..=0.5).contains(&x)));
        assert_eq!(init_factors::<f64>(5, 4, 2, 17).unwrap(), fp);
        assert_ne!(init_factors::<f64>(5, 4, 2, 18).unwrap(), fp);
        assert!(init_factors::<f64>(2, 4, 3, 0).is_err());
        assert!(init_factors::<f64>(4, 4, 0, 0).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(OptimizerConfig::new(0.0f64).validate().is_err());
        let mut cfg = OptimizerConfig::new(0.1f64);
        assert!(cfg.validate().is_ok());
        cfg.momentum_decay = 1.0;
        assert!(cfg.validate().is_err());
        assert!("sideways".parse::<MomentumMode>().is_err());
        assert_eq!("factor_space".parse::<MomentumMode>().unwrap(), MomentumMode::FactorSpace);
        assert_eq!("surrogate".parse::<GradientSource>().unwrap(), GradientSource::Surrogate);
        assert_eq!("scaled_gd".parse::<OptimizerKind>().unwrap(), OptimizerKind::ScaledGd);
        assert!("adamw".parse::<OptimizerKind>().is_err());
    }

    #[test]
    fn adaprelora_sgd_zero_gradient() {
        let mut rng = rng_from_seed(1);
        let fp = random_full_rank_pair::<f64>(&mut rng, 4, 3, 2);
        let cfg = OptimizerConfig::new(0.1);
        let state = cfg.adafactor_state(4, 3).unwrap();
        let (next, state) = step_adaprelora_sgd(&fp, &state, &DMatrix::zeros(4, 3), &cfg).unwrap();
        assert_eq!(next, fp);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn adaprelora_sgd_from_zero_b_moves_only_b() {
        let fp = init_factors::<f64>(4, 5, 2, 3).unwrap();
        let g = random_matrix(&mut rng_from_seed(2), 4, 5);
        let cfg = OptimizerConfig::new(0.1);
        let state = cfg.adafactor_state(4, 5).unwrap();
        let (next, _) = step_adaprelora_sgd(&fp, &state, &g, &cfg).unwrap();
        assert_eq!(next.a(), fp.a());
        assert!(next.b().norm() > 0.0);
    }

    #[test]
    fn adaprelora_sgd_with_identity_weights_is_projected_step() {
        let mut rng = rng_from_seed(4);
        let fp = random_full_rank_pair::<f64>(&mut rng, 3, 3, 2);
        // unit-magnitude square gradient with zero decay forces L = R = I
        let g = DMatrix::from_fn(3, 3, |i, j| if (i + 2 * j) % 3 == 0 { -1.0 } else { 1.0 });
        let mut cfg = OptimizerConfig::new(0.3);
        cfg.decay_row = 0.0;
        cfg.decay_col = 0.0;
        let state = cfg.adafactor_state(3, 3).unwrap();
        let (ada, state) = step_adaprelora_sgd(&fp, &state, &g, &cfg).unwrap();
        assert_eq!(state.build_weights(), DiagWeights::identity(3, 3, cfg.eps));
        let proj = step_identity_projected(&fp, &g, &cfg).unwrap();
        assert!((ada.b() - proj.b()).norm() <= 1e-12);
        assert!((ada.a() - proj.a()).norm() <= 1e-12);
    }

    #[test]
    fn momentum_collapses_to_sgd() {
        let mut rng = rng_from_seed(5);
        let fp = random_full_rank_pair::<f64>(&mut rng, 5, 4, 2);
        let g = random_matrix(&mut rng, 5, 4);
        let mut cfg = OptimizerConfig::new(0.05);
        cfg.decay_row = 0.0;
        cfg.decay_col = 0.0;
        cfg.momentum_decay = 0.0;
        let state = cfg.adafactor_state(5, 4).unwrap();
        let ms = MomentumState::new(MomentumMode::WSpace, 5, 4, 2).unwrap();
        let (a, _, ms2) = step_adaprelora_momentum(&fp, &state, &ms, &g, &cfg).unwrap();
        let (b, _) = step_adaprelora_sgd(&fp, &state, &g, &cfg).unwrap();
        assert!((a.b() - b.b()).norm() <= 1e-13);
        assert!((a.a() - b.a()).norm() <= 1e-13);
        assert_eq!(ms2.step_count, 1);
    }

    #[test]
    fn momentum_weight_decay_only() {
        let mut rng = rng_from_seed(6);
        let fp = random_full_rank_pair::<f64>(&mut rng, 4, 4, 2);
        let mut cfg = OptimizerConfig::new(0.1);
        cfg.weight_decay = 0.5;
        for mode in [MomentumMode::WSpace, MomentumMode::FactorSpace] {
            let state = cfg.adafactor_state(4, 4).unwrap();
            let ms = MomentumState::new(mode, 4, 4, 2).unwrap();
            let (next, _, _) = step_adaprelora_momentum(&fp, &state, &ms, &DMatrix::zeros(4, 4), &cfg).unwrap();
            assert!((next.b() - fp.b() * 0.95).norm() <= 1e-15);
            assert!((next.a() - fp.a() * 0.95).norm() <= 1e-15);
        }
    }

    #[test]
    fn bias_correction_first_step() {
        let c = bias_correction(0.98f64, 0.9, 1);
        assert!((c - 0.02f64.sqrt() / 0.1).abs() < 1e-12);
        assert!((c - std::f64::consts::SQRT_2).abs() < 1e-12);
        assert_eq!(bias_correction(0.0f64, 0.0, 1), 1.0);
    }

    #[test]
    fn factor_sgd_hand_example() {
        let fp = e1_pair();
        let g = m(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let next = step_factor_sgd(&fp, &g, &OptimizerConfig::new(1.0)).unwrap();
        assert_eq!(next.b(), &m(2, 1, &[0.0, -3.0]));
        assert_eq!(next.a(), &m(1, 2, &[0.0, -2.0]));
        let cfg = OptimizerConfig::new(0.5);
        let z = DMatrix::zeros(2, 2);
        let once = step_factor_sgd(&fp, &z, &cfg).unwrap();
        assert_eq!(step_factor_sgd(&once, &z, &cfg).unwrap(), fp);
    }

    #[test]
    fn scaled_gd_cases() {
        let mut rng = rng_from_seed(7);
        let b: DMatrix<f64> = random_orthonormal(&mut rng, 5, 2);
        let a = random_orthonormal::<f64>(&mut rng, 4, 2).transpose();
        let fp = FactorPair::new(b, a).unwrap();
        let g = random_matrix(&mut rng, 5, 4);
        let mut cfg = OptimizerConfig::new(0.1);
        cfg.eps = 1e-14;
        let s = step_scaled_gd(&fp, &g, &cfg).unwrap();
        let f = step_factor_sgd(&fp, &g, &cfg).unwrap();
        assert!((s.b() - f.b()).norm() < 1e-12 && (s.a() - f.a()).norm() < 1e-12);
        assert_eq!(step_scaled_gd(&fp, &DMatrix::zeros(5, 4), &cfg).unwrap(), fp);

        let fp = FactorPair::new(m(2, 1, &[2.0, 0.0]), m(1, 2, &[1.0, 0.0])).unwrap();
        let g = m(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let cfg = OptimizerConfig::new(1.0);
        let next = step_scaled_gd(&fp, &g, &cfg).unwrap();
        let g_a = m(1, 2, &[2.0, 4.0]);
        assert!(((fp.a() - next.a()) - g_a * 0.25).norm() < 1e-6);
    }

    #[test]
    fn identity_projected_induces_standard_projection() {
        let mut rng = rng_from_seed(8);
        let fp = random_full_rank_pair::<f64>(&mut rng, 6, 5, 2);
        let g = random_matrix(&mut rng, 6, 5);
        let mut cfg = OptimizerConfig::new(1.0);
        cfg.eps = 1e-12;
        let w = DiagWeights::identity(6, 5, cfg.eps);
        let d = closed_form_update(&fp, &w, &GradientBundle::from_w_gradient(&fp, g.clone()).unwrap()).unwrap();
        let p = project_standard(&fp, &g).unwrap();
        assert!((d.induced_w - p).norm() <= 1e-9 * g.norm());
        assert_eq!(step_identity_projected(&fp, &DMatrix::zeros(6, 5), &cfg).unwrap(), fp);
    }

    #[test]
    fn surrogate_gradient_is_factor_image() {
        let mut rng = rng_from_seed(9);
        let fp = random_full_rank_pair::<f64>(&mut rng, 4, 4, 2);
        let g = random_matrix(&mut rng, 4, 4);
        let mut cfg = OptimizerConfig::new(0.1);
        cfg.gradient_source = GradientSource::Surrogate;
        let eff = effective_gradient(&fp, &g, &cfg).unwrap();
        let expected = (&g * fp.a().transpose()) * fp.a() + fp.b() * (fp.b().transpose() * &g);
        assert!((eff - expected).norm() < 1e-12);
    }

    #[test]
    fn state_accounting() {
        let (m_, n_, r_) = (12, 7, 3);
        let cfg = OptimizerConfig::new(0.1f64);
        let sgd = Optimizer::new(OptimizerKind::AdaPreLoraSgd, cfg.clone(), m_, n_, r_).unwrap();
        assert_eq!(sgd.state_scalars(), m_ + n_);
        let mut c = cfg.clone();
        c.momentum_mode = MomentumMode::FactorSpace;
        let fac = Optimizer::new(OptimizerKind::AdaPreLoraMomentum, c.clone(), m_, n_, r_).unwrap();
        assert_eq!(fac.state_scalars(), m_ + n_ + (m_ + n_) * r_);
        c.momentum_mode = MomentumMode::WSpace;
        let ws = Optimizer::new(OptimizerKind::AdaPreLoraMomentum, c, m_, n_, r_).unwrap();
        assert_eq!(ws.state_scalars(), m_ + n_ + m_ * n_);
        assert!(MomentumState::<f64>::new(MomentumMode::None, 2, 2, 1).is_err());
    }

    #[test]
    fn nan_gradient_rejected() {
        let fp = e1_pair();
        let cfg = OptimizerConfig::new(0.1);
        let g = m(2, 2, &[f64::NAN, 0.0, 0.0, 0.0]);
        let state = cfg.adafactor_state(2, 2).unwrap();
        assert!(step_adaprelora_sgd(&fp, &state, &g, &cfg).is_err());
    }
}
