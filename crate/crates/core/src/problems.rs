//! Synthetic quadratic objectives over `W = W0 + B A`.
//!
//! * recovery: `1/2 || W0 + B A - T ||_F^2` where `T - W0` is a planted
//!   low-rank matrix with a geometric spectrum from `kappa * s_min` down to
//!   `s_min = 1`.
//! * sensing: `1/2 sum_i (<M_i, W0 + B A> - y_i)^2` with standard-normal
//!   `M_i` and noiseless `y_i` generated from the same planted target.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::generator::FactorPair;
use crate::sampling::{random_matrix, rng_from_seed, with_singular_values};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ProblemKind {
    Recovery,
    Sensing,
}

impl FromStr for ProblemKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "recovery" => Ok(Self::Recovery),
            "sensing" => Ok(Self::Sensing),
            other => Err(Error::InvalidArgument(format!(
                "unknown problem kind `{other}` (expected recovery or sensing)"
            ))),
        }
    }
}

impl fmt::Display for ProblemKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Recovery => "recovery",
            Self::Sensing => "sensing",
        })
    }
}

/// Everything needed to regenerate an instance bit-for-bit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProblemSpec {
    pub kind: ProblemKind,
    pub m: usize,
    pub n: usize,
    pub planted_rank: usize,
    pub condition_number: f64,
    pub seed: u64,
}

impl ProblemSpec {
    /// `key=value` pairs describing the instance for run records.
    pub fn metadata(&self) -> Vec<(&'static str, String)> {
        vec![
            ("problem", self.kind.to_string()),
            ("m", self.m.to_string()),
            ("n", self.n.to_string()),
            ("planted_rank", self.planted_rank.to_string()),
            ("condition_number", self.condition_number.to_string()),
            ("problem_seed", self.seed.to_string()),
        ]
    }

    pub fn measurement_count(&self) -> usize {
        5 * self.planted_rank * (self.m + self.n)
    }
}

#[derive(Debug, Clone)]
pub enum Target<T: Scalar> {
    Dense(DMatrix<T>),
    Measurements(Vec<(DMatrix<T>, T)>),
}

#[derive(Debug, Clone)]
pub struct ProblemInstance<T: Scalar> {
    pub spec: ProblemSpec,
    pub w0: DMatrix<T>,
    pub target: Target<T>,
    /// The planted low-rank residual (`T - W0` for recovery).
    pub planted: DMatrix<T>,
}

/// Geometric spectrum from `kappa` down to 1.
pub fn planted_spectrum(rank: usize, kappa: f64) -> Vec<f64> {
    if rank == 1 {
        return vec![1.0];
    }
    (0..rank)
        .map(|i| kappa.powf((rank - 1 - i) as f64 / (rank - 1) as f64))
        .collect()
}

pub fn make_problem<T: Scalar>(
    kind: ProblemKind,
    m: usize,
    n: usize,
    planted_rank: usize,
    condition_number: f64,
    seed: u64,
) -> Result<ProblemInstance<T>> {
    if m == 0 || n == 0 || planted_rank == 0 || planted_rank > m.min(n) {
        return Err(Error::InvalidArgument(format!(
            "planted rank must satisfy 1 <= k <= min(m, n); got m={m}, n={n}, k={planted_rank}"
        )));
    }
    if !(condition_number >= 1.0) || !condition_number.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "condition number must be finite and >= 1, got {condition_number}"
        )));
    }
    let spec = ProblemSpec { kind, m, n, planted_rank, condition_number, seed };
    let mut rng = rng_from_seed(seed);
    let w0 = random_matrix::<T>(&mut rng, m, n) * T::lit(1.0 / (n as f64).sqrt());
    let s: Vec<T> = planted_spectrum(planted_rank, condition_number).into_iter().map(T::lit).collect();
    let planted = with_singular_values(&mut rng, m, n, &s);
    let target = match kind {
        ProblemKind::Recovery => Target::Dense(&w0 + &planted),
        ProblemKind::Sensing => {
            let truth = &w0 + &planted;
            Target::Measurements(
                (0..spec.measurement_count())
                    .map(|_| {
                        let mi = random_matrix::<T>(&mut rng, m, n);
                        let yi = mi.dot(&truth);
                        (mi, yi)
                    })
                    .collect(),
            )
        }
    };
    Ok(ProblemInstance { spec, w0, target, planted })
}

impl<T: Scalar> ProblemInstance<T> {
    /// Loss and exact weight-space gradient at `W0 + B A`.
    pub fn loss_and_gradient(&self, fp: &FactorPair<T>) -> Result<(T, DMatrix<T>)> {
        fp.ensure_weight_shape("loss_and_gradient", "B A", &self.w0)?;
        let w = &self.w0 + fp.product();
        let half = T::lit(0.5);
        match &self.target {
            Target::Dense(t) => {
                let g = w - t;
                Ok((half * g.norm_squared(), g))
            }
            Target::Measurements(ms) => {
                let mut g = DMatrix::zeros(w.nrows(), w.ncols());
                let mut loss = T::zero();
                for (mi, yi) in ms {
                    let resid = mi.dot(&w) - *yi;
                    loss += half * resid * resid;
                    g += mi * resid;
                }
                Ok((loss, g))
            }
        }
    }

    pub fn loss(&self, fp: &FactorPair<T>) -> Result<T> {
        self.loss_and_gradient(fp).map(|(l, _)| l)
    }
}
