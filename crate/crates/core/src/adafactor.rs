//! Adafactor row/column second-moment statistics and the diagonal Kronecker
//! preconditioner `H Y = L^{1/2} Y R^{1/2}` they induce.
//!
//! The state keeps one scalar per row and one per column of the weight, i.e.
//! exactly `m + n` statistics for an `m x n` layer.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{diag_sandwich, ensure_finite, ensure_shape};
use crate::scalar::Scalar;

pub const DEFAULT_EPS: f64 = 1e-6;
pub const DEFAULT_DECAY: f64 = 0.98;

/// Running row/column second moments of the weight-space gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct AdafactorState<T: Scalar> {
    row_stats: DVector<T>,
    col_stats: DVector<T>,
    pub decay_row: T,
    pub decay_col: T,
    pub eps: T,
    step_count: u64,
}

impl<T: Scalar> AdafactorState<T> {
    pub fn new(m: usize, n: usize, decay_row: T, decay_col: T, eps: T) -> Result<Self> {
        let unit = |d: T| d >= T::zero() && d <= T::one();
        if !unit(decay_row) || !unit(decay_col) {
            return Err(Error::InvalidArgument(format!(
                "decay rates must lie in [0, 1]; got decay_row={decay_row}, decay_col={decay_col}"
            )));
        }
        if !(eps > T::zero()) {
            return Err(Error::InvalidArgument(format!("eps must be positive; got {eps}")));
        }
        Ok(Self {
            row_stats: DVector::zeros(m),
            col_stats: DVector::zeros(n),
            decay_row,
            decay_col,
            eps,
            step_count: 0,
        })
    }

    /// State with the default decays (0.98) and `eps = 1e-6`.
    pub fn with_defaults(m: usize, n: usize) -> Self {
        Self::new(m, n, T::lit(DEFAULT_DECAY), T::lit(DEFAULT_DECAY), T::lit(DEFAULT_EPS))
            .expect("defaults are valid")
    }

    pub fn row_stats(&self) -> &DVector<T> {
        &self.row_stats
    }

    pub fn col_stats(&self) -> &DVector<T> {
        &self.col_stats
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Number of stored statistic scalars (`m + n`).
    pub fn num_scalars(&self) -> usize {
        self.row_stats.len() + self.col_stats.len()
    }

    /// Overrides the raw statistics; used to set up specific preconditioners.
    pub fn with_stats(mut self, row_stats: DVector<T>, col_stats: DVector<T>) -> Result<Self> {
        if row_stats.len() != self.row_stats.len() || col_stats.len() != self.col_stats.len() {
            return Err(Error::DimensionMismatch {
                op: "AdafactorState::with_stats",
                expected: format!("{} row and {} column stats", self.row_stats.len(), self.col_stats.len()),
                got: format!("{} and {}", row_stats.len(), col_stats.len()),
            });
        }
        if row_stats.iter().chain(col_stats.iter()).any(|&v| !(v >= T::zero())) {
            return Err(Error::InvalidArgument("statistics must be nonnegative".into()));
        }
        self.row_stats = row_stats;
        self.col_stats = col_stats;
        Ok(self)
    }

    /// Folds `G ⊙ G` into the moving averages and advances the step count.
    pub fn update_stats(&self, g: &DMatrix<T>) -> Result<Self> {
        const OP: &str = "update_stats";
        ensure_shape(OP, "G", g, self.row_stats.len(), self.col_stats.len())?;
        ensure_finite(OP, g)?;
        let sq = g.component_mul(g);
        let row_sums = sq.column_sum();
        let col_sums = sq.row_sum().transpose();
        let (br, bc) = (self.decay_row, self.decay_col);
        Ok(Self {
            row_stats: &self.row_stats * br + row_sums * (T::one() - br),
            col_stats: &self.col_stats * bc + col_sums * (T::one() - bc),
            step_count: self.step_count + 1,
            ..self.clone()
        })
    }

    /// Normalized diagonals `max(l / sqrt(|l|_1), eps)` and their square
    /// roots. The floor sits on the normalized value so the result is
    /// strictly positive even for all-zero statistics.
    pub fn build_weights(&self) -> DiagWeights<T> {
        let eps = self.eps;
        let normalize = |v: &DVector<T>| -> DVector<T> {
            let l1 = v.iter().fold(T::zero(), |acc, &x| acc + x.abs());
            if l1 > T::zero() {
                let s = l1.sqrt();
                v.map(|x| (x / s).max(eps).sqrt())
            } else {
                v.map(|_| eps.sqrt())
            }
        };
        DiagWeights::from_half(normalize(&self.row_stats), normalize(&self.col_stats), eps)
            .expect("eps floor keeps weights positive")
    }
}

/// Diagonals of `L^{±1/2}` and `R^{±1/2}`, plus the Gram regularizer `eps`
/// carried along for the factor solver.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagWeights<T: Scalar> {
    l_half: DVector<T>,
    r_half: DVector<T>,
    l_neg_half: DVector<T>,
    r_neg_half: DVector<T>,
    eps: T,
}

impl<T: Scalar> DiagWeights<T> {
    pub fn from_half(l_half: DVector<T>, r_half: DVector<T>, eps: T) -> Result<Self> {
        if l_half.iter().chain(r_half.iter()).any(|&v| !(v > T::zero()) || !v.is_finite_value()) {
            return Err(Error::InvalidArgument("diagonal weights must be finite and positive".into()));
        }
        Ok(Self {
            l_neg_half: l_half.map(|v| T::one() / v),
            r_neg_half: r_half.map(|v| T::one() / v),
            l_half,
            r_half,
            eps,
        })
    }

    pub fn identity(m: usize, n: usize, eps: T) -> Self {
        Self::from_half(DVector::from_element(m, T::one()), DVector::from_element(n, T::one()), eps)
            .expect("unit weights are positive")
    }

    pub fn l_half(&self) -> &DVector<T> {
        &self.l_half
    }

    pub fn r_half(&self) -> &DVector<T> {
        &self.r_half
    }

    pub fn l_neg_half(&self) -> &DVector<T> {
        &self.l_neg_half
    }

    pub fn r_neg_half(&self) -> &DVector<T> {
        &self.r_neg_half
    }

    pub fn eps(&self) -> T {
        self.eps
    }

    pub fn with_eps(mut self, eps: T) -> Self {
        self.eps = eps;
        self
    }

    pub fn rows(&self) -> usize {
        self.l_half.len()
    }

    pub fn cols(&self) -> usize {
        self.r_half.len()
    }

    pub(crate) fn ensure_weight_shape(&self, op: &'static str, what: &str, y: &DMatrix<T>) -> Result<()> {
        ensure_shape(op, what, y, self.rows(), self.cols())
    }

    /// `H Y = L^{1/2} Y R^{1/2}`.
    pub fn apply_h(&self, y: &DMatrix<T>) -> Result<DMatrix<T>> {
        self.ensure_weight_shape("apply_h", "Y", y)?;
        Ok(diag_sandwich(&self.l_half, y, &self.r_half))
    }

    /// `H^{-1} K = L^{-1/2} K R^{-1/2}`.
    pub fn apply_h_inv(&self, k: &DMatrix<T>) -> Result<DMatrix<T>> {
        self.ensure_weight_shape("apply_h_inv", "K", k)?;
        Ok(DMatrix::from_fn(k.nrows(), k.ncols(), |i, j| {
            k[(i, j)] / (self.l_half[i] * self.r_half[j])
        }))
    }

    /// `<Y, Z>_H = <H Y, Z>`.
    pub fn weighted_inner(&self, y: &DMatrix<T>, z: &DMatrix<T>) -> Result<T> {
        self.ensure_weight_shape("weighted_inner", "Y", y)?;
        self.ensure_weight_shape("weighted_inner", "Z", z)?;
        let mut acc = T::zero();
        for j in 0..y.ncols() {
            for i in 0..y.nrows() {
                acc += self.l_half[i] * self.r_half[j] * y[(i, j)] * z[(i, j)];
            }
        }
        Ok(acc)
    }

    pub fn weighted_norm(&self, y: &DMatrix<T>) -> Result<T> {
        Ok(self.weighted_inner(y, y)?.max(T::zero()).sqrt())
    }
}
