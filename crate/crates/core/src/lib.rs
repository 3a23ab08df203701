//! Preconditioned low-rank factor updates.
//!
//! A weight change `B A` is trained through its factors. Each step maps the
//! weight-space gradient `G` to a factor update `(dB, dA)` whose induced
//! weight change `dB A + B dA` is the orthogonal projection of the
//! Adafactor-preconditioned gradient onto the tangent subspace, in the metric
//! defined by the same preconditioner. Among the `r^2`-dimensional family of
//! factor updates with that image, the one balancing the two factor
//! contributions is selected in closed form.
//!
//! All numerical code is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the double-precision instantiation used by the CLI and
//! the verification suite.

// `!(x > 0)` style checks are intentional: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adafactor;
pub mod error;
pub mod generator;
pub mod harness;
pub mod linalg;
pub mod optim;
pub mod oracle;
pub mod problems;
pub mod projection;
pub mod sampling;
pub mod scalar;
pub mod solver;
pub mod verify;

pub use adafactor::{AdafactorState, DiagWeights};
pub use error::{Error, Result};
pub use generator::{
    apply_adjoint, apply_jacobian, jacobian_gram_factor, jacobian_gram_w, kernel_direction, vectorized_jacobian,
    FactorDirection, FactorPair,
};
pub use optim::{
    init_factors, step_adaprelora_momentum, step_adaprelora_sgd, step_factor_sgd, step_identity_projected,
    step_scaled_gd, GradientSource, MomentumMode, MomentumState, Optimizer, OptimizerConfig, OptimizerKind,
};
pub use oracle::{brute_force_update, finite_diff_gradient, min_norm_update};
pub use problems::{make_problem, ProblemInstance, ProblemKind, ProblemSpec};
pub use projection::{project_standard, project_weighted};
pub use scalar::Scalar;
pub use solver::{closed_form_update, family_solution, imbalance, optimal_gauge, GaugeParameter, GradientBundle, UpdateDelta};

/// Dense matrix in double precision.
pub type Mat = nalgebra::DMatrix<f64>;
pub type FactorPair64 = FactorPair<f64>;
pub type FactorDirection64 = FactorDirection<f64>;
pub type AdafactorState64 = AdafactorState<f64>;
pub type DiagWeights64 = DiagWeights<f64>;
pub type GradientBundle64 = GradientBundle<f64>;
pub type UpdateDelta64 = UpdateDelta<f64>;
pub type GaugeParameter64 = GaugeParameter<f64>;
pub type OptimizerConfig64 = OptimizerConfig<f64>;
pub type MomentumState64 = MomentumState<f64>;
pub type Optimizer64 = Optimizer<f64>;
pub type ProblemInstance64 = ProblemInstance<f64>;

/// Single-precision aliases.
pub type FactorPair32 = FactorPair<f32>;
pub type DiagWeights32 = DiagWeights<f32>;
pub type OptimizerConfig32 = OptimizerConfig<f32>;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
