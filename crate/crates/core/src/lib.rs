//! Interpretable chance-constrained control of a network slice.
//!
//! An ensemble of Kolmogorov-Arnold networks models the stochastic latency
//! `g(a|s)`; its mean and spread turn `Pr{g <= H} >= eps` into a deterministic
//! constraint that a genetic/trust-region solver enforces while minimizing the
//! vRB count. Online, the ensemble is refreshed with EWC and replay and an
//! adaptive offset shifts the threshold.
//!
//! Numerical code is generic over [`Scalar`] (`f32` or `f64`); the aliases at
//! the bottom pin the common choices.

pub mod controller;
pub mod ensemble;
pub mod error;
pub mod kan;
mod linalg;
pub mod problem;
pub mod rng;
pub mod scalar;
pub mod simenv;
pub mod solver;
pub mod stats;
pub mod tracker;

pub use controller::{run_experiment, ControlRound, Experiment, LoopState, RunReport};
pub use ensemble::{
    ensemble_mean, ensemble_variance, reformulate, reformulated_constraint_gradient, reformulated_constraint_value,
    EnsembleSurrogate, Observation,
};
pub use error::{Error, Result};
pub use kan::{extract_closed_form, kan_train, ClosedFormExpr, KanArch, KanModel, Sample, Scaler, TrainOptions};
pub use problem::{
    objective, ChanceConstraint, ControlAction, IntBounds, NetworkState, Policy, ProblemConfig, ReformulationMode,
};
pub use scalar::Scalar;
pub use stats::inverse_normal_cdf;
pub use tracker::{compute_fisher, continual_update, EwcPenalty, OffsetController, ReplayBuffer};

pub type KanModelF64 = KanModel<f64>;
pub type KanModelF32 = KanModel<f32>;
pub type EnsembleF64 = EnsembleSurrogate<f64>;
pub type EnsembleF32 = EnsembleSurrogate<f32>;
pub type ConstraintF64 = ChanceConstraint<f64>;
pub type ObservationF64 = Observation<f64>;
