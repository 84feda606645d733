//! PAC-Bayes risk certificates for stochastic neural networks.
//!
//! The crate covers the numerical bound machinery ([`bounds`]), divergences
//! between factorized Gaussian weight distributions ([`divergence`]), a small
//! stochastic MLP with manual backpropagation ([`stochnet`]), prior and
//! posterior training ([`training`]), Monte-Carlo risk evaluation
//! ([`evaluation`]), synthetic data ([`synthdata`]), and end-to-end experiment
//! drivers ([`experiment`]).

// `!(x > 0.0)` is used deliberately throughout: unlike `x <= 0.0` it also
// rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bounds;
pub mod checkpoint;
pub mod divergence;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod numeric;
pub mod seeds;
pub mod stochnet;
pub mod synthdata;
pub mod training;

pub use bounds::{certify_risk, BoundInputs, Certificate, DeltaAllocation, VcBoundInput, VcGap};
pub use divergence::{GroupKind, PriorSpec, StochasticParamGroup};
pub use error::{Error, Result};
pub use evaluation::{EvalLoss, RiskEstimate};
pub use experiment::{ExperimentConfig, RunKind, RunReport};
pub use seeds::Stream;
pub use stochnet::{Label, LabeledExample, NetworkArchitecture, OutputHead, Task};
pub use training::{Hyperparams, Objective};
