//! Counterfactual outcome estimation for spatial-temporal point patterns.
//!
//! Treatments and outcomes are point patterns observed over a time series on a
//! gridded rectangular region. The crate estimates the expected number of
//! outcome events in a sub-region when the treatments of the last `M` steps are
//! drawn from an analyst-chosen Poisson process, using inverse probability
//! weighting of fitted outcome intensities.
//!
//! Modules:
//! - [`point_process`]: regions, intensity fields, Poisson sampling.
//! - [`synthetic`]: the synthetic generating process, interventions and the
//!   brute-force ground truth.
//! - [`diff`]: a small reverse-mode differentiation tape and network layers.
//! - [`propensity`]: count reduction, propensity regression and
//!   counterfactual probabilities.
//! - [`intensity`]: attention-based and kernel intensity estimation.
//! - [`estimator`]: the IPW estimators.
//! - [`baselines`]: scalar-series comparison methods.
//! - [`harness`]: configuration, experiment grid, metrics and I/O.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod diff;
pub mod error;
pub mod estimator;
pub mod harness;
pub mod intensity;
pub mod point_process;
pub mod propensity;
pub mod rng;
pub mod synthetic;

pub use error::{Error, Result};
