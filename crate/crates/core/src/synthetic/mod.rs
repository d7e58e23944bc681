//! The synthetic generating process, stochastic interventions and the
//! Monte Carlo ground truth used to score estimators.

mod covariates;
mod dataset;
mod generate;
mod ground_truth;
mod intervention;
mod params;

pub use covariates::{build_covariates, default_roads, CovariateSet};
pub use dataset::{load_field_csv, simulate_series, DataSource, Dataset, OUTCOME_TREATMENT_WINDOW};
pub use generate::{outcome_intensity, treatment_intensity, LogLinear};
pub use ground_truth::{ground_truth, GroundTruth, TruthStep};
pub use intervention::{intervene, InterventionSpec};
pub use params::{GenParams, KernelMode};
