//! Dimension reduction to counts, the history regressor for λ₁ and the
//! Monte Carlo counterfactual rate λ₂.

mod counts;
mod model;

pub use counts::{
    count_probability, counterfactual_prob, reduce, CounterfactualProb, ReducedCount, LAMBDA2_FLOOR,
};
pub use model::{
    balance_statistic, fit_propensity, history_features, propensity_score, PropensityConfig, PropensityModel,
    CHANNELS_PER_STEP,
};
