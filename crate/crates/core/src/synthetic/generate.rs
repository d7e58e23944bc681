use super::covariates::CovariateSet;
use super::params::GenParams;
use crate::error::{Error, Result};
use crate::point_process::{nearest_point_distances, IntensityField, Point, PointPattern};

/// Coefficients of one log-linear intensity `exp(c0 + cX·X + cZ Z* + cY Y*)`.
#[derive(Debug, Clone, Copy)]
pub struct LogLinear {
    pub intercept: f64,
    pub covariates: [f64; 4],
    pub treatment: f64,
    pub outcome: f64,
}

impl LogLinear {
    pub fn treatment(params: &GenParams) -> Self {
        Self { intercept: params.beta0, covariates: params.beta_x, treatment: params.beta_z, outcome: params.beta_y }
    }

    pub fn outcome(params: &GenParams) -> Self {
        Self {
            intercept: params.gamma0,
            covariates: params.gamma_x,
            treatment: params.gamma_z,
            outcome: params.gamma_y,
        }
    }

    /// `c0 + cX·X(s)` per cell.
    pub fn base(&self, cov: &CovariateSet) -> Vec<f64> {
        cov.linear_term(&self.covariates).into_iter().map(|v| v + self.intercept).collect()
    }
}

fn evaluate(
    cov: &CovariateSet,
    coef: LogLinear,
    treatment_pts: &[Point],
    outcome_pts: &[Point],
    params: &GenParams,
) -> Result<IntensityField> {
    let region = cov.region();
    let dz = nearest_point_distances(region, treatment_pts);
    let dy = nearest_point_distances(region, outcome_pts);
    let values: Vec<f64> = coef
        .base(cov)
        .into_iter()
        .zip(dz.iter().zip(&dy))
        .map(|(b, (&z, &y))| (b + coef.treatment * params.proximity(z) + coef.outcome * params.proximity(y)).exp())
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("log-linear intensity overflowed".into()));
    }
    IntensityField::new(*region, values)
}

/// λ_Z(s) = exp(β0 + βX·X(s) + βZ Z*(s) + βY Y*(s)), with Z*, Y* the proximity
/// terms to the previous treatment and outcome patterns.
pub fn treatment_intensity(
    cov: &CovariateSet,
    prev_treatment: &[Point],
    prev_outcome: &[Point],
    params: &GenParams,
) -> Result<IntensityField> {
    evaluate(cov, LogLinear::treatment(params), prev_treatment, prev_outcome, params)
}

/// λ_Y(s) with the treatment proximity measured to the union of the window's
/// treatment patterns (normally steps t-3..t).
pub fn outcome_intensity(
    cov: &CovariateSet,
    treatments_window: &[&PointPattern],
    prev_outcome: &[Point],
    params: &GenParams,
) -> Result<IntensityField> {
    let union: Vec<Point> = treatments_window.iter().flat_map(|p| p.points().iter().copied()).collect();
    evaluate(cov, LogLinear::outcome(params), &union, prev_outcome, params)
}
