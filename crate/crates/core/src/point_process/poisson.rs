use statrs::function::factorial::ln_factorial;

use crate::error::{Error, Result};

/// `k ln λ − λ − ln k!`, evaluated in log space.
pub fn poisson_log_pmf(k: u64, lambda: f64) -> Result<f64> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::Domain(format!("Poisson rate must be positive and finite, got {lambda}")));
    }
    let kf = k as f64;
    let term = if k == 0 { 0.0 } else { kf * lambda.ln() };
    Ok(term - lambda - ln_factorial(k))
}

pub fn poisson_pmf(k: u64, lambda: f64) -> Result<f64> {
    poisson_log_pmf(k, lambda).map(f64::exp)
}
