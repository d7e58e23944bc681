//! Scalar-series baselines: a linear regression of outcome counts on
//! treatment counts, and a marginal structural model fitted by weighted
//! least squares with stabilized Poisson weights.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::point_process::poisson_log_pmf;
use crate::propensity::reduce;
use crate::synthetic::Dataset;

/// Relative ridge penalty used when a design matrix is rank-deficient.
pub const RIDGE: f64 = 1e-8;
pub const GD_EPOCHS: usize = 10;
pub const GD_LEARNING_RATE: f64 = 4e-5;

/// Reduced counts R(z_t), R(Y_t) for t = 1..=T.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScalarSeries {
    treatments: Vec<u64>,
    outcomes: Vec<u64>,
}

impl ScalarSeries {
    pub fn new(treatments: Vec<u64>, outcomes: Vec<u64>) -> Result<Self> {
        if treatments.len() != outcomes.len() || treatments.is_empty() {
            return Err(Error::Shape(format!(
                "series lengths {} and {} must be equal and nonzero",
                treatments.len(),
                outcomes.len()
            )));
        }
        Ok(Self { treatments, outcomes })
    }

    pub fn from_dataset(d: &Dataset) -> Self {
        let treatments = d.treatments.iter().map(|p| reduce(p).value()).collect();
        let outcomes = d.outcomes.iter().map(|p| reduce(p).value()).collect();
        Self { treatments, outcomes }
    }

    pub fn len(&self) -> usize {
        self.treatments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.treatments.is_empty()
    }

    /// 1-based.
    pub fn treatment(&self, t: usize) -> u64 {
        self.treatments[t - 1]
    }

    pub fn outcome(&self, t: usize) -> u64 {
        self.outcomes[t - 1]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Solver {
    #[default]
    ClosedForm,
    /// Full-batch gradient descent from zero, 10 epochs at 4e-5.
    GradientDescent,
}

/// c·ln(max(x, 1)).
pub fn substitute(c: f64, count: u64) -> f64 {
    c * (count.max(1) as f64).ln()
}

fn check(series: &[ScalarSeries], m: usize) -> Result<usize> {
    let t_len = series.first().ok_or_else(|| Error::Config("no runs".into()))?.len();
    if series.iter().any(|s| s.len() != t_len) {
        return Err(Error::Shape("runs have different series lengths".into()));
    }
    if m == 0 || m > t_len {
        return Err(Error::Config(format!("duration M = {m} must lie in 1..={t_len}")));
    }
    Ok(t_len)
}

/// Weighted least squares where column 0 of `x` is the intercept. Falls back
/// to ridge on the slopes when the centred design is rank-deficient.
pub fn weighted_least_squares(x: &DMatrix<f64>, y: &DVector<f64>, w: &DVector<f64>) -> Result<DVector<f64>> {
    Ok(solve(x, y, w)?.0)
}

/// Coefficients and whether the ridge fallback was used.
fn solve(x: &DMatrix<f64>, y: &DVector<f64>, w: &DVector<f64>) -> Result<(DVector<f64>, bool)> {
    let (n, p) = x.shape();
    if y.len() != n || w.len() != n || p == 0 {
        return Err(Error::Shape(format!("design {n}x{p}, targets {}, weights {}", y.len(), w.len())));
    }
    if w.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(Error::NonFinite("regression weights must be finite and nonnegative".into()));
    }
    let sw: f64 = w.sum();
    if !(sw > 0.0) {
        return Err(Error::Domain("regression weights sum to zero".into()));
    }
    let xbar: Vec<f64> = (1..p).map(|k| x.column(k).dot(w) / sw).collect();
    let ybar = y.dot(w) / sw;
    let mut beta = DVector::zeros(p);
    let mut ridge = false;
    if p > 1 {
        let xs = DMatrix::from_fn(n, p - 1, |i, k| (x[(i, k + 1)] - xbar[k]) * w[i].sqrt());
        let ys = DVector::from_fn(n, |i, _| (y[i] - ybar) * w[i].sqrt());
        let svd = xs.svd(true, true);
        let smax = svd.singular_values.max();
        let tol = smax * (n.max(p) as f64) * f64::EPSILON;
        let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
        ridge = rank < p - 1;
        let alpha = if ridge {
            RIDGE * smax * smax
        } else {
            0.0
        };
        let (u, v_t) = (svd.u.as_ref().expect("u"), svd.v_t.as_ref().expect("v_t"));
        let mut coef = u.transpose() * ys;
        for (k, val) in coef.iter_mut().enumerate() {
            let s = svd.singular_values[k];
            *val = if s > tol { *val * s / (s * s + alpha) } else { 0.0 };
        }
        let slopes = v_t.transpose() * coef;
        beta.rows_mut(1, p - 1).copy_from(&slopes);
    }
    beta[0] = ybar - (1..p).map(|k| xbar[k - 1] * beta[k]).sum::<f64>();
    Ok((beta, ridge))
}

fn gradient_descent(x: &DMatrix<f64>, y: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
    let n = x.nrows() as f64;
    let mut beta = DVector::zeros(x.ncols());
    for _ in 0..GD_EPOCHS {
        let resid = (x * &beta - y).component_mul(w);
        let grad = x.transpose() * resid * (2.0 / n);
        beta -= grad * GD_LEARNING_RATE;
    }
    beta
}

/// Fits, for each t = M..=T, a regression across runs of R(Y_t) on the
/// treatment counts in `regressors(t)`, then predicts with c·ln R(z_j)
/// substituted. Returns the per-run average of predictions over t.
fn regression_estimate(
    series: &[ScalarSeries],
    m: usize,
    weights: impl Fn(usize, usize) -> f64,
    regressors: impl Fn(usize) -> std::ops::RangeInclusive<usize>,
    transform: impl Fn(u64) -> f64,
    solver: Solver,
) -> Result<Vec<f64>> {
    let t_len = check(series, m)?;
    let n = series.len();
    let mut totals = vec![0.0; n];
    let mut deficient = Vec::new();
    for t in m..=t_len {
        let cols: Vec<usize> = regressors(t).collect();
        let p = cols.len() + 1;
        let x = DMatrix::from_fn(n, p, |i, k| if k == 0 { 1.0 } else { series[i].treatment(cols[k - 1]) as f64 });
        let y = DVector::from_fn(n, |i, _| series[i].outcome(t) as f64);
        let w = DVector::from_fn(n, |i, _| weights(i, t));
        let beta = match solver {
            Solver::ClosedForm => {
                let (beta, ridge) = solve(&x, &y, &w)?;
                if ridge {
                    deficient.push(t);
                }
                beta
            }
            Solver::GradientDescent => gradient_descent(&x, &y, &w),
        };
        for (i, total) in totals.iter_mut().enumerate() {
            let pred = beta[0]
                + cols.iter().enumerate().map(|(k, &j)| beta[k + 1] * transform(series[i].treatment(j))).sum::<f64>();
            *total += pred;
        }
    }
    if !deficient.is_empty() {
        log::warn!(
            "{} of {} regressions are rank-deficient with {n} runs (t = {}..={}); used ridge fallback",
            deficient.len(),
            t_len - m + 1,
            deficient[0],
            deficient[deficient.len() - 1]
        );
    }
    let count = (t_len - m + 1) as f64;
    Ok(totals.into_iter().map(|s| s / count).collect())
}

/// Per-run LR estimates of the intervention mean, regressing on every
/// treatment count up to t.
pub fn lr_estimate(series: &[ScalarSeries], m: usize, c: f64, solver: Solver) -> Result<Vec<f64>> {
    regression_estimate(series, m, |_, _| 1.0, |t| 1..=t, |k| substitute(c, k), solver)
}

/// In-sample fit with an arbitrary regressor transform; with the identity it
/// reproduces the fitted values.
pub fn lr_estimate_with(
    series: &[ScalarSeries],
    m: usize,
    transform: impl Fn(u64) -> f64,
    solver: Solver,
) -> Result<Vec<f64>> {
    regression_estimate(series, m, |_, _| 1.0, |t| 1..=t, transform, solver)
}

/// Poisson GLM with log link fitted by IRLS.
pub fn poisson_glm(x: &DMatrix<f64>, y: &[u64]) -> Result<DVector<f64>> {
    let n = x.nrows();
    if y.len() != n {
        return Err(Error::Shape(format!("design has {n} rows, {} targets", y.len())));
    }
    let mean = y.iter().sum::<u64>() as f64 / n as f64;
    let mut beta = DVector::zeros(x.ncols());
    beta[0] = mean.max(1e-3).ln();
    let mut prev = f64::INFINITY;
    for _ in 0..100 {
        let eta = x * &beta;
        let mu = eta.map(|e| e.clamp(-30.0, 30.0).exp());
        let z = DVector::from_fn(n, |i, _| eta[i] + (y[i] as f64 - mu[i]) / mu[i]);
        beta = weighted_least_squares(x, &z, &mu)?;
        let dev: f64 = (0..n)
            .map(|i| {
                let yi = y[i] as f64;
                let m = (x.row(i) * &beta)[0].clamp(-30.0, 30.0).exp();
                2.0 * (if yi > 0.0 { yi * (yi / m).ln() } else { 0.0 } - (yi - m))
            })
            .sum();
        if !dev.is_finite() {
            return Err(Error::Training("Poisson GLM deviance is not finite".into()));
        }
        if (prev - dev).abs() <= 1e-10 * (1.0 + dev.abs()) {
            break;
        }
        prev = dev;
    }
    Ok(beta)
}

/// Stabilized weights w[run][t-1] = Π_{j in window(t)} Pois(z_j; z̄_j) / Pois(z_j; λ̂_j).
///
/// λ̂_j comes from a pooled Poisson GLM of R(z_j) on
/// [1, ln max(R(y_{j-1}),1), ln max(R(z_{j-1}),1)]; z̄_j is the across-run mean.
pub fn msm_weights(series: &[ScalarSeries], m: usize) -> Result<Vec<Vec<f64>>> {
    let t_len = check(series, m)?;
    let n = series.len();
    let feature = |s: &ScalarSeries, j: usize, k: usize| -> f64 {
        match k {
            0 => 1.0,
            1 if j > 1 => (s.outcome(j - 1).max(1) as f64).ln(),
            2 if j > 1 => (s.treatment(j - 1).max(1) as f64).ln(),
            _ => 0.0,
        }
    };
    let rows = n * t_len;
    let x = DMatrix::from_fn(rows, 3, |r, k| feature(&series[r / t_len], r % t_len + 1, k));
    let y: Vec<u64> = (0..rows).map(|r| series[r / t_len].treatment(r % t_len + 1)).collect();
    let beta = poisson_glm(&x, &y)?;
    let marginal: Vec<f64> = (1..=t_len)
        .map(|j| (series.iter().map(|s| s.treatment(j)).sum::<u64>() as f64 / n as f64).max(1e-6))
        .collect();
    let mut out = vec![vec![1.0; t_len]; n];
    for (i, s) in series.iter().enumerate() {
        let log_ratio: Vec<f64> = (1..=t_len)
            .map(|j| {
                let eta: f64 = (0..3).map(|k| beta[k] * feature(s, j, k)).sum();
                let lam = eta.clamp(-30.0, 30.0).exp();
                Ok(poisson_log_pmf(s.treatment(j), marginal[j - 1])? - poisson_log_pmf(s.treatment(j), lam)?)
            })
            .collect::<Result<_>>()?;
        for t in m..=t_len {
            let lw: f64 = log_ratio[t - m..t].iter().sum();
            out[i][t - 1] = lw.exp().clamp(crate::estimator::CLIP_LOW, crate::estimator::CLIP_HIGH);
        }
    }
    Ok(out)
}

/// Weighted least squares of R(Y_t) on the window R(z_{t-M+1..t}) with
/// `weights[run][t-1]`, then c·ln substitution.
pub fn msm_estimate_with_weights(
    series: &[ScalarSeries],
    weights: &[Vec<f64>],
    m: usize,
    c: f64,
    solver: Solver,
) -> Result<Vec<f64>> {
    let t_len = check(series, m)?;
    if weights.len() != series.len() || weights.iter().any(|w| w.len() != t_len) {
        return Err(Error::Shape("MSM weights must be runs x T".into()));
    }
    regression_estimate(series, m, |i, t| weights[i][t - 1], |t| t + 1 - m..=t, |k| substitute(c, k), solver)
}

pub fn msm_estimate(series: &[ScalarSeries], m: usize, c: f64, solver: Solver) -> Result<Vec<f64>> {
    let w = msm_weights(series, m)?;
    msm_estimate_with_weights(series, &w, m, c, solver)
}
