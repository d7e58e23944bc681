use std::fmt;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Mode};
use crate::baselines::{lr_estimate, msm_estimate, ScalarSeries};
use crate::error::{Error, Result};
use crate::estimator::{counterfactual_rates, estimate, Estimate, FittedModels};
use crate::intensity::kernel_intensity;
use crate::point_process::{IntensityField, Region, SubRegion};
use crate::rng::{derive_seed, label};
use crate::synthetic::{default_roads, ground_truth, simulate_series, Dataset, GroundTruth, InterventionSpec, KernelMode};

/// |estimated − truth| / |truth|.
pub fn rer(estimated: f64, truth: f64) -> Result<f64> {
    if truth == 0.0 || !truth.is_finite() {
        return Err(Error::Metric(format!("relative error is undefined for truth {truth}")));
    }
    Ok((estimated - truth).abs() / truth.abs())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Ipw,
    Lr,
    Msm,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Ipw, Method::Lr, Method::Msm];
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Ipw => "ipw",
            Method::Lr => "lr",
            Method::Msm => "msm",
        })
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ipw" => Ok(Method::Ipw),
            "lr" => Ok(Method::Lr),
            "msm" => Ok(Method::Msm),
            _ => Err(Error::Config(format!("unknown method `{s}`"))),
        }
    }
}

/// Aggregate over runs for one (T, M, c, method) setting.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub t_len: usize,
    pub m: usize,
    pub c: f64,
    pub kernel_mode: KernelMode,
    pub method: Method,
    pub n_runs: usize,
    pub mean: f64,
    pub std: f64,
    pub mean_rer: Option<f64>,
    pub std_rer: Option<f64>,
    /// Shared fitting time for T plus the setting's own estimation time.
    pub wall_time_s: f64,
}

/// One method's estimate on one run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunRecord {
    pub t_len: usize,
    pub run: usize,
    pub m: usize,
    pub c: f64,
    pub method: Method,
    pub estimate: f64,
    pub truth: Option<f64>,
    pub rer: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Failure {
    pub stage: String,
    pub t_len: usize,
    pub run: Option<usize>,
    pub m: Option<usize>,
    pub c: Option<f64>,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Timing {
    pub stage: String,
    pub t_len: usize,
    pub run: Option<usize>,
    pub c: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct RunTrace {
    pub t_len: usize,
    pub run: usize,
    pub m: usize,
    pub c: f64,
    pub estimate: Estimate,
    pub truth: Option<GroundTruth>,
}

#[derive(Debug, Clone)]
pub struct GridOutput {
    pub config: ExperimentConfig,
    pub rows: Vec<ResultRow>,
    pub records: Vec<RunRecord>,
    pub traces: Vec<RunTrace>,
    pub failures: Vec<Failure>,
    pub timings: Vec<Timing>,
}

/// Stable per-stage seeds: master → (T, kernel mode, run, stage, ...).
pub struct Seeds<'a> {
    pub config: &'a ExperimentConfig,
}

impl Seeds<'_> {
    fn base(&self, stage: &str, t_len: usize, run: usize) -> Vec<u64> {
        let mode = self.config.generator.kernel_mode.to_string();
        vec![label(stage), t_len as u64, label(&mode), run as u64]
    }

    pub fn dataset(&self, t_len: usize, run: usize) -> u64 {
        derive_seed(self.config.seed, &self.base("dataset", t_len, run))
    }

    pub fn fit(&self, t_len: usize, run: usize) -> u64 {
        derive_seed(self.config.seed, &self.base("fit", t_len, run))
    }

    pub fn lambda2(&self, t_len: usize, run: usize, c: f64) -> u64 {
        let mut k = self.base("lambda2", t_len, run);
        k.push(c.to_bits());
        derive_seed(self.config.seed, &k)
    }

    pub fn truth(&self, t_len: usize, run: usize, m: usize, c: f64) -> u64 {
        let mut k = self.base("truth", t_len, run);
        k.extend([m as u64, c.to_bits()]);
        derive_seed(self.config.seed, &k)
    }
}

/// Intensities whose intervened versions define the treatment policy: the
/// generating λ_Z for synthetic data, a kernel estimate of each treatment
/// pattern otherwise.
pub fn policy_fields(dataset: &Dataset, bandwidth_fraction: f64) -> Result<Vec<IntensityField>> {
    (1..=dataset.len())
        .map(|t| match dataset.gen_params() {
            Some(_) => dataset.treatment_field(t),
            None => Ok(kernel_intensity(
                dataset.treatment(t).points(),
                bandwidth_fraction * dataset.region.width(),
                &dataset.region,
            )?
            .field),
        })
        .collect()
}

struct Prepared {
    run: usize,
    dataset: Dataset,
    series: ScalarSeries,
    lambda1: Vec<f64>,
    integrals: Vec<f64>,
    policy: Vec<IntensityField>,
    seconds: f64,
}

struct SettingResult {
    m: usize,
    estimate: Estimate,
    truth: Option<GroundTruth>,
}

fn prepare(cfg: &ExperimentConfig, t_len: usize, run: usize, observed: Option<&Dataset>) -> Result<Prepared> {
    let start = Instant::now();
    let seeds = Seeds { config: cfg };
    let dataset = match observed {
        Some(d) => d.clone(),
        None => simulate_series(
            &Region::unit_square(cfg.resolution),
            &default_roads(),
            &cfg.generator,
            t_len,
            seeds.dataset(t_len, run),
        )?,
    };
    let omega = cfg.omega(&dataset.region)?;
    let models = FittedModels::fit(&dataset, &cfg.propensity, &cfg.intensity, seeds.fit(t_len, run))?;
    let integrals = models.integrals(&omega)?;
    let policy = policy_fields(&dataset, cfg.intensity.bandwidth_fraction)?;
    Ok(Prepared {
        run,
        series: ScalarSeries::from_dataset(&dataset),
        dataset,
        lambda1: models.lambda1,
        integrals,
        policy,
        seconds: start.elapsed().as_secs_f64(),
    })
}

type SettingOutcome = std::result::Result<SettingResult, (usize, Error)>;

fn run_magnitude(
    cfg: &ExperimentConfig,
    p: &Prepared,
    omega: &SubRegion,
    c: f64,
) -> (Vec<SettingOutcome>, f64) {
    let start = Instant::now();
    let seeds = Seeds { config: cfg };
    let t_len = p.dataset.len();
    let cps = InterventionSpec::from_treatment_fields(1, c, &p.policy)
        .and_then(|spec| counterfactual_rates(&spec, cfg.estimator.counterfactual_samples, seeds.lambda2(t_len, p.run, c)));
    let out = cfg
        .durations
        .iter()
        .map(|&m| {
            let cps = cps.as_ref().map_err(|e| (m, Error::State(e.to_string())))?;
            let spec = InterventionSpec::from_treatment_fields(m, c, &p.policy).map_err(|e| (m, e))?;
            let est = estimate(&p.dataset, &spec, &p.integrals, &p.lambda1, cps, &cfg.estimator, cfg.seed)
                .map_err(|e| (m, e))?;
            let truth = match cfg.mode {
                Mode::Synthetic => Some(
                    ground_truth(&p.dataset, &spec, omega, cfg.truth_replications, seeds.truth(t_len, p.run, m, c))
                        .map_err(|e| (m, e))?,
                ),
                Mode::Observed => None,
            };
            Ok(SettingResult { m, estimate: est, truth })
        })
        .collect();
    (out, start.elapsed().as_secs_f64())
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let std = if v.len() > 1 { (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
    (mean, std)
}

/// Runs every (T, M, c) setting over `runs` replicates. Models are fitted
/// once per (T, run) and shared across M and c. Stage failures are recorded
/// and the grid continues.
pub fn run_grid(cfg: &ExperimentConfig) -> Result<GridOutput> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    pool.install(|| run_grid_inner(cfg))
}

fn run_grid_inner(cfg: &ExperimentConfig) -> Result<GridOutput> {
    let observed = match cfg.mode {
        Mode::Observed => {
            let dir = cfg.dataset.as_ref().expect("validated");
            Some(Dataset::load(dir)?)
        }
        Mode::Synthetic => None,
    };
    let lengths = match &observed {
        Some(d) => vec![d.len()],
        None => cfg.lengths.clone(),
    };
    if let Some(d) = &observed {
        if let Some(&m) = cfg.durations.iter().find(|&&m| m > d.len()) {
            return Err(Error::Config(format!("duration M = {m} exceeds series length T = {}", d.len())));
        }
    }
    let mut out = GridOutput {
        config: cfg.clone(),
        rows: Vec::new(),
        records: Vec::new(),
        traces: Vec::new(),
        failures: Vec::new(),
        timings: Vec::new(),
    };
    let kernel_mode = cfg.generator.kernel_mode;
    for &t_len in &lengths {
        log::info!("T = {t_len}: fitting {} runs", cfg.runs);
        let prepared: Vec<_> =
            (0..cfg.runs).into_par_iter().map(|run| (run, prepare(cfg, t_len, run, observed.as_ref()))).collect();
        let mut ready = Vec::new();
        for (run, p) in prepared {
            match p {
                Ok(p) => {
                    out.timings.push(Timing { stage: "fit".into(), t_len, run: Some(run), c: None, seconds: p.seconds });
                    ready.push(p);
                }
                Err(e) => out.failures.push(Failure {
                    stage: "prepare".into(),
                    t_len,
                    run: Some(run),
                    m: None,
                    c: None,
                    message: e.to_string(),
                }),
            }
        }
        if ready.is_empty() {
            continue;
        }
        let fit_seconds: f64 = ready.iter().map(|p| p.seconds).sum();
        let omega = cfg.omega(&ready[0].dataset.region)?;
        let jobs: Vec<(usize, f64)> =
            (0..ready.len()).flat_map(|i| cfg.magnitudes.iter().map(move |&c| (i, c))).collect();
        log::info!("T = {t_len}: estimating {} (run, c) jobs", jobs.len());
        let results: Vec<_> =
            jobs.par_iter().map(|&(i, c)| ((i, c), run_magnitude(cfg, &ready[i], &omega, c))).collect();

        let mut setting_seconds: Vec<((usize, f64), f64)> = Vec::new();
        for ((i, c), (settings, secs)) in results {
            let run = ready[i].run;
            out.timings.push(Timing { stage: "estimate".into(), t_len, run: Some(run), c: Some(c), seconds: secs });
            for s in settings {
                match s {
                    Ok(s) => {
                        let truth = s.truth.as_ref().map(|g| g.value);
                        out.records.push(RunRecord {
                            t_len,
                            run,
                            m: s.m,
                            c,
                            method: Method::Ipw,
                            estimate: s.estimate.value,
                            truth,
                            rer: truth.map(|g| rer(s.estimate.value, g)).transpose().ok().flatten(),
                        });
                        out.traces.push(RunTrace { t_len, run, m: s.m, c, estimate: s.estimate, truth: s.truth });
                    }
                    Err((m, e)) => out.failures.push(Failure {
                        stage: "estimate".into(),
                        t_len,
                        run: Some(run),
                        m: Some(m),
                        c: Some(c),
                        message: e.to_string(),
                    }),
                }
            }
            for &m in &cfg.durations {
                let share = secs / cfg.durations.len() as f64;
                match setting_seconds.iter_mut().find(|(k, _)| *k == (m, c)) {
                    Some((_, v)) => *v += share,
                    None => setting_seconds.push(((m, c), share)),
                }
            }
        }

        // Baselines regress across the runs, so they use every prepared run.
        let series: Vec<ScalarSeries> = ready.iter().map(|p| p.series.clone()).collect();
        for &m in &cfg.durations {
            for &c in &cfg.magnitudes {
                for method in [Method::Lr, Method::Msm] {
                    let start = Instant::now();
                    let values = match method {
                        Method::Lr => lr_estimate(&series, m, c, cfg.baseline_solver),
                        _ => msm_estimate(&series, m, c, cfg.baseline_solver),
                    };
                    let secs = start.elapsed().as_secs_f64();
                    out.timings.push(Timing { stage: method.to_string(), t_len, run: None, c: Some(c), seconds: secs });
                    match values {
                        Ok(values) => {
                            for (p, v) in ready.iter().zip(values) {
                                let truth = out
                                    .records
                                    .iter()
                                    .find(|r| r.method == Method::Ipw && r.t_len == t_len && r.run == p.run && r.m == m && r.c == c)
                                    .and_then(|r| r.truth);
                                out.records.push(RunRecord {
                                    t_len,
                                    run: p.run,
                                    m,
                                    c,
                                    method,
                                    estimate: v,
                                    truth,
                                    rer: truth.and_then(|g| rer(v, g).ok()),
                                });
                            }
                        }
                        Err(e) => out.failures.push(Failure {
                            stage: method.to_string(),
                            t_len,
                            run: None,
                            m: Some(m),
                            c: Some(c),
                            message: e.to_string(),
                        }),
                    }
                }
            }
        }

        for &m in &cfg.durations {
            for &c in &cfg.magnitudes {
                let own = setting_seconds.iter().find(|(k, _)| *k == (m, c)).map_or(0.0, |x| x.1);
                for method in Method::ALL {
                    let recs: Vec<&RunRecord> = out
                        .records
                        .iter()
                        .filter(|r| r.t_len == t_len && r.m == m && r.c == c && r.method == method)
                        .collect();
                    if recs.is_empty() {
                        continue;
                    }
                    let (mean, std) = mean_std(&recs.iter().map(|r| r.estimate).collect::<Vec<_>>());
                    let rers: Option<Vec<f64>> = recs.iter().map(|r| r.rer).collect();
                    let (mean_rer, std_rer) = match rers {
                        Some(v) if !v.is_empty() => {
                            let (a, b) = mean_std(&v);
                            (Some(a), Some(b))
                        }
                        _ => (None, None),
                    };
                    out.rows.push(ResultRow {
                        t_len,
                        m,
                        c,
                        kernel_mode,
                        method,
                        n_runs: recs.len(),
                        mean,
                        std,
                        mean_rer,
                        std_rer,
                        wall_time_s: fit_seconds + own,
                    });
                }
            }
        }
    }
    Ok(out)
}
