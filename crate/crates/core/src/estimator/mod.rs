//! Inverse probability weighted estimators of the expected outcome count in
//! ω under a stochastic treatment intervention.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::intensity::{fit_intensity, kernel_intensity, FittedIntensity, IntensityConfig, IntensityModel};
use crate::point_process::{poisson_log_pmf, SubRegion};
use crate::propensity::{fit_propensity, reduce, CounterfactualProb, PropensityConfig, PropensityModel};
use crate::rng::{derive_seed, derived_stream, label};
use crate::synthetic::{Dataset, InterventionSpec};

pub const CLIP_LOW: f64 = 1e-3;
pub const CLIP_HIGH: f64 = 1e3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorConfig {
    pub clip: bool,
    pub clip_low: f64,
    pub clip_high: f64,
    /// Monte Carlo draws per step for λ₂.
    pub counterfactual_samples: usize,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self { clip: true, clip_low: CLIP_LOW, clip_high: CLIP_HIGH, counterfactual_samples: 10_000 }
    }
}

impl EstimatorConfig {
    fn bounds(&self) -> Option<(f64, f64)> {
        self.clip.then_some((self.clip_low, self.clip_high))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClipEvent {
    pub j: usize,
    pub original: f64,
    pub clipped: f64,
}

/// Per-step ratios p_{h_j}(z_j) / e_j(z_j) over the window and their product.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeightTrace {
    pub t: usize,
    pub ratios: Vec<f64>,
    pub product: f64,
    pub clips: Vec<ClipEvent>,
}

/// Multiplies ratios `p / e`, clipping each to `bounds` when given.
/// Ratios are formed from log-probabilities, so equal inputs give exactly 1.
pub fn combine_ratios(t: usize, first_j: usize, log_pairs: &[(f64, f64)], bounds: Option<(f64, f64)>) -> Result<WeightTrace> {
    let mut ratios = Vec::with_capacity(log_pairs.len());
    let mut clips = Vec::new();
    for (k, &(log_p, log_e)) in log_pairs.iter().enumerate() {
        if !log_e.is_finite() {
            return Err(Error::Contract(format!("propensity score at step {} is zero", first_j + k)));
        }
        let mut r = (log_p - log_e).exp();
        if let Some((lo, hi)) = bounds {
            let c = r.clamp(lo, hi);
            if c != r {
                log::debug!("clipping weight ratio at t={t}, j={}: {r:e} -> {c:e}", first_j + k);
                clips.push(ClipEvent { j: first_j + k, original: r, clipped: c });
                r = c;
            }
        }
        if !(r > 0.0) || !r.is_finite() {
            return Err(Error::NonFinite(format!("weight ratio at step {} is {r}", first_j + k)));
        }
        ratios.push(r);
    }
    let product = ratios.iter().product::<f64>();
    if !(product > 0.0) || !product.is_finite() {
        return Err(Error::NonFinite(format!("weight product at t={t} is {product}")));
    }
    Ok(WeightTrace { t, ratios, product, clips })
}

/// Convenience form on probabilities rather than log-probabilities.
pub fn weight_from_probabilities(pairs: &[(f64, f64)], bounds: Option<(f64, f64)>) -> Result<f64> {
    let logs: Vec<(f64, f64)> = pairs.iter().map(|&(p, e)| (p.ln(), e.ln())).collect();
    Ok(combine_ratios(0, 1, &logs, bounds)?.product)
}

/// Π_{j=t-M+1}^{t} Pois(R(z_j); λ₂_j) / Pois(R(z_j); λ₁_j).
///
/// `lambda1[j-1]` is the fitted propensity rate and `counterfactual[j-1]` the
/// intervention rate for step j.
pub fn ipw_weight(
    dataset: &Dataset,
    spec: &InterventionSpec,
    t: usize,
    lambda1: &[f64],
    counterfactual: &[CounterfactualProb],
    bounds: Option<(f64, f64)>,
) -> Result<WeightTrace> {
    let window = spec.window(t)?;
    let first = *window.start();
    let mut pairs = Vec::with_capacity(spec.duration());
    for j in window {
        let k = reduce(dataset.treatment(j)).value();
        let l1 = *lambda1.get(j - 1).ok_or_else(|| Error::State(format!("no propensity rate for step {j}")))?;
        if !(l1 > 0.0) {
            return Err(Error::Contract(format!("propensity rate {l1} at step {j} is not positive")));
        }
        let l2 = counterfactual.get(j - 1).ok_or_else(|| Error::State(format!("no λ₂ for step {j}")))?.lambda2;
        pairs.push((poisson_log_pmf(k, l2)?, poisson_log_pmf(k, l1)?));
    }
    combine_ratios(t, first, &pairs, bounds)
}

/// λ₂ for every step of the series, each from its own seeded stream.
pub fn counterfactual_rates(spec: &InterventionSpec, n_samples: usize, seed: u64) -> Result<Vec<CounterfactualProb>> {
    (1..=spec.series_length())
        .map(|j| {
            let mut rng = derived_stream(seed, &[label("lambda2"), j as u64]);
            CounterfactualProb::estimate(spec.field(j), n_samples, &mut rng)
        })
        .collect()
}

/// Fitted nuisance models for one dataset: λ₁ per step and one outcome
/// intensity per step. Neither depends on the intervention.
#[derive(Debug, Clone)]
pub struct FittedModels {
    pub lambda1: Vec<f64>,
    pub outcome: Vec<Option<FittedIntensity>>,
    pub propensity: Option<PropensityModel>,
}

impl FittedModels {
    pub fn fit(
        dataset: &Dataset,
        propensity: &PropensityConfig,
        intensity: &IntensityConfig,
        seed: u64,
    ) -> Result<Self> {
        let pcfg = PropensityConfig { seed: derive_seed(seed, &[label("propensity")]), ..propensity.clone() };
        let model = fit_propensity(&[dataset], &pcfg)?;
        let lambda1 = model.predict_all(dataset)?;
        let outcome = (1..=dataset.len())
            .map(|t| {
                let s = derive_seed(seed, &[label("intensity"), t as u64]);
                fit_intensity(dataset.outcome(t), &dataset.region, intensity, s).map(Some)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { lambda1, outcome, propensity: Some(model) })
    }

    /// Writes `lambda1.json`, `propensity/` and one `intensity/tNNNN`
    /// entry per step (a neural checkpoint directory, or a kernel bandwidth file).
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("intensity"))?;
        fs::write(dir.join("lambda1.json"), serde_json::to_string(&self.lambda1)?)?;
        if let Some(p) = &self.propensity {
            p.save(&dir.join("propensity"))?;
        }
        for (i, f) in self.outcome.iter().enumerate() {
            let stem = dir.join("intensity").join(format!("t{:04}", i + 1));
            match f {
                Some(FittedIntensity::Neural(m)) => m.save(&stem)?,
                Some(FittedIntensity::Kernel(k)) => {
                    fs::write(stem.with_extension("kernel.json"), serde_json::to_string(&k.bandwidth)?)?
                }
                None => {}
            }
        }
        Ok(())
    }

    /// Kernel estimates are recomputed from the dataset's outcome patterns.
    pub fn load(dir: &Path, dataset: &Dataset) -> Result<Self> {
        let lambda1: Vec<f64> = serde_json::from_str(&fs::read_to_string(dir.join("lambda1.json"))?)?;
        if lambda1.len() != dataset.len() {
            return Err(Error::Shape(format!("{} propensity rates for a series of {}", lambda1.len(), dataset.len())));
        }
        let propensity = if dir.join("propensity").exists() { Some(PropensityModel::load(&dir.join("propensity"))?) } else { None };
        let mut outcome = Vec::with_capacity(dataset.len());
        for t in 1..=dataset.len() {
            let stem = dir.join("intensity").join(format!("t{t:04}"));
            let kernel = stem.with_extension("kernel.json");
            outcome.push(if stem.is_dir() {
                Some(FittedIntensity::Neural(Box::new(IntensityModel::load(&stem)?)))
            } else if kernel.exists() {
                let bw: f64 = serde_json::from_str(&fs::read_to_string(&kernel)?)?;
                Some(FittedIntensity::Kernel(kernel_intensity(dataset.outcome(t).points(), bw, &dataset.region)?))
            } else {
                None
            });
        }
        Ok(Self { lambda1, outcome, propensity })
    }

    /// Integrals ∫_ω λ̂_{Y_t} for t = 1..=T.
    pub fn integrals(&self, omega: &SubRegion) -> Result<Vec<f64>> {
        self.outcome
            .iter()
            .enumerate()
            .map(|(i, f)| {
                f.as_ref()
                    .ok_or_else(|| Error::State(format!("no fitted outcome intensity for t = {}", i + 1)))?
                    .integral(omega)
            })
            .collect()
    }
}


#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepEstimate {
    pub t: usize,
    pub weight: f64,
    pub integral: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Diagnostics {
    /// (Σw)² / Σw² over the per-step weights.
    pub effective_sample_size: f64,
    pub clip_count: usize,
    /// Sample variance of the per-step weighted counts.
    pub weighted_count_variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Estimate {
    pub per_t: Vec<StepEstimate>,
    pub traces: Vec<WeightTrace>,
    pub value: f64,
    pub seed: u64,
    pub diagnostics: Diagnostics,
}

/// N̂_t = weight × ∫_ω λ̂_{Y_t}.
pub fn estimate_t(trace: &WeightTrace, integral: f64) -> Result<StepEstimate> {
    if !(integral >= 0.0) {
        return Err(Error::Contract(format!("intensity integral {integral} is negative")));
    }
    Ok(StepEstimate { t: trace.t, weight: trace.product, integral, value: trace.product * integral })
}

/// Averages the per-step estimates over t = M..=T.
pub fn estimate(
    dataset: &Dataset,
    spec: &InterventionSpec,
    integrals: &[f64],
    lambda1: &[f64],
    counterfactual: &[CounterfactualProb],
    config: &EstimatorConfig,
    seed: u64,
) -> Result<Estimate> {
    if spec.series_length() != dataset.len() || integrals.len() != dataset.len() {
        return Err(Error::Shape(format!(
            "series length {}, intervention {}, integrals {}",
            dataset.len(),
            spec.series_length(),
            integrals.len()
        )));
    }
    let mut per_t = Vec::new();
    let mut traces = Vec::new();
    for t in spec.targets() {
        let trace = ipw_weight(dataset, spec, t, lambda1, counterfactual, config.bounds())?;
        per_t.push(estimate_t(&trace, integrals[t - 1])?);
        traces.push(trace);
    }
    Ok(summarize(per_t, traces, seed))
}

fn summarize(per_t: Vec<StepEstimate>, traces: Vec<WeightTrace>, seed: u64) -> Estimate {
    let n = per_t.len() as f64;
    let value = per_t.iter().map(|s| s.value).sum::<f64>() / n;
    let sw: f64 = per_t.iter().map(|s| s.weight).sum();
    let sw2: f64 = per_t.iter().map(|s| s.weight * s.weight).sum();
    let var = if per_t.len() > 1 {
        per_t.iter().map(|s| (s.value - value).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    let diagnostics = Diagnostics {
        effective_sample_size: if sw2 > 0.0 { sw * sw / sw2 } else { 0.0 },
        clip_count: traces.iter().map(|t| t.clips.len()).sum(),
        weighted_count_variance: var,
    };
    Estimate { per_t, traces, value, seed, diagnostics }
}

impl Estimate {
    /// Per-step rows `t,weight,integral,estimate` followed by a summary comment line.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["t", "weight", "integral", "estimate"])?;
        for s in &self.per_t {
            out.write_record([s.t.to_string(), s.weight.to_string(), s.integral.to_string(), s.value.to_string()])?;
        }
        out.flush()?;
        let mut w = out.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        writeln!(
            w,
            "# estimate={} ess={} clips={} weighted_count_variance={}",
            self.value,
            self.diagnostics.effective_sample_size,
            self.diagnostics.clip_count,
            self.diagnostics.weighted_count_variance
        )?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::point_process::{IntensityField, Region};
    use crate::synthetic::{default_roads, simulate_series, GenParams};

    #[test]
    fn ratio_examples() {
        assert_eq!(weight_from_probabilities(&[(0.3, 0.3), (0.1, 0.1)], None).unwrap(), 1.0);
        assert!((weight_from_probabilities(&[(0.2, 0.4)], None).unwrap() - 0.5).abs() < 1e-15);
        let w = weight_from_probabilities(&[(0.4, 0.2), (0.1, 0.2), (0.3, 0.3)], None).unwrap();
        assert!((w - 1.0).abs() < 1e-15);
    }

    #[test]
    fn clipping_is_logged_and_inactive_inside_bounds() {
        let logs = [(0.0, (1e-5f64).ln()), (0.5f64.ln(), 0.25f64.ln())];
        let t = combine_ratios(3, 3, &logs, Some((CLIP_LOW, CLIP_HIGH))).unwrap();
        assert_eq!(t.clips.len(), 1);
        assert_eq!(t.clips[0].clipped, CLIP_HIGH);
        assert!((t.product - 2e3).abs() < 1e-9);
        let inside = [(0.5f64.ln(), 0.25f64.ln())];
        let a = combine_ratios(1, 1, &inside, Some((CLIP_LOW, CLIP_HIGH))).unwrap();
        let b = combine_ratios(1, 1, &inside, None).unwrap();
        assert_eq!(a.product, b.product);
        assert!(matches!(combine_ratios(1, 1, &[(0.0, f64::NEG_INFINITY)], None), Err(Error::Contract(_))));
    }

    #[test]
    fn estimate_t_examples() {
        let trace = WeightTrace { t: 1, ratios: vec![1.0], product: 1.0, clips: vec![] };
        assert_eq!(estimate_t(&trace, 5.0).unwrap().value, 5.0);
        let heavy = WeightTrace { t: 1, ratios: vec![40.0], product: 40.0, clips: vec![] };
        assert_eq!(estimate_t(&heavy, 0.0).unwrap().value, 0.0);
    }

    #[test]
    fn degenerate_intervention_gives_unit_weights() {
        let r = Region::unit_square(20);
        let d = simulate_series(&r, &default_roads(), &GenParams::default(), 8, 6).unwrap();
        let lambda1: Vec<f64> = (1..=8).map(|t| 10.0 + t as f64).collect();
        let cps: Vec<_> = lambda1.iter().map(|&l| CounterfactualProb::from_lambda(l).unwrap()).collect();
        let fields = vec![IntensityField::constant(r, 1.0).unwrap(); 8];
        let integrals: Vec<f64> = (1..=8).map(|t| 3.0 * t as f64).collect();
        for m in [1, 3, 8] {
            let spec = InterventionSpec::new(m, 1.0, fields.clone()).unwrap();
            let est = estimate(&d, &spec, &integrals, &lambda1, &cps, &EstimatorConfig::default(), 0).unwrap();
            assert!(est.per_t.iter().all(|s| s.weight == 1.0));
            let plain = integrals[m - 1..].iter().sum::<f64>() / (8 - m + 1) as f64;
            assert!((est.value - plain).abs() < 1e-12);
            assert_eq!(est.per_t.len(), 8 - m + 1);
        }
    }

    #[test]
    fn per_run_csv() {
        let per_t = vec![
            StepEstimate { t: 1, weight: 1.0, integral: 2.0, value: 2.0 },
            StepEstimate { t: 2, weight: 0.5, integral: 4.0, value: 2.0 },
        ];
        let est = summarize(per_t, vec![], 9);
        assert_eq!(est.value, 2.0);
        assert_eq!(est.diagnostics.weighted_count_variance, 0.0);
        assert!((est.diagnostics.effective_sample_size - 2.25 / 1.25).abs() < 1e-12);
        let mut buf = Vec::new();
        est.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("t,weight,integral,estimate\n1,1,2,2\n"));
        assert!(text.contains("# estimate=2"));
    }
}
