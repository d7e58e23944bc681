//! Brute-force counterfactual oracle: re-simulate the intervened window of the
//! generating process and count outcome events in ω.

use rand::Rng;
use serde::Serialize;

use super::dataset::{Dataset, OUTCOME_TREATMENT_WINDOW};
use super::generate::LogLinear;
use super::intervention::InterventionSpec;
use super::params::GenParams;
use crate::error::{Error, Result};
use crate::point_process::{
    nearest_point_distances, sample_points, CellEnvelope, IntensityField, Point, Region, SubRegion,
};
use crate::rng::{derived_stream, label};

#[derive(Debug, Clone, Serialize)]
pub struct TruthStep {
    pub t: usize,
    pub mean: f64,
    pub standard_error: f64,
}

/// N_ω(F_H) and its per-step terms N_t^ω(F_H).
#[derive(Debug, Clone, Serialize)]
pub struct GroundTruth {
    pub per_t: Vec<TruthStep>,
    pub value: f64,
    pub standard_error: f64,
    pub replications: usize,
}

/// Monte Carlo ground truth for a synthetic dataset.
///
/// For every target step t in M..=T the treatments of steps t-M+1..=t are
/// redrawn from the intervened intensities; the outcomes of those steps are
/// regenerated from the outcome intensity (steps before the window keep their
/// factual history), and the outcome events of step t falling in ω are counted.
/// Counts are averaged over `replications` per t and then over t.
pub fn ground_truth(
    dataset: &Dataset,
    spec: &InterventionSpec,
    omega: &SubRegion,
    replications: usize,
    seed: u64,
) -> Result<GroundTruth> {
    let params = dataset
        .gen_params()
        .ok_or_else(|| Error::State("ground truth needs a synthetic dataset".into()))?;
    omega.check_region(&dataset.region)?;
    if replications == 0 {
        return Err(Error::Config("ground truth needs at least one replication".into()));
    }
    if spec.series_length() != dataset.len() {
        return Err(Error::Shape(format!(
            "intervention covers {} steps, dataset has {}",
            spec.series_length(),
            dataset.len()
        )));
    }
    let ctx = Context::new(dataset, params);
    let mut per_t = Vec::new();
    for t in spec.targets() {
        let window = ctx.prepare(spec, t, omega)?;
        let mut rng = derived_stream(seed, &[label("ground-truth"), t as u64]);
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..replications {
            let n = window.replicate(&ctx, spec, &mut rng)? as f64;
            sum += n;
            sum_sq += n * n;
        }
        let r = replications as f64;
        let mean = sum / r;
        let var = if replications > 1 { ((sum_sq - r * mean * mean) / (r - 1.0)).max(0.0) } else { 0.0 };
        per_t.push(TruthStep { t, mean, standard_error: (var / r).sqrt() });
    }
    let k = per_t.len() as f64;
    let value = per_t.iter().map(|s| s.mean).sum::<f64>() / k;
    let standard_error = per_t.iter().map(|s| s.standard_error.powi(2)).sum::<f64>().sqrt() / k;
    Ok(GroundTruth { per_t, value, standard_error, replications })
}

struct Context<'a> {
    dataset: &'a Dataset,
    params: &'a GenParams,
    coef: LogLinear,
    base: Vec<f64>,
}

/// Per-target precomputation: factual proximity grids and thinning envelopes.
struct Window {
    first: usize,
    target: usize,
    /// Factual treatment proximity per step j in the window.
    fixed_z: Vec<Vec<f64>>,
    /// Outcome proximity to the factual Y_{first-1}.
    fixed_y: Vec<f64>,
    samplers: Vec<CellEnvelope>,
}

impl<'a> Context<'a> {
    fn new(dataset: &'a Dataset, params: &'a GenParams) -> Self {
        let coef = LogLinear::outcome(params);
        let base = coef.base(&dataset.covariates);
        Self { dataset, params, coef, base }
    }

    fn region(&self) -> &Region {
        &self.dataset.region
    }

    fn proximity_grid(&self, pts: &[Point]) -> Vec<f64> {
        nearest_point_distances(self.region(), pts).into_iter().map(|d| self.params.proximity(d)).collect()
    }

    fn prepare(&self, spec: &InterventionSpec, t: usize, omega: &SubRegion) -> Result<Window> {
        let first = *spec.window(t)?.start();
        let region = *self.region();
        let fixed_y = if first >= 2 {
            self.proximity_grid(self.dataset.outcome(first - 1).points())
        } else {
            self.proximity_grid(&[])
        };
        let (gz, gy) = (self.coef.treatment, self.coef.outcome);
        let mut fixed_z = Vec::new();
        let mut samplers = Vec::new();
        for j in first..=t {
            let start = j.saturating_sub(OUTCOME_TREATMENT_WINDOW - 1).max(1);
            let factual: Vec<Point> =
                (start..first).flat_map(|k| self.dataset.treatment(k).points().iter().copied()).collect();
            let pz = self.proximity_grid(&factual);
            let env: Vec<f64> = (0..region.n_cells())
                .map(|c| {
                    let z_bound = if gz >= 0.0 { gz } else { gz * pz[c] };
                    let y_bound = if j == first { gy * fixed_y[c] } else { gy.max(0.0) };
                    (self.base[c] + z_bound + y_bound).exp()
                })
                .collect();
            let env = IntensityField::new(region, env)?;
            let domain = if j == t { omega.clone() } else { SubRegion::full(&region) };
            samplers.push(CellEnvelope::new(&env, &domain)?);
            fixed_z.push(pz);
        }
        Ok(Window { first, target: t, fixed_z, fixed_y, samplers })
    }
}

impl Window {
    fn replicate<R: Rng + ?Sized>(&self, ctx: &Context<'_>, spec: &InterventionSpec, rng: &mut R) -> Result<usize> {
        let region = ctx.region();
        let cf_treatments: Vec<Vec<Point>> =
            (self.first..=self.target).map(|j| sample_points(spec.field(j), rng)).collect();
        let mut prev_outcome: Option<Vec<Point>> = None;
        let (gz, gy) = (ctx.coef.treatment, ctx.coef.outcome);
        for (k, j) in (self.first..=self.target).enumerate() {
            let lo = j.saturating_sub(OUTCOME_TREATMENT_WINDOW - 1).max(self.first) - self.first;
            let cf: Vec<Point> = cf_treatments[lo..=k].iter().flatten().copied().collect();
            let pz = &self.fixed_z[k];
            let intensity = |cell: usize, _: &Point| {
                let center = region.cell_center(cell);
                let mut z = pz[cell];
                if let Some(d2) = cf.iter().map(|q| center.dist2(q)).reduce(f64::min) {
                    z = z.max(ctx.params.proximity(d2.sqrt()));
                }
                let y = match &prev_outcome {
                    None => self.fixed_y[cell],
                    Some(pts) => {
                        ctx.params.proximity(crate::point_process::nearest_point_distance(&center, pts, region))
                    }
                };
                (ctx.base[cell] + gz * z + gy * y).exp()
            };
            let pts = self.samplers[k].thin(rng, intensity)?;
            if j == self.target {
                return Ok(pts.len());
            }
            prev_outcome = Some(pts);
        }
        unreachable!("window always ends at the target step")
    }
}
