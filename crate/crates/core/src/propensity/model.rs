use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::counts::{count_probability, reduce, ReducedCount};
use crate::diff::{make_optimizer, Conv2d, Dense, Graph, NodeId, OptimizerKind, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::point_process::Region;
use crate::rng::derived_stream;
use crate::synthetic::Dataset;

/// Per history step: binarized treatments, binarized outcomes, X1..X4.
pub const CHANNELS_PER_STEP: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PropensityConfig {
    /// History window L.
    pub window: usize,
    /// Side of the pooled grid fed to the network.
    pub pool: usize,
    pub conv_channels: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl Default for PropensityConfig {
    fn default() -> Self {
        Self {
            window: 3,
            pool: 10,
            conv_channels: 8,
            hidden: 8,
            epochs: 200,
            learning_rate: 1e-3,
            batch_size: 64,
            optimizer: OptimizerKind::Sgd,
            seed: 0,
        }
    }
}

impl PropensityConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.pool == 0 || self.conv_channels == 0 || self.hidden == 0 {
            return Err(Error::Config("propensity window, pool and widths must be positive".into()));
        }
        if self.batch_size == 0 || !(self.learning_rate >= 0.0) {
            return Err(Error::Config("propensity batch size must be positive and learning rate nonnegative".into()));
        }
        Ok(())
    }
}

/// Block-averages a grid onto `pool × pool` cells.
fn pool_grid(values: &[f64], region: &Region, pool: usize) -> Vec<f64> {
    let mut sums = vec![0.0; pool * pool];
    let mut counts = vec![0usize; pool * pool];
    for j in 0..region.ny {
        let pj = j * pool / region.ny;
        for i in 0..region.nx {
            let pi = i * pool / region.nx;
            sums[pj * pool + pi] += values[j * region.nx + i];
            counts[pj * pool + pi] += 1;
        }
    }
    sums.iter().zip(&counts).map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 }).collect()
}

/// Raw history tensor for predicting Z_t: steps t-L..t-1, missing steps
/// (before the series start) as empty patterns. Layout `[channels, pool, pool]`.
pub fn history_features(dataset: &Dataset, t: usize, window: usize, pool: usize) -> Result<Vec<f64>> {
    if t == 0 || t > dataset.len() {
        return Err(Error::Domain(format!("t = {t} outside 1..={}", dataset.len())));
    }
    let region = dataset.region;
    let cov: Vec<Vec<f64>> = dataset.covariates.grids.iter().map(|g| pool_grid(g.values(), &region, pool)).collect();
    let empty = vec![0.0; pool * pool];
    let mut out = Vec::with_capacity(window * CHANNELS_PER_STEP * pool * pool);
    for lag in (1..=window).rev() {
        if t > lag {
            let s = t - lag;
            out.extend(pool_grid(&dataset.treatment(s).binarize(&region), &region, pool));
            out.extend(pool_grid(&dataset.outcome(s).binarize(&region), &region, pool));
        } else {
            out.extend_from_slice(&empty);
            out.extend_from_slice(&empty);
        }
        for c in &cov {
            out.extend_from_slice(c);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Network {
    conv1: Conv2d,
    conv2: Conv2d,
    dense1: Dense,
    dense2: Dense,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Meta {
    config: PropensityConfig,
    network: Network,
    channel_mean: Vec<f64>,
    channel_std: Vec<f64>,
    scale: f64,
    losses: Vec<f64>,
}

/// CNN regressor of R(Z_t) on the history window; its output is λ₁.
#[derive(Debug, Clone)]
pub struct PropensityModel {
    meta: Meta,
    params: ParamStore,
}

impl Network {
    fn new(store: &mut ParamStore, cfg: &PropensityConfig) -> Result<Self> {
        let mut rng = derived_stream(cfg.seed, &[crate::rng::label("propensity-init")]);
        let c_in = cfg.window * CHANNELS_PER_STEP;
        Ok(Self {
            conv1: Conv2d::new(store, "conv1", c_in, cfg.conv_channels, 3, &mut rng)?,
            conv2: Conv2d::new(store, "conv2", cfg.conv_channels, cfg.conv_channels, 3, &mut rng)?,
            dense1: Dense::new(store, "dense1", cfg.conv_channels, cfg.hidden, &mut rng)?,
            dense2: Dense::new(store, "dense2", cfg.hidden, 1, &mut rng)?,
        })
    }

    /// Unscaled positive output `softplus(raw)`, shape `[N,1]`.
    fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let h = self.conv1.forward(g, store, x)?;
        let h = g.relu(h)?;
        let h = self.conv2.forward(g, store, h)?;
        let h = g.relu(h)?;
        let h = g.global_avg_pool(h)?;
        let h = self.dense1.forward(g, store, h)?;
        let h = g.relu(h)?;
        let h = self.dense2.forward(g, store, h)?;
        g.softplus(h)
    }
}

fn inverse_softplus(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

impl PropensityModel {
    pub fn config(&self) -> &PropensityConfig {
        &self.meta.config
    }

    /// Training loss per epoch (mean squared error on the scaled target).
    pub fn losses(&self) -> &[f64] {
        &self.meta.losses
    }

    fn standardize(&self, raw: &mut [f64]) {
        let p2 = self.meta.config.pool * self.meta.config.pool;
        for (c, chunk) in raw.chunks_mut(p2).enumerate() {
            let (m, s) = (self.meta.channel_mean[c], self.meta.channel_std[c]);
            chunk.iter_mut().for_each(|v| *v = (*v - m) / s);
        }
    }

    fn batch_tensor(&self, rows: &[Vec<f64>]) -> Result<Tensor> {
        let cfg = &self.meta.config;
        let c = cfg.window * CHANNELS_PER_STEP;
        Tensor::new(vec![rows.len(), c, cfg.pool, cfg.pool], rows.concat())
    }

    /// λ₁ for Z_t given the observed history before t.
    pub fn predict(&self, dataset: &Dataset, t: usize) -> Result<f64> {
        let cfg = &self.meta.config;
        let mut x = history_features(dataset, t, cfg.window, cfg.pool)?;
        self.standardize(&mut x);
        let mut g = Graph::new();
        let input = g.input(self.batch_tensor(&[x])?)?;
        let out = self.meta.network.forward(&mut g, &self.params, input)?;
        let lambda = self.meta.scale * g.value(out).item();
        if !(lambda > 0.0) {
            return Err(Error::Contract(format!("propensity output {lambda} is not positive")));
        }
        Ok(lambda)
    }

    pub fn predict_all(&self, dataset: &Dataset) -> Result<Vec<f64>> {
        (1..=dataset.len()).map(|t| self.predict(dataset, t)).collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        serde_json::to_writer_pretty(BufWriter::new(File::create(dir.join("propensity.json"))?), &self.meta)?;
        self.params.save(BufWriter::new(File::create(dir.join("propensity.params"))?))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta: Meta = serde_json::from_reader(BufReader::new(File::open(dir.join("propensity.json"))?))?;
        let params = ParamStore::load(BufReader::new(File::open(dir.join("propensity.params"))?))?;
        Ok(Self { meta, params })
    }
}

/// e_t(z_t) = Pois(R(z_t); λ₁).
pub fn propensity_score(lambda1: f64, count: ReducedCount) -> Result<f64> {
    if !(lambda1 > 0.0) {
        return Err(Error::Contract(format!("propensity rate {lambda1} is not positive")));
    }
    count_probability(count, lambda1)
}

/// Fits one shared regressor of R(Z_t) on the history window over t = L+1..T
/// of every dataset given.
pub fn fit_propensity(datasets: &[&Dataset], config: &PropensityConfig) -> Result<PropensityModel> {
    config.validate()?;
    let l = config.window;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for d in datasets {
        if d.len() <= l {
            return Err(Error::Config(format!("series length {} must exceed the window {l}", d.len())));
        }
        for t in l + 1..=d.len() {
            xs.push(history_features(d, t, l, config.pool)?);
            ys.push(reduce(d.treatment(t)).value() as f64);
        }
    }
    if xs.is_empty() {
        return Err(Error::Config("no training examples for the propensity model".into()));
    }
    let p2 = config.pool * config.pool;
    let channels = l * CHANNELS_PER_STEP;
    let mut channel_mean = vec![0.0; channels];
    let mut channel_std = vec![0.0; channels];
    for c in 0..channels {
        let vals = xs.iter().flat_map(|x| &x[c * p2..(c + 1) * p2]);
        let n = (xs.len() * p2) as f64;
        let mean = vals.clone().sum::<f64>() / n;
        let var = vals.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        channel_mean[c] = mean;
        channel_std[c] = if var > 1e-12 { var.sqrt() } else { 1.0 };
    }
    let mean_y = ys.iter().sum::<f64>() / ys.len() as f64;
    let scale = mean_y.max(1.0) / std::f64::consts::LN_2;

    let mut params = ParamStore::new(config.seed);
    let network = Network::new(&mut params, config)?;
    let out_bias = network.dense2.bias;
    params.value_mut(out_bias).data_mut()[0] = inverse_softplus(mean_y.max(1e-3) / scale);
    let mut model = PropensityModel {
        meta: Meta { config: config.clone(), network, channel_mean, channel_std, scale, losses: Vec::new() },
        params,
    };
    for x in &mut xs {
        model.standardize(x);
    }
    let targets: Vec<f64> = ys.iter().map(|y| y / scale).collect();

    let mut opt = make_optimizer(config.optimizer, config.learning_rate);
    let mut rng = derived_stream(config.seed, &[crate::rng::label("propensity-batches")]);
    let mut order: Vec<usize> = (0..xs.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let rows: Vec<Vec<f64>> = batch.iter().map(|&i| xs[i].clone()).collect();
            let y: Vec<f64> = batch.iter().map(|&i| targets[i]).collect();
            let mut g = Graph::new();
            let input = g.input(model.batch_tensor(&rows)?)?;
            let target = g.input(Tensor::matrix(batch.len(), 1, y)?)?;
            let step = (|| -> Result<f64> {
                let pred = model.meta.network.forward(&mut g, &model.params, input)?;
                let diff = g.sub(pred, target)?;
                let sq = g.square(diff)?;
                let loss = g.mean(sq)?;
                let grads = g.backward(loss)?;
                model.params.zero_grad();
                grads.accumulate_into(&mut model.params)?;
                Ok(g.value(loss).item())
            })();
            let last = model.meta.losses.last().copied();
            let loss = step.map_err(|e| {
                Error::Training(format!("propensity fit failed at epoch {epoch} (last epoch loss {last:?}): {e}"))
            })?;
            opt.step(&mut model.params);
            epoch_loss += loss * batch.len() as f64;
        }
        let epoch_loss = epoch_loss / xs.len() as f64;
        if !epoch_loss.is_finite() {
            return Err(Error::Training(format!("propensity loss diverged at epoch {epoch}")));
        }
        model.meta.losses.push(epoch_loss);
    }
    if let (Some(first), Some(last)) = (model.meta.losses.first(), model.meta.losses.last()) {
        log::debug!("propensity fit: loss {first:.4} -> {last:.4} over {} epochs", config.epochs);
    }
    Ok(model)
}

/// Balancing surrogate: stratify steps by predicted λ₁ into deciles and
/// average the within-stratum |correlation| between R(Z_t) and `summary_t`.
pub fn balance_statistic(lambda1: &[f64], counts: &[f64], summary: &[f64], strata: usize) -> Result<f64> {
    if lambda1.len() != counts.len() || counts.len() != summary.len() {
        return Err(Error::Shape("balance inputs differ in length".into()));
    }
    let mut idx: Vec<usize> = (0..lambda1.len()).collect();
    idx.sort_by(|&a, &b| lambda1[a].total_cmp(&lambda1[b]).then(a.cmp(&b)));
    let n = idx.len();
    let mut total = 0.0;
    let mut used = 0;
    for s in 0..strata {
        let part = &idx[s * n / strata..(s + 1) * n / strata];
        if part.len() < 3 {
            continue;
        }
        let x: Vec<f64> = part.iter().map(|&i| counts[i]).collect();
        let y: Vec<f64> = part.iter().map(|&i| summary[i]).collect();
        if let Some(r) = correlation(&x, &y) {
            total += r.abs();
            used += 1;
        }
    }
    if used == 0 {
        return Err(Error::Metric("no stratum had enough variation for a correlation".into()));
    }
    Ok(total / used as f64)
}

fn correlation(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let syy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    if sxx <= 0.0 || syy <= 0.0 {
        None
    } else {
        Some(sxy / (sxx * syy).sqrt())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::point_process::{IntensityField, PatternKind, PointPattern};
    use crate::rng::stream;
    use crate::synthetic::{default_roads, simulate_series, DataSource, GenParams};

    fn small_config() -> PropensityConfig {
        PropensityConfig { pool: 6, conv_channels: 4, hidden: 4, epochs: 40, ..PropensityConfig::default() }
    }

    fn with_treatments(base: &Dataset, counts: &[usize]) -> Dataset {
        let r = base.region;
        let treatments = counts
            .iter()
            .enumerate()
            .map(|(i, &k)| {
                let pts = (0..k).map(|j| crate::point_process::Point::new((j as f64 + 0.5) / k as f64, 0.5)).collect();
                PointPattern::new(i + 1, PatternKind::Treatment, pts, &r).unwrap()
            })
            .collect();
        Dataset::new(r, base.roads.clone(), treatments, base.outcomes.clone(), base.covariates.clone(), base.source.clone())
            .unwrap()
    }

    #[test]
    fn constant_target_is_recovered() {
        let r = Region::unit_square(24);
        let base = simulate_series(&r, &default_roads(), &GenParams::default(), 12, 3).unwrap();
        let d = with_treatments(&base, &[5; 12]);
        let m = fit_propensity(&[&d], &small_config()).unwrap();
        for t in 1..=12 {
            assert!((m.predict(&d, t).unwrap() - 5.0).abs() < 0.5);
        }
    }

    #[test]
    fn homogeneous_treatment_field_rate() {
        let r = Region::unit_square(20);
        let base = simulate_series(&r, &default_roads(), &GenParams::default(), 64, 9).unwrap();
        let field = IntensityField::constant(r, 4.0).unwrap();
        let mut rng = stream(12);
        let counts: Vec<usize> =
            (0..64).map(|_| crate::point_process::sample_points(&field, &mut rng).len()).collect();
        let d = with_treatments(&base, &counts);
        let m = fit_propensity(&[&d], &small_config()).unwrap();
        let mean: f64 = (4..=64).map(|t| m.predict(&d, t).unwrap()).sum::<f64>() / 61.0;
        assert!((mean - 4.0 * r.area()).abs() < 1.0, "mean λ₁ {mean}");
    }

    #[test]
    fn history_layout_and_padding() {
        let r = Region::unit_square(20);
        let d = simulate_series(&r, &default_roads(), &GenParams::default(), 6, 2).unwrap();
        let x = history_features(&d, 1, 3, 5).unwrap();
        assert_eq!(x.len(), 3 * CHANNELS_PER_STEP * 25);
        // first step has no history: treatment and outcome channels are empty
        assert!(x[..50].iter().all(|&v| v == 0.0));
        let x4 = history_features(&d, 4, 3, 5).unwrap();
        let occupied: f64 = x4[..25].iter().sum::<f64>() * 16.0;
        let cells = d.treatment(1).binarize(&r).iter().sum::<f64>();
        assert!((occupied - cells).abs() < 1e-9);
        assert!(history_features(&d, 0, 3, 5).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let r = Region::unit_square(16);
        let d = simulate_series(&r, &default_roads(), &GenParams::default(), 8, 4).unwrap();
        let cfg = PropensityConfig { epochs: 3, ..small_config() };
        let m = fit_propensity(&[&d], &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        m.save(dir.path()).unwrap();
        let back = PropensityModel::load(dir.path()).unwrap();
        for t in 1..=8 {
            assert_eq!(m.predict(&d, t).unwrap(), back.predict(&d, t).unwrap());
        }
        assert!(matches!(d.source, DataSource::Synthetic { .. }));
    }

    #[test]
    fn propensity_score_contract() {
        assert!((propensity_score(2.0, ReducedCount(2)).unwrap() - 0.2707).abs() < 1e-4);
        assert!(matches!(propensity_score(0.0, ReducedCount(1)), Err(Error::Contract(_))));
    }

    #[test]
    fn balance_statistic_detects_confounding() {
        let n = 400;
        let lam: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let counts: Vec<f64> = (0..n).map(|i| (i % 7) as f64).collect();
        let confounded: Vec<f64> = counts.iter().map(|c| 2.0 * c).collect();
        let unrelated: Vec<f64> = (0..n).map(|i| ((i * 13) % 11) as f64).collect();
        assert!(balance_statistic(&lam, &counts, &confounded, 10).unwrap() > 0.99);
        assert!(balance_statistic(&lam, &counts, &unrelated, 10).unwrap() < 0.3);
    }
}
