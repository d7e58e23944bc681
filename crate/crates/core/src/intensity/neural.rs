use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diff::{make_optimizer, Dense, EncoderBlock, Graph, NodeId, OptimizerKind, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::point_process::{IntensityField, Point, PointPattern, Region, SubRegion};
use crate::rng::{derived_stream, label};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KlSign {
    /// Minimize NLL + κ·KL.
    #[default]
    Plus,
    /// Minimize NLL − κ·KL.
    Minus,
}

impl KlSign {
    fn factor(self) -> f64 {
        match self {
            KlSign::Plus => 1.0,
            KlSign::Minus => -1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NeuralConfig {
    pub width: usize,
    pub blocks: usize,
    pub heads: usize,
    pub latent: usize,
    pub decoder_layers: usize,
    pub decoder_width: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub kl_weight: f64,
    pub kl_sign: KlSign,
    /// Side of the midpoint quadrature grid used during training.
    pub quadrature: usize,
    /// Events fed to the encoder (evenly spaced in canonical order); the
    /// likelihood always uses every event.
    pub max_tokens: usize,
}

impl Default for NeuralConfig {
    fn default() -> Self {
        Self {
            width: 16,
            blocks: 8,
            heads: 16,
            latent: 8,
            decoder_layers: 8,
            decoder_width: 16,
            epochs: 300,
            learning_rate: 1e-4,
            optimizer: OptimizerKind::Sgd,
            kl_weight: 1.0,
            kl_sign: KlSign::Plus,
            quadrature: 24,
            max_tokens: 32,
        }
    }
}

impl NeuralConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("width {} is not divisible by {} heads", self.width, self.heads)));
        }
        if self.decoder_layers < 1 || self.latent == 0 || self.decoder_width == 0 || self.quadrature == 0 {
            return Err(Error::Config("decoder layers, latent size, decoder width and quadrature must be positive".into()));
        }
        if self.max_tokens == 0 || !(self.learning_rate >= 0.0) || !(self.kl_weight >= 0.0) {
            return Err(Error::Config("token cap must be positive; learning rate and KL weight nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Architecture {
    embed: Dense,
    blocks: Vec<EncoderBlock>,
    head: Dense,
    decoder: Vec<Dense>,
    log_rate: crate::diff::ParamId,
    latent: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Meta {
    config: NeuralConfig,
    region: Region,
    arch: Architecture,
    /// Posterior mean, frozen after training.
    latent_mean: Vec<f64>,
    losses: Vec<f64>,
    n_events: usize,
}

/// Attention-encoded, variational intensity model for one outcome pattern.
#[derive(Debug, Clone)]
pub struct IntensityModel {
    meta: Meta,
    params: ParamStore,
}

/// Maps region coordinates to [-1, 1]².
fn normalize(p: &Point, r: &Region) -> [f64; 2] {
    [2.0 * (p.x - r.x_min) / r.width() - 1.0, 2.0 * (p.y - r.y_min) / r.height() - 1.0]
}

fn coords_tensor(points: &[Point], r: &Region) -> Result<Tensor> {
    Tensor::matrix(points.len(), 2, points.iter().flat_map(|p| normalize(p, r)).collect())
}

/// Midpoints of a `q × q` grid over the region and the per-point weight.
pub fn quadrature_points(region: &Region, q: usize) -> (Vec<Point>, f64) {
    let mut pts = Vec::with_capacity(q * q);
    for j in 0..q {
        for i in 0..q {
            pts.push(Point::new(
                region.x_min + region.width() * (i as f64 + 0.5) / q as f64,
                region.y_min + region.height() * (j as f64 + 0.5) / q as f64,
            ));
        }
    }
    (pts, region.area() / (q * q) as f64)
}

/// Canonical order, then at most `cap` evenly spaced events.
fn encoder_tokens(pattern_points: &[Point], cap: usize) -> Vec<Point> {
    let mut pts = pattern_points.to_vec();
    pts.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    if pts.len() <= cap {
        return pts;
    }
    (0..cap).map(|k| pts[k * pts.len() / cap]).collect()
}

impl Architecture {
    fn new(store: &mut ParamStore, cfg: &NeuralConfig, seed: u64) -> Result<Self> {
        let mut rng = derived_stream(seed, &[label("intensity-init")]);
        let embed = Dense::new(store, "embed", 2, cfg.width, &mut rng)?;
        let blocks = (0..cfg.blocks)
            .map(|b| EncoderBlock::new(store, &format!("block{b}"), cfg.width, cfg.heads, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let head = Dense::new(store, "latent_head", cfg.width, 2 * cfg.latent, &mut rng)?;
        let mut decoder = Vec::with_capacity(cfg.decoder_layers);
        let mut fan_in = 2 + cfg.latent;
        for l in 0..cfg.decoder_layers {
            let out = if l + 1 == cfg.decoder_layers { 1 } else { cfg.decoder_width };
            decoder.push(Dense::new(store, &format!("decoder{l}"), fan_in, out, &mut rng)?);
            fan_in = out;
        }
        // a zero output layer starts the decoder at a spatially flat intensity,
        // and a zero latent head starts the posterior at N(0, I)
        let last = decoder.last().expect("at least one decoder layer");
        store.value_mut(last.weight).data_mut().iter_mut().for_each(|v| *v = 0.0);
        store.value_mut(head.weight).data_mut().iter_mut().for_each(|v| *v = 0.0);
        let log_rate = store.add_constant("log_rate", &[1], 0.0)?;
        Ok(Self { embed, blocks, head, decoder, log_rate, latent: cfg.latent })
    }

    /// Returns (μ, logvar) as `[1, latent]` nodes.
    fn encode(&self, g: &mut Graph, store: &ParamStore, tokens: NodeId) -> Result<(NodeId, NodeId)> {
        let mut h = self.embed.forward(g, store, tokens)?;
        for b in &self.blocks {
            h = b.forward(g, store, h)?;
        }
        let pooled = g.mean_rows(h)?;
        let stats = self.head.forward(g, store, pooled)?;
        let mu = g.slice_cols(stats, 0, self.latent)?;
        let logvar = g.slice_cols(stats, self.latent, 2 * self.latent)?;
        Ok((mu, logvar))
    }

    /// Positive intensity at each row of `coords`: `e^{b} · softplus(raw) / ln 2`.
    fn decode(&self, g: &mut Graph, store: &ParamStore, coords: NodeId, z: NodeId) -> Result<NodeId> {
        let (n, _) = g.value(coords).dims2()?;
        let zr = g.repeat_rows(z, n)?;
        let mut h = g.concat_cols(&[coords, zr])?;
        for (l, layer) in self.decoder.iter().enumerate() {
            h = layer.forward(g, store, h)?;
            if l + 1 < self.decoder.len() {
                h = g.tanh(h)?;
            }
        }
        let sp = g.softplus(h)?;
        let rate = g.param(store, self.log_rate)?;
        let rate = g.exp(rate)?;
        let rate = g.reshape(rate, &[1, 1])?;
        let rate = g.repeat_rows(rate, n)?;
        let out = g.mul(sp, rate)?;
        g.scale(out, 1.0 / std::f64::consts::LN_2)
    }
}

/// Builds the training objective
/// `−Σ ln net(s_i) + Σ_q w net(q) ± κ·KL(q(z|Y) ‖ N(0, I))`
/// with the reparameterized latent `z = μ + e^{logvar/2} ε`.
/// Returns (loss, nll part, kl) nodes.
#[allow(clippy::too_many_arguments)]
fn objective(
    arch: &Architecture,
    cfg: &NeuralConfig,
    g: &mut Graph,
    store: &ParamStore,
    tokens: &Tensor,
    events: &Tensor,
    quad: &Tensor,
    quad_weight: f64,
    eps: &[f64],
) -> Result<(NodeId, NodeId, NodeId)> {
    let tok = g.input(tokens.clone())?;
    let (mu, logvar) = arch.encode(g, store, tok)?;
    let half = g.scale(logvar, 0.5)?;
    let std = g.exp(half)?;
    let e = g.input(Tensor::matrix(1, arch.latent, eps.to_vec())?)?;
    let noise = g.mul(std, e)?;
    let z = g.add(mu, noise)?;

    let ev = g.input(events.clone())?;
    let at_events = arch.decode(g, store, ev, z)?;
    let log_events = g.log(at_events)?;
    let ll = g.sum(log_events)?;
    let q = g.input(quad.clone())?;
    let at_quad = arch.decode(g, store, q, z)?;
    let mass = g.sum(at_quad)?;
    let mass = g.scale(mass, quad_weight)?;
    let neg_ll = g.scale(ll, -1.0)?;
    let nll = g.add(neg_ll, mass)?;

    // KL(N(μ, σ²) ‖ N(0, 1)) = ½ Σ (μ² + σ² − logvar − 1)
    let mu2 = g.square(mu)?;
    let var = g.exp(logvar)?;
    let t = g.add(mu2, var)?;
    let t = g.sub(t, logvar)?;
    let t = g.add_scalar(t, -1.0)?;
    let kl = g.sum(t)?;
    let kl = g.scale(kl, 0.5)?;
    let weighted = g.scale(kl, cfg.kl_sign.factor() * cfg.kl_weight)?;
    let loss = g.add(nll, weighted)?;
    Ok((loss, nll, kl))
}

/// Everything needed to evaluate the training objective outside the fit loop,
/// for gradient checking.
pub struct ObjectiveProbe {
    arch: Architecture,
    cfg: NeuralConfig,
    pub params: ParamStore,
    tokens: Tensor,
    events: Tensor,
    quad: Tensor,
    quad_weight: f64,
    eps: Vec<f64>,
}

impl ObjectiveProbe {
    pub fn new(pattern: &PointPattern, region: &Region, cfg: &NeuralConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new(seed);
        let arch = Architecture::new(&mut params, cfg, seed)?;
        // perturb the zero-initialised layers so every parameter has a nonzero gradient
        let last = arch.decoder.last().expect("decoder layer").weight;
        let mut rng = derived_stream(seed, &[label("probe")]);
        for id in [last, arch.head.weight] {
            for v in params.value_mut(id).data_mut() {
                *v = 0.3 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
            }
        }
        let tokens = coords_tensor(&encoder_tokens(pattern.points(), cfg.max_tokens), region)?;
        let events = coords_tensor(pattern.points(), region)?;
        let (qp, quad_weight) = quadrature_points(region, cfg.quadrature);
        let quad = coords_tensor(&qp, region)?;
        let eps = (0..cfg.latent).map(|_| StandardNormal.sample(&mut rng)).collect();
        Ok(Self { arch, cfg: cfg.clone(), params, tokens, events, quad, quad_weight, eps })
    }

    pub fn loss(&self, g: &mut Graph, store: &ParamStore) -> Result<NodeId> {
        let (loss, _, _) = objective(
            &self.arch,
            &self.cfg,
            g,
            store,
            &self.tokens,
            &self.events,
            &self.quad,
            self.quad_weight,
            &self.eps,
        )?;
        Ok(loss)
    }
}

impl IntensityModel {
    pub fn config(&self) -> &NeuralConfig {
        &self.meta.config
    }

    pub fn region(&self) -> &Region {
        &self.meta.region
    }

    /// Training loss per epoch.
    pub fn losses(&self) -> &[f64] {
        &self.meta.losses
    }

    pub fn latent_mean(&self) -> &[f64] {
        &self.meta.latent_mean
    }

    fn decode_points(&self, pts: &[Point]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let coords = g.input(coords_tensor(pts, &self.meta.region)?)?;
        let z = g.input(Tensor::matrix(1, self.meta.arch.latent, self.meta.latent_mean.clone())?)?;
        let out = self.meta.arch.decode(&mut g, &self.params, coords, z)?;
        Ok(g.value(out).data().to_vec())
    }

    /// net(s) at the frozen posterior mean.
    pub fn evaluate(&self, s: &Point) -> Result<f64> {
        if !self.meta.region.contains(s) {
            return Err(Error::Domain(format!("({}, {}) lies outside the region", s.x, s.y)));
        }
        Ok(self.decode_points(std::slice::from_ref(s))?[0])
    }

    /// Evaluation at every cell centre of the model's region.
    pub fn field(&self) -> Result<IntensityField> {
        let centers: Vec<Point> = self.meta.region.cell_centers().collect();
        let mut values = Vec::with_capacity(centers.len());
        for chunk in centers.chunks(4096) {
            values.extend(self.decode_points(chunk)?);
        }
        IntensityField::new(self.meta.region, values)
    }

    pub fn integral(&self, omega: &SubRegion) -> Result<f64> {
        omega.check_region(&self.meta.region)?;
        self.field()?.integrate(omega)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        serde_json::to_writer_pretty(BufWriter::new(File::create(dir.join("intensity.json"))?), &self.meta)?;
        self.params.save(BufWriter::new(File::create(dir.join("intensity.params"))?))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta: Meta = serde_json::from_reader(BufReader::new(File::open(dir.join("intensity.json"))?))?;
        let params = ParamStore::load(BufReader::new(File::open(dir.join("intensity.params"))?))?;
        Ok(Self { meta, params })
    }
}

/// Fits the neural intensity to a nonempty pattern by gradient descent on the
/// penalized Poisson negative log-likelihood.
pub fn fit_neural(pattern: &PointPattern, region: &Region, cfg: &NeuralConfig, seed: u64) -> Result<IntensityModel> {
    cfg.validate()?;
    if pattern.is_empty() {
        return Err(Error::Domain("the neural intensity needs at least one event".into()));
    }
    let mut params = ParamStore::new(seed);
    let arch = Architecture::new(&mut params, cfg, seed)?;
    let n = pattern.len() as f64;
    params.value_mut(arch.log_rate).data_mut()[0] = (n / region.area()).ln();

    let tokens = coords_tensor(&encoder_tokens(pattern.points(), cfg.max_tokens), region)?;
    let events = coords_tensor(&pattern.canonical_points(), region)?;
    let (qp, quad_weight) = quadrature_points(region, cfg.quadrature);
    let quad = coords_tensor(&qp, region)?;

    let mut rng = derived_stream(seed, &[label("intensity-noise")]);
    let mut opt = make_optimizer(cfg.optimizer, cfg.learning_rate);
    let mut losses = Vec::with_capacity(cfg.epochs + 1);
    for epoch in 0..=cfg.epochs {
        let eps: Vec<f64> = (0..cfg.latent).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mut g = Graph::new();
        let (loss, _, _) = objective(&arch, cfg, &mut g, &params, &tokens, &events, &quad, quad_weight, &eps)
            .map_err(|e| Error::Training(format!("intensity objective failed at epoch {epoch}: {e}")))?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Training(format!("intensity loss diverged at epoch {epoch}")));
        }
        losses.push(value);
        if epoch == cfg.epochs {
            break;
        }
        let grads = g.backward(loss)?;
        params.zero_grad();
        grads.accumulate_into(&mut params)?;
        opt.step(&mut params);
    }
    log::debug!(
        "intensity fit on {} events: loss {:.3} -> {:.3}",
        pattern.len(),
        losses[0],
        losses[losses.len() - 1]
    );

    let mut g = Graph::new();
    let tok = g.input(tokens)?;
    let (mu, _) = arch.encode(&mut g, &params, tok)?;
    let latent_mean = g.value(mu).data().to_vec();
    Ok(IntensityModel {
        meta: Meta { config: cfg.clone(), region: *region, arch, latent_mean, losses, n_events: pattern.len() },
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::max_gradient_error;
    use crate::point_process::PatternKind;
    use crate::rng::stream;
    use rand::Rng;

    fn pattern(pts: &[(f64, f64)], r: &Region) -> PointPattern {
        PointPattern::new(1, PatternKind::Outcome, pts.iter().map(|&(x, y)| Point::new(x, y)).collect(), r).unwrap()
    }

    fn tiny() -> NeuralConfig {
        NeuralConfig {
            width: 8,
            blocks: 2,
            heads: 2,
            latent: 4,
            decoder_layers: 3,
            decoder_width: 8,
            epochs: 20,
            quadrature: 8,
            ..NeuralConfig::default()
        }
    }

    #[test]
    fn five_point_mass() {
        let r = Region::unit_square(40);
        let p = pattern(&[(0.2, 0.3), (0.5, 0.5), (0.8, 0.2), (0.3, 0.8), (0.6, 0.7)], &r);
        let m = fit_neural(&p, &r, &tiny(), 1).unwrap();
        let mass = m.integral(&SubRegion::full(&r)).unwrap();
        assert!((mass - 5.0).abs() < 0.5, "mass {mass}");
        assert!(m.losses()[0] - m.losses().last().unwrap() > 0.0);
        assert_eq!(m.integral(&SubRegion::empty(&r)).unwrap(), 0.0);
    }

    #[test]
    fn single_point_is_localized() {
        let r = Region::unit_square(20);
        let p = pattern(&[(0.5, 0.5)], &r);
        let cfg = NeuralConfig { epochs: 300, learning_rate: 1e-2, optimizer: OptimizerKind::Adam, ..tiny() };
        let m = fit_neural(&p, &r, &cfg, 2).unwrap();
        let f = m.field().unwrap();
        let (argmax, _) =
            f.values().iter().enumerate().fold((0, f64::MIN), |b, (i, &v)| if v > b.1 { (i, v) } else { b });
        let c = r.cell_center(argmax);
        let cell = r.cell_width();
        assert!((c.x - 0.5).abs() <= 2.0 * cell + 1e-9 && (c.y - 0.5).abs() <= 2.0 * cell + 1e-9, "argmax at {c:?}");
    }

    #[test]
    fn evaluation_is_deterministic_positive_and_matches_the_field() {
        let r = Region::unit_square(16);
        let p = pattern(&[(0.1, 0.1), (0.9, 0.4), (0.4, 0.6)], &r);
        let m = fit_neural(&p, &r, &tiny(), 3).unwrap();
        let s = Point::new(0.33, 0.71);
        assert_eq!(m.evaluate(&s).unwrap(), m.evaluate(&s).unwrap());
        let mut rng = stream(4);
        for _ in 0..1000 {
            let q = Point::new(rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0));
            assert!(m.evaluate(&q).unwrap() > 0.0);
        }
        let f = m.field().unwrap();
        for c in 0..r.n_cells() {
            assert!((f.get(c) - m.evaluate(&r.cell_center(c)).unwrap()).abs() < 1e-12);
        }
        assert!(matches!(m.evaluate(&Point::new(1.5, 0.5)), Err(Error::Domain(_))));
    }

    #[test]
    fn partition_additivity() {
        let r = Region::unit_square(10);
        let p = pattern(&[(0.2, 0.2), (0.7, 0.6)], &r);
        let m = fit_neural(&p, &r, &tiny(), 5).unwrap();
        let left = SubRegion::from_rect(&r, 0.0, 0.4, 0.0, 1.0).unwrap();
        let right = SubRegion::from_rect(&r, 0.4, 1.0, 0.0, 1.0).unwrap();
        let total = m.integral(&SubRegion::full(&r)).unwrap();
        let parts = m.integral(&left).unwrap() + m.integral(&right).unwrap();
        assert!((total - parts).abs() <= 1e-12 * total);
    }

    #[test]
    fn permutation_invariance_with_canonical_inputs() {
        let r = Region::unit_square(12);
        let pts = [(0.2, 0.3), (0.5, 0.5), (0.8, 0.2), (0.3, 0.8)];
        let mut rev = pts;
        rev.reverse();
        let a = fit_neural(&pattern(&pts, &r), &r, &tiny(), 6).unwrap();
        let b = fit_neural(&pattern(&rev, &r), &r, &tiny(), 6).unwrap();
        assert_eq!(a.losses(), b.losses());
        assert_eq!(a.field().unwrap(), b.field().unwrap());
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        let r = Region::unit_square(8);
        let p = pattern(&[(0.25, 0.4), (0.6, 0.55), (0.8, 0.15)], &r);
        let cfg = NeuralConfig { blocks: 1, decoder_layers: 2, quadrature: 4, ..tiny() };
        let probe = ObjectiveProbe::new(&p, &r, &cfg, 11).unwrap();
        let err = max_gradient_error(|g, s, _| probe.loss(g, s), &probe.params, &[], 1e-5).unwrap();
        assert!(err < 1e-4, "relative error {err:e}");
    }

    #[test]
    fn kl_is_zero_at_standard_normal_and_nonnegative() {
        let r = Region::unit_square(8);
        let p = pattern(&[(0.5, 0.5)], &r);
        let cfg = tiny();
        let probe = ObjectiveProbe::new(&p, &r, &cfg, 1).unwrap();
        let mut store = probe.params.clone();
        let head = store.find("latent_head.w").unwrap();
        store.value_mut(head).data_mut().iter_mut().for_each(|v| *v = 0.0);
        let mut g = Graph::new();
        let (_, _, kl) = objective(
            &probe.arch, &cfg, &mut g, &store, &probe.tokens, &probe.events, &probe.quad, probe.quad_weight, &probe.eps,
        )
        .unwrap();
        assert_eq!(g.value(kl).item(), 0.0);
        let mut g = Graph::new();
        let (_, _, kl) = objective(
            &probe.arch, &cfg, &mut g, &probe.params, &probe.tokens, &probe.events, &probe.quad, probe.quad_weight,
            &probe.eps,
        )
        .unwrap();
        assert!(g.value(kl).item() >= 0.0);
    }

    #[test]
    fn checkpoint_round_trip() {
        let r = Region::unit_square(10);
        let p = pattern(&[(0.2, 0.2), (0.7, 0.6)], &r);
        let m = fit_neural(&p, &r, &NeuralConfig { epochs: 2, ..tiny() }, 7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        m.save(dir.path()).unwrap();
        let back = IntensityModel::load(dir.path()).unwrap();
        assert_eq!(m.field().unwrap(), back.field().unwrap());
    }
}
