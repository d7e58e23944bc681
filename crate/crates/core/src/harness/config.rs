use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::Solver;
use crate::diff::OptimizerKind;
use crate::error::{Error, Result};
use crate::estimator::EstimatorConfig;
use crate::intensity::IntensityConfig;
use crate::point_process::{Region, SubRegion};
use crate::propensity::PropensityConfig;
use crate::synthetic::GenParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Synthetic,
    Observed,
}

/// Axis-aligned rectangle in region coordinates, snapped to whole cells.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OmegaRect {
    pub x0: f64,
    pub x1: f64,
    pub y0: f64,
    pub y1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Mode,
    /// Series lengths T. Ignored in observed mode.
    pub lengths: Vec<usize>,
    pub durations: Vec<usize>,
    pub magnitudes: Vec<f64>,
    pub runs: usize,
    pub seed: u64,
    /// Cells per axis of the synthetic unit square.
    pub resolution: usize,
    /// `None` means the whole region.
    pub omega: Option<OmegaRect>,
    pub truth_replications: usize,
    /// Saved dataset directory for observed mode.
    pub dataset: Option<PathBuf>,
    /// 0 uses every available core.
    pub workers: usize,
    pub baseline_solver: Solver,
    pub output: PathBuf,
    pub generator: GenParams,
    pub estimator: EstimatorConfig,
    pub propensity: PropensityConfig,
    pub intensity: IntensityConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Synthetic,
            lengths: vec![32, 48, 64],
            durations: vec![1, 3],
            magnitudes: vec![3.0, 4.0, 5.0, 6.0, 7.0],
            runs: 20,
            seed: 0,
            resolution: 100,
            omega: None,
            truth_replications: 2000,
            dataset: None,
            workers: 0,
            baseline_solver: Solver::ClosedForm,
            output: PathBuf::from("results"),
            generator: GenParams::default(),
            estimator: EstimatorConfig::default(),
            propensity: PropensityConfig::default(),
            intensity: IntensityConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Reduced budget for desk-scale benchmark grids on one CPU: Adam with
    /// short schedules, and 1000 draws per step for λ₂.
    pub fn benchmark() -> Self {
        let mut cfg = Self::default();
        cfg.intensity.neural.epochs = 20;
        cfg.intensity.neural.learning_rate = 1e-3;
        cfg.intensity.neural.optimizer = OptimizerKind::Adam;
        cfg.propensity.epochs = 30;
        cfg.propensity.learning_rate = 1e-2;
        cfg.propensity.optimizer = OptimizerKind::Adam;
        cfg.estimator.counterfactual_samples = 1000;
        cfg
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Applies `dotted.key=value` overrides, where the value is TOML
    /// (bare strings are accepted).
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut root = toml::Value::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o.split_once('=').ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            let value = parse_value(raw.trim());
            let mut node = &mut root;
            let parts: Vec<&str> = key.trim().split('.').collect();
            for (i, part) in parts.iter().enumerate() {
                let table =
                    node.as_table_mut().ok_or_else(|| Error::Config(format!("`{key}` does not name a table entry")))?;
                if i + 1 == parts.len() {
                    table.insert(part.to_string(), value.clone());
                    break;
                }
                node = table.entry(part.to_string()).or_insert_with(|| toml::Value::Table(Default::default()));
            }
        }
        let cfg: Self = root.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.runs == 0 {
            return Err(Error::Config("runs must be at least 1".into()));
        }
        if self.durations.is_empty() || self.magnitudes.is_empty() {
            return Err(Error::Config("durations and magnitudes must be nonempty".into()));
        }
        if self.durations.contains(&0) {
            return Err(Error::Config("durations must be at least 1".into()));
        }
        if self.magnitudes.iter().any(|c| !(*c > 0.0) || !c.is_finite()) {
            return Err(Error::Config("magnitudes must be positive".into()));
        }
        match self.mode {
            Mode::Synthetic => {
                if self.lengths.is_empty() {
                    return Err(Error::Config("lengths must be nonempty".into()));
                }
                for &t in &self.lengths {
                    if let Some(&m) = self.durations.iter().find(|&&m| m > t) {
                        return Err(Error::Config(format!("duration M = {m} exceeds series length T = {t}")));
                    }
                }
                if self.resolution < 2 {
                    return Err(Error::Config("resolution must be at least 2".into()));
                }
                if self.truth_replications == 0 {
                    return Err(Error::Config("truth_replications must be at least 1".into()));
                }
                self.generator.validate()?;
            }
            Mode::Observed => {
                if self.dataset.is_none() {
                    return Err(Error::Config("observed mode needs a dataset directory".into()));
                }
            }
        }
        if self.estimator.clip && !(self.estimator.clip_low > 0.0 && self.estimator.clip_low < self.estimator.clip_high) {
            return Err(Error::Config("clip bounds must satisfy 0 < low < high".into()));
        }
        self.propensity.validate()?;
        self.intensity.neural.validate()?;
        Ok(())
    }

    pub fn omega(&self, region: &Region) -> Result<SubRegion> {
        match self.omega {
            None => Ok(SubRegion::full(region)),
            Some(r) => SubRegion::from_rect(region, r.x0, r.x1, r.y0, r.y1),
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}
