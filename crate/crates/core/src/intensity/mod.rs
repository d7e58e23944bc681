//! Per-step outcome intensity estimation: a neural model trained on the
//! penalized Poisson likelihood, and a Gaussian kernel backend.

mod kernel;
mod neural;

use serde::{Deserialize, Serialize};

pub use kernel::{kernel_intensity, KernelEstimate, DEFAULT_BANDWIDTH_FRACTION};
pub use neural::{fit_neural, quadrature_points, IntensityModel, KlSign, NeuralConfig, ObjectiveProbe};

use crate::error::Result;
use crate::point_process::{IntensityField, PointPattern, Region, SubRegion};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    #[default]
    Neural,
    Kernel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IntensityConfig {
    pub backend: Backend,
    pub neural: NeuralConfig,
    /// Kernel bandwidth as a fraction of the region width.
    pub bandwidth_fraction: f64,
}

impl Default for IntensityConfig {
    fn default() -> Self {
        Self { backend: Backend::Neural, neural: NeuralConfig::default(), bandwidth_fraction: DEFAULT_BANDWIDTH_FRACTION }
    }
}

#[derive(Debug, Clone)]
pub enum FittedIntensity {
    Neural(Box<IntensityModel>),
    Kernel(KernelEstimate),
}

impl FittedIntensity {
    pub fn field(&self) -> Result<IntensityField> {
        match self {
            FittedIntensity::Neural(m) => m.field(),
            FittedIntensity::Kernel(k) => Ok(k.field.clone()),
        }
    }

    pub fn integral(&self, omega: &SubRegion) -> Result<f64> {
        match self {
            FittedIntensity::Neural(m) => m.integral(omega),
            FittedIntensity::Kernel(k) => k.integral(omega),
        }
    }
}

/// Empty patterns always get the zero kernel field.
pub fn fit_intensity(
    pattern: &PointPattern,
    region: &Region,
    config: &IntensityConfig,
    seed: u64,
) -> Result<FittedIntensity> {
    let bandwidth = config.bandwidth_fraction * region.width();
    if pattern.is_empty() || config.backend == Backend::Kernel {
        return Ok(FittedIntensity::Kernel(kernel_intensity(pattern.points(), bandwidth, region)?));
    }
    Ok(FittedIntensity::Neural(Box::new(fit_neural(pattern, region, &config.neural, seed)?)))
}
