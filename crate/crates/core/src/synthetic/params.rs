use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How proximity to previous events enters the log-intensity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KernelMode {
    /// `exp(-2 D)`
    #[default]
    Exponential,
    /// `exp(-D² / (2σ²))`
    Gaussian,
}

impl std::fmt::Display for KernelMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            KernelMode::Exponential => "exponential",
            KernelMode::Gaussian => "gaussian",
        })
    }
}

/// Coefficients of the synthetic treatment and outcome log-intensities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenParams {
    pub beta0: f64,
    pub beta_x: [f64; 4],
    pub beta_z: f64,
    pub beta_y: f64,
    pub gamma0: f64,
    pub gamma_x: [f64; 4],
    pub gamma_z: f64,
    pub gamma_y: f64,
    pub a3_0: f64,
    pub a3_1: f64,
    pub a4_0: f64,
    pub a4_1: f64,
    pub kernel_mode: KernelMode,
    pub sigma: f64,
}

impl Default for GenParams {
    fn default() -> Self {
        Self {
            beta0: -1.0,
            beta_x: [1.0; 4],
            beta_z: 1.0,
            beta_y: 1.0,
            gamma0: 1.0,
            gamma_x: [1.0; 4],
            gamma_z: 1.0,
            gamma_y: 1.0,
            a3_0: -0.2,
            a3_1: 2.3,
            a4_0: -0.2,
            a4_1: 2.8,
            kernel_mode: KernelMode::Exponential,
            sigma: std::f64::consts::FRAC_1_SQRT_2,
        }
    }
}

impl GenParams {
    pub fn with_kernel_mode(mut self, mode: KernelMode) -> Self {
        self.kernel_mode = mode;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let scalars = [
            self.beta0, self.beta_z, self.beta_y, self.gamma0, self.gamma_z, self.gamma_y, self.a3_0, self.a3_1,
            self.a4_0, self.a4_1, self.sigma,
        ];
        let finite = scalars.iter().chain(&self.beta_x).chain(&self.gamma_x).all(|v| v.is_finite());
        if !finite {
            return Err(Error::Config("generation parameters must be finite".into()));
        }
        if self.kernel_mode == KernelMode::Gaussian && self.sigma <= 0.0 {
            return Err(Error::Config("gaussian kernel needs sigma > 0".into()));
        }
        Ok(())
    }

    /// Proximity term for a distance `d` to the nearest previous event; in (0, 1].
    #[inline]
    pub fn proximity(&self, d: f64) -> f64 {
        match self.kernel_mode {
            KernelMode::Exponential => (-2.0 * d).exp(),
            KernelMode::Gaussian => (-(d * d) / (2.0 * self.sigma * self.sigma)).exp(),
        }
    }
}
