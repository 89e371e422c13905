//! Volatilities of the controlled dynamics and the reduced signal drift.
//!
//! Positions diffuse with volatility `sigma_x` under the chosen control;
//! signals carry the belief kernel's volatility. After conditioning on the
//! agent's own information the signal drifts with the posterior mean, so the
//! reduced generator on (z, x) is
//!
//! ```text
//! r_t(z) d_z + (sigma^2/2) Lap_z + alpha d_x + (sigma_x^2/2) Lap_x .
//! ```

use serde::{Deserialize, Serialize};

use crate::belief::BeliefKernel;
use crate::error::{MfgError, Result};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Dynamics {
    pub kernel: BeliefKernel,
    /// Position volatility (the paper's sigma').
    pub sigma_x: f64,
}

impl Dynamics {
    pub fn new(kernel: BeliefKernel, sigma_x: f64) -> Result<Self> {
        if !(sigma_x > 0.0) || !sigma_x.is_finite() {
            return Err(MfgError::Config {
                field: "sigma_x".into(),
                message: format!("position volatility must be positive and finite, got {sigma_x}"),
            });
        }
        Ok(Self { kernel, sigma_x })
    }

    /// Signal diffusion coefficient sigma^2 / 2.
    pub fn nu_z(&self) -> f64 {
        let s = self.kernel.sigma();
        0.5 * s * s
    }

    /// Position diffusion coefficient sigma_x^2 / 2.
    pub fn nu_x(&self) -> f64 {
        0.5 * self.sigma_x * self.sigma_x
    }

    /// Reduced signal drift r_t(z) = z / (t + sigma^2).
    pub fn signal_drift(&self, t: f64, z: f64) -> f64 {
        self.kernel.posterior_mean(t, z)
    }
}
