//! Closed-form Gaussian inference of the unknown state from aggregated
//! signals.
//!
//! The state S carries a standard normal prior and each agent observes the
//! signal process dZ_t = S dt + sigma dB_t, so Z_t is a sufficient statistic
//! and every conditional law stays Gaussian:
//!
//! ```text
//! Z_t | S=s   ~  N(s t, sigma^2 t)
//! Z_t         ~  N(0, sigma^2 t + t^2)
//! S | Z_t=z   ~  N(z / (t + sigma^2), sigma^2 / (sigma^2 + t))
//! ```
//!
//! Densities are evaluated in log space so that products of tail values stay
//! meaningful; the product identity
//! `pdf_prior(s) * pdf_cond(z) = pdf_marginal(z) * pdf_posterior(s)`
//! is exposed as a residual for self-tests and reweighting diagnostics.

use serde::{Deserialize, Serialize};

use crate::error::{MfgError, Result};

const LN_TWO_PI: f64 = 1.837_877_066_409_345_3;

/// A (possibly degenerate) scalar normal law.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianLaw {
    pub mean: f64,
    pub variance: f64,
}

impl GaussianLaw {
    pub fn new(mean: f64, variance: f64) -> Self {
        debug_assert!(variance >= 0.0, "variance must be nonnegative");
        Self { mean, variance }
    }

    /// Point mass: variance zero. Produced at t = 0; only the simulator and
    /// the transport initializer consume these.
    pub fn degenerate(mean: f64) -> Self {
        Self { mean, variance: 0.0 }
    }

    pub fn is_degenerate(&self) -> bool {
        self.variance == 0.0
    }

    /// Log density. Degenerate laws return +inf at the mean and -inf away
    /// from it.
    pub fn log_pdf(&self, x: f64) -> f64 {
        if self.is_degenerate() {
            return if x == self.mean {
                f64::INFINITY
            } else {
                f64::NEG_INFINITY
            };
        }
        let d = x - self.mean;
        -0.5 * (LN_TWO_PI + self.variance.ln()) - 0.5 * d * d / self.variance
    }

    pub fn pdf(&self, x: f64) -> f64 {
        self.log_pdf(x).exp()
    }

    /// Distribution function. Degenerate laws step at the mean.
    pub fn cdf(&self, x: f64) -> f64 {
        if self.is_degenerate() {
            return if x < self.mean { 0.0 } else { 1.0 };
        }
        standard_normal_cdf((x - self.mean) / self.std_dev())
    }

    /// Mean cell value over [a, b]: (cdf(b) - cdf(a)) / (b - a). The exact
    /// finite-volume representation, robust for cells much wider than the
    /// standard deviation.
    pub fn cell_average(&self, a: f64, b: f64) -> f64 {
        debug_assert!(b > a);
        (self.cdf(b) - self.cdf(a)) / (b - a)
    }

    pub fn std_dev(&self) -> f64 {
        self.variance.sqrt()
    }
}

/// Standard normal distribution function via the complementary error
/// function (Abramowitz-Stegun 7.1.26 rational fit, |error| < 1.5e-7).
pub fn standard_normal_cdf(x: f64) -> f64 {
    let t = x / std::f64::consts::SQRT_2;
    0.5 * erfc_as(-t)
}

fn erfc_as(x: f64) -> f64 {
    // erfc(x) for x >= 0; reflection handles the negative axis.
    if x < 0.0 {
        return 2.0 - erfc_as(-x);
    }
    let t = 1.0 / (1.0 + 0.3275911 * x);
    let poly = t
        * (0.254829592
            + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
    poly * (-x * x).exp()
}

/// Signal-noise volatility plus the fixed standard normal prior on the state.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BeliefKernel {
    sigma: f64,
}

impl BeliefKernel {
    pub fn new(sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(MfgError::Config {
                field: "sigma".into(),
                message: format!("signal volatility must be positive and finite, got {sigma}"),
            });
        }
        Ok(Self { sigma })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// The N(0,1) prior on the state.
    pub fn prior(&self) -> GaussianLaw {
        GaussianLaw::new(0.0, 1.0)
    }

    /// Conditional law of the aggregated signal given the state: N(s t, sigma^2 t).
    pub fn signal_law_conditional(&self, t: f64, s: f64) -> GaussianLaw {
        debug_assert!(t >= 0.0);
        GaussianLaw::new(s * t, self.sigma * self.sigma * t)
    }

    /// Marginal law of the aggregated signal: N(0, sigma^2 t + t^2).
    pub fn signal_law_marginal(&self, t: f64) -> GaussianLaw {
        debug_assert!(t >= 0.0);
        GaussianLaw::new(0.0, self.sigma * self.sigma * t + t * t)
    }

    /// Posterior law of the state given signal z at time t.
    pub fn posterior(&self, t: f64, z: f64) -> GaussianLaw {
        debug_assert!(t >= 0.0);
        GaussianLaw::new(self.posterior_mean(t, z), self.posterior_variance(t))
    }

    /// Posterior mean, linear in z with slope 1/(t + sigma^2).
    pub fn posterior_mean(&self, t: f64, z: f64) -> f64 {
        z / (t + self.sigma * self.sigma)
    }

    /// Posterior variance sigma^2/(sigma^2 + t); equals 1 at t = 0 and
    /// decreases strictly in t.
    pub fn posterior_variance(&self, t: f64) -> f64 {
        let s2 = self.sigma * self.sigma;
        s2 / (s2 + t)
    }

    /// Absolute residual of the density product identity
    /// `prior(s) * cond_{s,t}(z) - marginal_t(z) * posterior_{t,z}(s)`.
    ///
    /// Identically zero in exact arithmetic; evaluated through log space so
    /// the residual stays meaningful in the tails.
    pub fn bayes_identity_residual(&self, t: f64, s: f64, z: f64) -> f64 {
        debug_assert!(t > 0.0);
        let lhs = self.prior().log_pdf(s) + self.signal_law_conditional(t, s).log_pdf(z);
        let rhs = self.signal_law_marginal(t).log_pdf(z) + self.posterior(t, z).log_pdf(s);
        (lhs.exp() - rhs.exp()).abs()
    }
}
