//! Error types shared across the solver crates.

use thiserror::Error;

/// Errors produced by grid construction, cost models, and the PDE solvers.
#[derive(Debug, Error)]
pub enum MfgError {
    /// Invalid configuration value, with the offending field path.
    #[error("invalid config: {field}: {message}")]
    Config { field: String, message: String },

    /// Explicit-term CFL condition violated; `required_nt` restores stability.
    #[error("CFL violation in {context} at step {step}: number = {number:.3} > 1; increase Nt to at least {required_nt}")]
    CflViolation {
        context: &'static str,
        step: usize,
        number: f64,
        required_nt: usize,
    },

    /// A non-finite value appeared in a field during a sweep.
    #[error("non-finite value detected in {context} at time slice {slice}")]
    NonFinite { context: &'static str, slice: usize },

    /// Transport-diffusion step lost or created mass beyond tolerance.
    #[error("mass drift {drift:.3e} exceeds budget at step {step}")]
    MassDrift { step: usize, drift: f64 },

    /// Negative-density clipping exceeded its roundoff budget.
    #[error("clipped negative mass {clipped:.3e} exceeds budget {budget:.3e} at step {step}")]
    NegativeMass {
        step: usize,
        clipped: f64,
        budget: f64,
    },

    /// Newton iteration for the Hamiltonian maximizer failed to converge.
    #[error("Hamiltonian maximizer did not converge at (t={t:.4}, z={z:.4}, x={x:.4}, p={p:.4})")]
    HamiltonianNonConvergence { t: f64, z: f64, x: f64, p: f64 },

    /// Mismatched array lengths between coupled inputs.
    #[error("length mismatch in {context}: expected {expected}, got {actual}")]
    LengthMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    /// Cost model failed its load-time convexity validation.
    #[error("cost model '{name}' failed validation: {message}")]
    CostModelInvalid { name: String, message: String },

    /// Unknown cost model name requested from the catalog.
    #[error("unknown cost model '{name}'")]
    UnknownCostModel { name: String },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("config parse error: {0}")]
    ConfigParse(#[from] toml::de::Error),

    #[error("serialization error: {0}")]
    Serialize(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, MfgError>;
