//! Numerical solver for mean-field games where the cost functions depend on
//! an unknown scalar state that agents learn from private signals.
//!
//! The state carries a standard normal prior; each agent's cumulative signal
//! is a sufficient statistic, so beliefs stay Gaussian ([`belief`]) and the
//! game reduces to a PDE system on the extended state (t, z, x):
//!
//! * a backward Hamilton-Jacobi-Bellman equation for the value function of
//!   the signal-augmented control problem ([`hjb`]),
//! * a forward transport-diffusion family indexed by the state, together
//!   with its state-free factor equation ([`fp`]),
//! * a damped fixed-point iteration coupling the two through the
//!   belief-averaged costs ([`equilibrium`]),
//! * a discrete-time N-player simulator for empirical epsilon-Nash
//!   validation of the computed policy ([`sim`]).
//!
//! The `parallel` feature (on by default) runs the data-parallel inner loops
//! (state-family solves, tridiagonal line sweeps, Monte Carlo paths) on
//! rayon; without it the same code runs sequentially. Results are identical
//! either way.

pub mod belief;
pub mod dynamics;
pub mod config;
pub mod costs;
pub mod density;
pub mod equilibrium;
pub mod error;
pub mod export;
pub mod fp;
pub mod grid;
pub mod hjb;
pub mod linalg;
pub mod par;
pub mod quadrature;
pub mod sim;
pub mod validation;

pub use belief::{BeliefKernel, GaussianLaw};
pub use density::{InitialDensity, PositionDensity};
pub use error::{MfgError, Result};
pub use grid::Grid;
pub use quadrature::{posterior_weights, PosteriorWeights, StateQuadrature};
