//! Discretization of the extended state space (t, z, x).
//!
//! Positions live on the unit torus [0,1) with `nx` uniform nodes. Signals
//! live on the truncated line [-z_max, z_max], discretized by `nz`
//! cell-centered volumes so that zero-flux boundaries conserve mass exactly.
//! Time covers [t0, T] with `nt` uniform steps; evolution starts at the
//! positive start-up time t0 (default T/nt) where the initial laws are known
//! in closed form, sidestepping the singular data at t = 0.

use serde::{Deserialize, Serialize};

use crate::error::{MfgError, Result};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Grid {
    /// Horizon time.
    pub t_end: f64,
    /// Number of time steps between t0 and t_end (nt + 1 stored slices).
    pub nt: usize,
    /// Start-up time of the PDE evolution, 0 < t0 < T.
    pub t0: f64,
    /// Torus nodes, x_i = i / nx.
    pub nx: usize,
    /// Signal cells, centers z_j = -z_max + (j + 1/2) dz.
    pub nz: usize,
    /// Signal truncation bound.
    pub z_max: f64,
}

impl Grid {
    pub fn new(t_end: f64, nt: usize, t0: f64, nx: usize, nz: usize, z_max: f64) -> Result<Self> {
        let grid = Self {
            t_end,
            nt,
            t0,
            nx,
            nz,
            z_max,
        };
        grid.validate()?;
        Ok(grid)
    }

    /// Default start-up time: one nominal step T/nt after zero.
    pub fn with_default_t0(t_end: f64, nt: usize, nx: usize, nz: usize, z_max: f64) -> Result<Self> {
        Self::new(t_end, nt, t_end / nt as f64, nx, nz, z_max)
    }

    /// Smallest signal bound keeping the conditional signal law's mass
    /// outside the box below 1e-4 for all t <= T: s_max T + 4 sigma sqrt(T).
    pub fn derive_z_max(s_max: f64, sigma: f64, t_end: f64) -> f64 {
        s_max.abs() * t_end + 4.0 * sigma * t_end.sqrt()
    }

    fn validate(&self) -> Result<()> {
        let fail = |field: &str, message: String| {
            Err(MfgError::Config {
                field: field.into(),
                message,
            })
        };
        if !(self.t_end > 0.0) {
            return fail("grid.t_end", format!("horizon must be positive, got {}", self.t_end));
        }
        if self.nt < 2 {
            return fail("grid.nt", format!("need at least 2 time steps, got {}", self.nt));
        }
        if !(self.t0 > 0.0 && self.t0 < self.t_end) {
            return fail(
                "grid.t0",
                format!("start-up time must satisfy 0 < t0 < T, got {}", self.t0),
            );
        }
        if self.nx < 8 {
            return fail("grid.nx", format!("need at least 8 torus nodes, got {}", self.nx));
        }
        if self.nz < 8 {
            return fail("grid.nz", format!("need at least 8 signal cells, got {}", self.nz));
        }
        if !(self.z_max > 0.0) {
            return fail("grid.z_max", format!("signal bound must be positive, got {}", self.z_max));
        }
        Ok(())
    }

    /// Check the truncation rule against the largest quadrature node.
    pub fn validate_signal_bound(&self, s_max: f64, sigma: f64) -> Result<()> {
        let needed = Self::derive_z_max(s_max, sigma, self.t_end);
        if self.z_max + 1e-12 < needed {
            return Err(MfgError::Config {
                field: "grid.z_max".into(),
                message: format!(
                    "z_max = {} leaves non-negligible signal mass outside the box; need at least {needed:.4}",
                    self.z_max
                ),
            });
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        (self.t_end - self.t0) / self.nt as f64
    }

    pub fn dx(&self) -> f64 {
        1.0 / self.nx as f64
    }

    pub fn dz(&self) -> f64 {
        2.0 * self.z_max / self.nz as f64
    }

    /// Time of slice k, k = 0..=nt.
    pub fn time(&self, k: usize) -> f64 {
        self.t0 + self.dt() * k as f64
    }

    pub fn n_slices(&self) -> usize {
        self.nt + 1
    }

    pub fn x(&self, i: usize) -> f64 {
        i as f64 * self.dx()
    }

    pub fn z(&self, j: usize) -> f64 {
        -self.z_max + (j as f64 + 0.5) * self.dz()
    }

    pub fn x_nodes(&self) -> Vec<f64> {
        (0..self.nx).map(|i| self.x(i)).collect()
    }

    pub fn z_nodes(&self) -> Vec<f64> {
        (0..self.nz).map(|j| self.z(j)).collect()
    }

    pub fn t_nodes(&self) -> Vec<f64> {
        (0..self.n_slices()).map(|k| self.time(k)).collect()
    }

    /// Nearest z cell index for a continuous signal value, clamped to the box.
    pub fn z_index_clamped(&self, z: f64) -> usize {
        let raw = ((z + self.z_max) / self.dz() - 0.5).round();
        raw.clamp(0.0, (self.nz - 1) as f64) as usize
    }
}

/// Torus distance on [0,1): min(|a-b|, 1-|a-b|).
pub fn torus_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(1.0);
    d.min(1.0 - d)
}

/// Wrap a position onto [0,1).
pub fn wrap_position(x: f64) -> f64 {
    x.rem_euclid(1.0)
}
