//! Probability densities over the torus position grid.

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::error::{MfgError, Result};
use crate::grid::Grid;

/// Density over the x-grid: non-negative values summing (times dx) to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionDensity {
    values: Array1<f64>,
    dx: f64,
}

impl PositionDensity {
    /// Validate and normalize raw grid values into a density.
    pub fn from_values(values: Array1<f64>, dx: f64) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(MfgError::Config {
                field: "density".into(),
                message: "density values must be finite and non-negative".into(),
            });
        }
        let mass: f64 = values.sum() * dx;
        if mass <= 0.0 {
            return Err(MfgError::Config {
                field: "density".into(),
                message: "density has zero mass".into(),
            });
        }
        Ok(Self {
            values: values / mass,
            dx,
        })
    }

    pub fn uniform(nx: usize) -> Self {
        Self {
            values: Array1::from_elem(nx, 1.0),
            dx: 1.0 / nx as f64,
        }
    }

    /// Wrapped-Gaussian bump centered at `center` with standard deviation
    /// `width`, normalized on the grid.
    pub fn bump(grid: &Grid, center: f64, width: f64) -> Result<Self> {
        if !(width > 0.0) {
            return Err(MfgError::Config {
                field: "model.initial_density.width".into(),
                message: format!("bump width must be positive, got {width}"),
            });
        }
        let mut values = Array1::zeros(grid.nx);
        for i in 0..grid.nx {
            values[i] = wrapped_gaussian(grid.x(i), center, width);
        }
        Self::from_values(values, grid.dx())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn dx(&self) -> f64 {
        self.dx
    }

    pub fn values(&self) -> &Array1<f64> {
        &self.values
    }

    pub fn value(&self, i: usize) -> f64 {
        self.values[i]
    }

    /// Total mass; 1 up to roundoff by construction.
    pub fn mass(&self) -> f64 {
        self.values.sum() * self.dx
    }

    /// L1 distance to another density on the same grid.
    pub fn l1_distance(&self, other: &Self) -> f64 {
        debug_assert_eq!(self.len(), other.len());
        self.values
            .iter()
            .zip(other.values.iter())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            * self.dx
    }
}

/// Initial position distribution named in run configs.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitialDensity {
    Uniform,
    Bump { center: f64, width: f64 },
}

impl Default for InitialDensity {
    fn default() -> Self {
        InitialDensity::Uniform
    }
}

impl InitialDensity {
    pub fn build(&self, grid: &Grid) -> Result<PositionDensity> {
        match *self {
            InitialDensity::Uniform => Ok(PositionDensity::uniform(grid.nx)),
            InitialDensity::Bump { center, width } => PositionDensity::bump(grid, center, width),
        }
    }
}

/// Time-indexed family of position densities per state-quadrature node: the
/// candidate "position distribution" input of the equilibrium fixed-point
/// map. `densities[q][k]` is the density for state node q at time slice k.
#[derive(Debug, Clone)]
pub struct PositionFlow {
    densities: Vec<Vec<PositionDensity>>,
}

impl PositionFlow {
    pub fn new(densities: Vec<Vec<PositionDensity>>) -> Result<Self> {
        if densities.is_empty() || densities.iter().any(|per_t| per_t.len() != densities[0].len())
        {
            return Err(MfgError::Config {
                field: "flow".into(),
                message: "flow must hold the same number of time slices per state node".into(),
            });
        }
        Ok(Self { densities })
    }

    /// Constant-in-time flow repeating `rho` at every (node, slice).
    pub fn constant(rho: &PositionDensity, n_states: usize, n_slices: usize) -> Self {
        Self {
            densities: vec![vec![rho.clone(); n_slices]; n_states],
        }
    }

    pub fn uniform(n_states: usize, n_slices: usize, nx: usize) -> Self {
        Self::constant(&PositionDensity::uniform(nx), n_states, n_slices)
    }

    pub fn n_states(&self) -> usize {
        self.densities.len()
    }

    pub fn n_slices(&self) -> usize {
        self.densities[0].len()
    }

    pub fn at(&self, state: usize, slice: usize) -> &PositionDensity {
        &self.densities[state][slice]
    }

    /// All state-node densities at one time slice, cloned into a family
    /// vector (the layout the expected-cost routines take).
    pub fn slice_family(&self, slice: usize) -> Vec<PositionDensity> {
        self.densities.iter().map(|per_t| per_t[slice].clone()).collect()
    }

    /// Convex combination `(1 - delta) self + delta other`, slice by slice.
    pub fn blend(&self, other: &Self, delta: f64) -> Result<Self> {
        let densities = self
            .densities
            .iter()
            .zip(&other.densities)
            .map(|(a_t, b_t)| {
                a_t.iter()
                    .zip(b_t)
                    .map(|(a, b)| {
                        let vals = a.values() * (1.0 - delta) + b.values() * delta;
                        PositionDensity::from_values(vals, a.dx())
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        PositionFlow::new(densities)
    }
}

/// Wrapped normal density on the unit torus (truncated at 5 images).
pub fn wrapped_gaussian(x: f64, center: f64, std_dev: f64) -> f64 {
    let two_var = 2.0 * std_dev * std_dev;
    let norm = 1.0 / (std_dev * (2.0 * std::f64::consts::PI).sqrt());
    let base = x - center;
    let mut total = 0.0;
    for k in -5..=5 {
        let d = base + k as f64;
        total += (-d * d / two_var).exp();
    }
    norm * total
}
