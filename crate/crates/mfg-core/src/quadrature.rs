//! Gauss-Hermite discretization of the standard normal state prior, plus the
//! Bayes reweighting that turns the fixed prior nodes into a discrete
//! posterior over states given a signal observation.
//!
//! The nodes stay fixed throughout a run so the state-indexed transport
//! solutions can be computed once per node; conditioning on (t, z) only
//! reweights them, which the Gaussian product identity makes exact up to
//! quadrature error.

use serde::{Deserialize, Serialize};

use crate::belief::BeliefKernel;
use crate::error::{MfgError, Result};

/// Nodes and weights integrating smooth functions against N(0,1).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StateQuadrature {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl StateQuadrature {
    /// Gauss-Hermite rule with `q` nodes, rescaled from weight exp(-u^2) to
    /// the standard normal density. Exact for polynomials up to degree 2q-1.
    pub fn gauss_hermite(q: usize) -> Result<Self> {
        if q < 2 {
            return Err(MfgError::Config {
                field: "solver.quadrature_nodes".into(),
                message: format!("need at least 2 state nodes, got {q}"),
            });
        }
        let (roots, weights) = hermite_rule(q);
        let sqrt2 = std::f64::consts::SQRT_2;
        let sqrt_pi = std::f64::consts::PI.sqrt();
        let nodes: Vec<f64> = roots.iter().map(|&u| sqrt2 * u).collect();
        let weights: Vec<f64> = weights.iter().map(|&w| w / sqrt_pi).collect();
        Ok(Self { nodes, weights })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn node(&self, q: usize) -> f64 {
        self.nodes[q]
    }

    pub fn weight(&self, q: usize) -> f64 {
        self.weights[q]
    }

    /// Largest node magnitude; drives the signal truncation bound.
    pub fn max_node(&self) -> f64 {
        self.nodes.iter().fold(0.0, |m, s| m.max(s.abs()))
    }

    /// Prior expectation of `f` over the state.
    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&s, &w)| w * f(s))
            .sum()
    }
}

/// Discrete posterior over the quadrature nodes given signal z at time t.
#[derive(Debug, Clone)]
pub struct PosteriorWeights {
    pub weights: Vec<f64>,
    /// True when the unnormalized weights all underflowed (signal far outside
    /// the truncation box) and the uniform fallback was substituted.
    pub used_fallback: bool,
}

/// Reweight the prior nodes by the conditional signal likelihood:
/// `w_q * pdf_{N(s_q t, sigma^2 t)}(z)`, normalized to sum 1.
///
/// Computed in log space; an all-underflow input falls back to uniform
/// weights with a diagnostic warning.
pub fn posterior_weights(
    quad: &StateQuadrature,
    kernel: &BeliefKernel,
    t: f64,
    z: f64,
) -> PosteriorWeights {
    debug_assert!(t > 0.0, "posterior reweighting needs t > 0");
    let n = quad.len();
    let mut log_w = Vec::with_capacity(n);
    for q in 0..n {
        let law = kernel.signal_law_conditional(t, quad.node(q));
        log_w.push(quad.weight(q).ln() + law.log_pdf(z));
    }
    let max = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        log::warn!(
            "posterior_weights: all weights underflowed at (t={t}, z={z}); using uniform fallback"
        );
        return PosteriorWeights {
            weights: vec![1.0 / n as f64; n],
            used_fallback: true,
        };
    }
    let mut weights: Vec<f64> = log_w.iter().map(|&lw| (lw - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= total;
    }
    PosteriorWeights {
        weights,
        used_fallback: false,
    }
}

/// Hermite nodes/weights for weight exp(-u^2) by Newton iteration on the
/// three-term recurrence (roots returned ascending).
fn hermite_rule(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut roots = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = (n + 1) / 2;
    let nf = n as f64;
    // pi^{-1/4}
    let pim4 = 0.751_125_544_464_942_5;

    let mut z = 0.0;
    for i in 0..m {
        // Initial guesses (Numerical Recipes): largest root first, then
        // step down from the previous one.
        z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.855_75 * (2.0 * nf + 1.0).powf(-1.0 / 6.0),
            1 => z - 1.14 * nf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * roots[n - 1],
            3 => 1.91 * z - 0.91 * roots[n - 2],
            _ => 2.0 * z - roots[n - i + 1],
        };
        let mut pp = 0.0;
        for _ in 0..100 {
            // Evaluate H_n (orthonormal form) and its derivative at z.
            let mut p1 = pim4;
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64 + 1.0;
                p1 = z * (2.0 / jf).sqrt() * p2 - ((jf - 1.0) / jf).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let dz = p1 / pp;
            z -= dz;
            if dz.abs() < 1e-15 {
                break;
            }
        }
        roots[n - 1 - i] = z;
        roots[i] = -z;
        weights[i] = 2.0 / (pp * pp);
        weights[n - 1 - i] = weights[i];
    }
    // Enforce exact symmetry for odd n: center root is 0.
    if n % 2 == 1 {
        roots[n / 2] = 0.0;
    }
    (roots, weights)
}
