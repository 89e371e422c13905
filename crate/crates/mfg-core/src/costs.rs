//! State-dependent cost models and their belief-expected versions.
//!
//! A model is the triple (C, F, G): flow control cost, flow interaction
//! cost, and terminal cost, each depending on the unknown state s. Agents
//! only ever see the expectations under their current posterior, assembled
//! here by reweighting the fixed state quadrature:
//!
//! ```text
//! expected_flow_cost(t,z,x)  = sum_q  w~_q(t,z) F(s_q, x, rho_{q,t})
//! ```
//!
//! The Hamiltonian is the control transform `H = sup_a { -a p - C~(a) }`.
//! Separable-quadratic models (`C = c(s,x) + a^2/2`) take the closed form
//! `H = p^2/2 - c~`; general strongly convex models go through a damped
//! Newton maximizer. Either way the optimal control is `-D_p H`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::belief::BeliefKernel;
use crate::density::PositionDensity;
use crate::error::{MfgError, Result};
use crate::grid::torus_distance;
use crate::quadrature::{posterior_weights, StateQuadrature};

/// Structural tag deciding the Hamiltonian evaluation path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CostStructure {
    /// C(s,x,a) = c(s,x) + |a|^2 / 2; closed-form Hamiltonian.
    SeparableQuadratic,
    /// Any strongly convex-in-control cost; Newton maximizer.
    General,
}

/// The cost triple of a game instance.
///
/// Implementations must keep `control_cost` strongly convex in the control,
/// uniformly over (s, x); [`validate_model`] spot-checks this at load time
/// for general models.
pub trait CostModel: Send + Sync {
    fn structure(&self) -> CostStructure;

    /// Flow control cost C(s, x, alpha).
    fn control_cost(&self, s: f64, x: f64, alpha: f64) -> f64;

    /// For separable-quadratic models, the control-free part c(s, x).
    fn control_cost_offset(&self, s: f64, x: f64) -> f64 {
        self.control_cost(s, x, 0.0)
    }

    /// Flow interaction cost F(s, x, rho).
    fn flow_cost(&self, s: f64, x: f64, rho: &PositionDensity) -> f64;

    /// Terminal cost G(s, x, rho).
    fn terminal_cost(&self, s: f64, x: f64, rho: &PositionDensity) -> f64;
}

pub type SharedCostModel = Arc<dyn CostModel>;

// ---------------------------------------------------------------------------
// Built-in catalog
// ---------------------------------------------------------------------------

/// Free parameters of the built-in models, deserialized from the config's
/// `[model.cost]` table.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CostParams {
    /// Overall weight on the state-tracking terms.
    #[serde(default = "default_weight")]
    pub weight: f64,
    /// Weight on the local crowding term of the congestion model.
    #[serde(default = "default_weight")]
    pub crowd_weight: f64,
}

fn default_weight() -> f64 {
    1.0
}

impl Default for CostParams {
    fn default() -> Self {
        Self {
            weight: 1.0,
            crowd_weight: 1.0,
        }
    }
}

/// Look up a built-in model by name.
///
/// Catalog: `zero`, `tracking`, `product_differentiation`, `crowd`,
/// `quartic_control`.
pub fn builtin(name: &str, params: &CostParams) -> Result<SharedCostModel> {
    match name {
        "zero" => Ok(Arc::new(ZeroCosts)),
        "tracking" => Ok(Arc::new(Tracking {
            weight: params.weight,
        })),
        "product_differentiation" => Ok(Arc::new(ProductDifferentiation {
            weight: params.weight,
        })),
        "crowd" => Ok(Arc::new(CrowdAversion {
            crowd_weight: params.crowd_weight,
            state_weight: params.weight,
        })),
        "quartic_control" => Ok(Arc::new(QuarticControl {
            weight: params.weight,
        })),
        _ => Err(MfgError::UnknownCostModel { name: name.into() }),
    }
}

/// Pure control penalty: C = a^2/2, F = G = 0. The value function vanishes.
pub struct ZeroCosts;

impl CostModel for ZeroCosts {
    fn structure(&self) -> CostStructure {
        CostStructure::SeparableQuadratic
    }
    fn control_cost(&self, _s: f64, _x: f64, alpha: f64) -> f64 {
        0.5 * alpha * alpha
    }
    fn control_cost_offset(&self, _s: f64, _x: f64) -> f64 {
        0.0
    }
    fn flow_cost(&self, _s: f64, _x: f64, _rho: &PositionDensity) -> f64 {
        0.0
    }
    fn terminal_cost(&self, _s: f64, _x: f64, _rho: &PositionDensity) -> f64 {
        0.0
    }
}

/// Uncoupled state tracking: terminal cost w * d(x, s)^2 with the torus
/// metric, no interaction through the population.
pub struct Tracking {
    pub weight: f64,
}

impl CostModel for Tracking {
    fn structure(&self) -> CostStructure {
        CostStructure::SeparableQuadratic
    }
    fn control_cost(&self, _s: f64, _x: f64, alpha: f64) -> f64 {
        0.5 * alpha * alpha
    }
    fn control_cost_offset(&self, _s: f64, _x: f64) -> f64 {
        0.0
    }
    fn flow_cost(&self, _s: f64, _x: f64, _rho: &PositionDensity) -> f64 {
        0.0
    }
    fn terminal_cost(&self, s: f64, x: f64, _rho: &PositionDensity) -> f64 {
        let d = torus_distance(x, s.rem_euclid(1.0));
        self.weight * d * d
    }
}

/// Terminal-coupling model: firms want the product near the ideal point s
/// but far from the competition,
/// `G = w * ( d(x,s)^2 - integral d(x,y)^2 rho(dy) )`, flow cost a^2/2.
///
/// States embed into the torus by reduction mod 1 since positions are
/// torus-valued while s is a real scalar.
pub struct ProductDifferentiation {
    pub weight: f64,
}

impl CostModel for ProductDifferentiation {
    fn structure(&self) -> CostStructure {
        CostStructure::SeparableQuadratic
    }
    fn control_cost(&self, _s: f64, _x: f64, alpha: f64) -> f64 {
        0.5 * alpha * alpha
    }
    fn control_cost_offset(&self, _s: f64, _x: f64) -> f64 {
        0.0
    }
    fn flow_cost(&self, _s: f64, _x: f64, _rho: &PositionDensity) -> f64 {
        0.0
    }
    fn terminal_cost(&self, s: f64, x: f64, rho: &PositionDensity) -> f64 {
        let s_torus = s.rem_euclid(1.0);
        let d = torus_distance(x, s_torus);
        let dx = rho.dx();
        let spread: f64 = rho
            .values()
            .iter()
            .enumerate()
            .map(|(i, &r)| {
                let y = i as f64 * dx;
                let dy = torus_distance(x, y);
                r * dy * dy
            })
            .sum::<f64>()
            * dx;
        self.weight * (d * d - spread)
    }
}

/// Congestion model with state tracking in the flow cost:
/// `F = w_c * rho(x) + w_s * d(x,s)^2`, G = 0.
///
/// The rho(x) term satisfies the state-wise monotonicity inequality (its
/// pair integral is a perfect square), so equilibria are unique.
pub struct CrowdAversion {
    pub crowd_weight: f64,
    pub state_weight: f64,
}

impl CostModel for CrowdAversion {
    fn structure(&self) -> CostStructure {
        CostStructure::SeparableQuadratic
    }
    fn control_cost(&self, _s: f64, _x: f64, alpha: f64) -> f64 {
        0.5 * alpha * alpha
    }
    fn control_cost_offset(&self, _s: f64, _x: f64) -> f64 {
        0.0
    }
    fn flow_cost(&self, s: f64, x: f64, rho: &PositionDensity) -> f64 {
        let dx = rho.dx();
        let i = ((x / dx).round() as usize) % rho.len();
        let d = torus_distance(x, s.rem_euclid(1.0));
        self.crowd_weight * rho.value(i) + self.state_weight * d * d
    }
    fn terminal_cost(&self, _s: f64, _x: f64, _rho: &PositionDensity) -> f64 {
        0.0
    }
}

/// General convex control cost `C = w * (a^4/4 + a^2/2)`; exercises the
/// Newton path of the Hamiltonian.
pub struct QuarticControl {
    pub weight: f64,
}

impl CostModel for QuarticControl {
    fn structure(&self) -> CostStructure {
        CostStructure::General
    }
    fn control_cost(&self, _s: f64, _x: f64, alpha: f64) -> f64 {
        self.weight * (0.25 * alpha.powi(4) + 0.5 * alpha * alpha)
    }
    fn flow_cost(&self, _s: f64, _x: f64, _rho: &PositionDensity) -> f64 {
        0.0
    }
    fn terminal_cost(&self, _s: f64, _x: f64, _rho: &PositionDensity) -> f64 {
        0.0
    }
}

// ---------------------------------------------------------------------------
// Load-time validation
// ---------------------------------------------------------------------------

/// Numerically spot-check strong convexity of the control cost for general
/// models and estimate the convexity constant (used for the Lipschitz bound
/// of the optimal control in p).
///
/// Returns the estimated strong convexity constant.
pub fn validate_model(model: &dyn CostModel, name: &str) -> Result<f64> {
    if model.structure() == CostStructure::SeparableQuadratic {
        return Ok(1.0);
    }
    let mut min_curvature = f64::INFINITY;
    let h = 1e-4;
    for &s in &[-2.0, 0.0, 1.5] {
        for &x in &[0.0, 0.3, 0.7] {
            for k in 0..21 {
                let a = -5.0 + 0.5 * k as f64;
                let c0 = model.control_cost(s, x, a - h);
                let c1 = model.control_cost(s, x, a);
                let c2 = model.control_cost(s, x, a + h);
                let curv = (c2 - 2.0 * c1 + c0) / (h * h);
                min_curvature = min_curvature.min(curv);
            }
        }
    }
    if !(min_curvature > 1e-8) {
        return Err(MfgError::CostModelInvalid {
            name: name.into(),
            message: format!(
                "control cost is not strongly convex (min sampled curvature {min_curvature:.3e})"
            ),
        });
    }
    Ok(min_curvature)
}

// ---------------------------------------------------------------------------
// Belief-expected costs
// ---------------------------------------------------------------------------

/// Expected flow interaction cost at (t, z, x) against the per-state
/// position densities `rho_family` (one density per quadrature node).
pub fn expected_flow_cost(
    model: &dyn CostModel,
    quad: &StateQuadrature,
    kernel: &BeliefKernel,
    t: f64,
    z: f64,
    x: f64,
    rho_family: &[PositionDensity],
) -> Result<f64> {
    check_family_len(quad, rho_family)?;
    let pw = posterior_weights(quad, kernel, t, z);
    Ok(quad
        .nodes()
        .iter()
        .zip(pw.weights.iter())
        .zip(rho_family.iter())
        .map(|((&s, &w), rho)| w * model.flow_cost(s, x, rho))
        .sum())
}

/// Expected terminal cost at (z, x) with posterior weights taken at the
/// horizon time.
pub fn expected_terminal_cost(
    model: &dyn CostModel,
    quad: &StateQuadrature,
    kernel: &BeliefKernel,
    t_end: f64,
    z: f64,
    x: f64,
    rho_family_at_end: &[PositionDensity],
) -> Result<f64> {
    check_family_len(quad, rho_family_at_end)?;
    let pw = posterior_weights(quad, kernel, t_end, z);
    Ok(quad
        .nodes()
        .iter()
        .zip(pw.weights.iter())
        .zip(rho_family_at_end.iter())
        .map(|((&s, &w), rho)| w * model.terminal_cost(s, x, rho))
        .sum())
}

/// Expected control cost at a fixed control.
pub fn expected_control_cost(
    model: &dyn CostModel,
    quad: &StateQuadrature,
    kernel: &BeliefKernel,
    t: f64,
    z: f64,
    x: f64,
    alpha: f64,
) -> f64 {
    let pw = posterior_weights(quad, kernel, t, z);
    quad.nodes()
        .iter()
        .zip(pw.weights.iter())
        .map(|(&s, &w)| w * model.control_cost(s, x, alpha))
        .sum()
}

fn check_family_len(quad: &StateQuadrature, family: &[PositionDensity]) -> Result<()> {
    if family.len() != quad.len() {
        return Err(MfgError::LengthMismatch {
            context: "state-indexed density family",
            expected: quad.len(),
            actual: family.len(),
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Hamiltonian
// ---------------------------------------------------------------------------

/// Value and maximizer of `sup_a { -a p - C~(t,z,x,a) }`.
#[derive(Debug, Clone, Copy)]
pub struct HamiltonianValue {
    pub value: f64,
    pub optimal_control: f64,
}

/// Hamiltonian evaluator bound to a model, quadrature, and kernel.
pub struct Hamiltonian<'a> {
    model: &'a dyn CostModel,
    quad: &'a StateQuadrature,
    kernel: &'a BeliefKernel,
}

impl<'a> Hamiltonian<'a> {
    pub fn new(
        model: &'a dyn CostModel,
        quad: &'a StateQuadrature,
        kernel: &'a BeliefKernel,
    ) -> Self {
        Self {
            model,
            quad,
            kernel,
        }
    }

    /// Evaluate H and the maximizing control at costate p.
    pub fn evaluate(&self, t: f64, z: f64, x: f64, p: f64) -> Result<HamiltonianValue> {
        let pw = posterior_weights(self.quad, self.kernel, t, z);
        hamiltonian_with_weights(self.model, self.quad.nodes(), &pw.weights, t, z, x, p)
    }

    /// Optimal control `-D_p H` at costate p.
    pub fn optimal_control(&self, t: f64, z: f64, x: f64, p: f64) -> Result<f64> {
        match self.model.structure() {
            CostStructure::SeparableQuadratic => Ok(-p),
            CostStructure::General => Ok(self.evaluate(t, z, x, p)?.optimal_control),
        }
    }

    /// `D_p H = -optimal_control`.
    pub fn p_derivative(&self, t: f64, z: f64, x: f64, p: f64) -> Result<f64> {
        Ok(-self.optimal_control(t, z, x, p)?)
    }
}

/// Hamiltonian evaluation against precomputed posterior weights.
///
/// The backward sweep shares one weight vector across a whole (t, z) grid
/// line, so this is the hot-path entry; [`Hamiltonian::evaluate`] wraps it.
pub fn hamiltonian_with_weights(
    model: &dyn CostModel,
    nodes: &[f64],
    weights: &[f64],
    t: f64,
    z: f64,
    x: f64,
    p: f64,
) -> Result<HamiltonianValue> {
    match model.structure() {
        CostStructure::SeparableQuadratic => {
            let offset: f64 = nodes
                .iter()
                .zip(weights.iter())
                .map(|(&s, &w)| w * model.control_cost_offset(s, x))
                .sum();
            Ok(HamiltonianValue {
                value: 0.5 * p * p - offset,
                optimal_control: -p,
            })
        }
        CostStructure::General => {
            newton_maximize(model, nodes, weights, t, z, x, p)
        }
    }
}

/// Damped Newton on the stationarity condition `p + C~'(a) = 0`.
fn newton_maximize(
    model: &dyn CostModel,
    nodes: &[f64],
    weights: &[f64],
    t: f64,
    z: f64,
    x: f64,
    p: f64,
) -> Result<HamiltonianValue> {
    let cost = |a: f64| -> f64 {
        nodes
            .iter()
            .zip(weights.iter())
            .map(|(&s, &w)| w * model.control_cost(s, x, a))
            .sum()
    };
    let h = 1e-6;
    let grad = |a: f64| (cost(a + h) - cost(a - h)) / (2.0 * h);
    let objective = |a: f64| -a * p - cost(a);

    let mut a = -p; // exact for quadratic costs, a warm start otherwise
    let mut g = p + grad(a);
    for _ in 0..100 {
        if g.abs() < 1e-10 {
            return Ok(HamiltonianValue {
                value: objective(a),
                optimal_control: a,
            });
        }
        let curv = ((cost(a + h) - 2.0 * cost(a) + cost(a - h)) / (h * h)).max(1e-8);
        let mut step = -g / curv;
        // Backtrack until the strictly concave objective improves.
        let f0 = objective(a);
        let mut trial = a + step;
        let mut backtracks = 0;
        while objective(trial) < f0 && backtracks < 60 {
            step *= 0.5;
            trial = a + step;
            backtracks += 1;
        }
        a = trial;
        g = p + grad(a);
    }
    if g.abs() < 1e-8 {
        // Flat-gradient finish: accept slightly looser stationarity.
        return Ok(HamiltonianValue {
            value: objective(a),
            optimal_control: a,
        });
    }
    Err(MfgError::HamiltonianNonConvergence { t, z, x, p })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn setup() -> (StateQuadrature, BeliefKernel) {
        (
            StateQuadrature::gauss_hermite(16).unwrap(),
            BeliefKernel::new(1.0).unwrap(),
        )
    }

    struct StateLinearFlow;
    impl CostModel for StateLinearFlow {
        fn structure(&self) -> CostStructure {
            CostStructure::SeparableQuadratic
        }
        fn control_cost(&self, _s: f64, _x: f64, alpha: f64) -> f64 {
            0.5 * alpha * alpha
        }
        fn control_cost_offset(&self, _s: f64, _x: f64) -> f64 {
            0.0
        }
        fn flow_cost(&self, s: f64, _x: f64, _rho: &PositionDensity) -> f64 {
            s
        }
        fn terminal_cost(&self, s: f64, _x: f64, _rho: &PositionDensity) -> f64 {
            s * s * s // odd in s
        }
    }

    struct StateSquareFlow;
    impl CostModel for StateSquareFlow {
        fn structure(&self) -> CostStructure {
            CostStructure::SeparableQuadratic
        }
        fn control_cost(&self, _s: f64, _x: f64, alpha: f64) -> f64 {
            0.5 * alpha * alpha
        }
        fn flow_cost(&self, s: f64, _x: f64, _rho: &PositionDensity) -> f64 {
            s * s
        }
        fn terminal_cost(&self, _s: f64, _x: f64, _rho: &PositionDensity) -> f64 {
            0.0
        }
    }

    fn uniform_family(q: usize, nx: usize) -> Vec<PositionDensity> {
        (0..q).map(|_| PositionDensity::uniform(nx)).collect()
    }

    #[test]
    fn state_free_costs_pass_through_exactly() {
        let (quad, kernel) = setup();
        struct Fixed;
        impl CostModel for Fixed {
            fn structure(&self) -> CostStructure {
                CostStructure::SeparableQuadratic
            }
            fn control_cost(&self, _s: f64, _x: f64, a: f64) -> f64 {
                0.5 * a * a
            }
            fn flow_cost(&self, _s: f64, x: f64, _rho: &PositionDensity) -> f64 {
                1.5 + x
            }
            fn terminal_cost(&self, _s: f64, x: f64, _rho: &PositionDensity) -> f64 {
                1.5 + x
            }
        }
        let family = uniform_family(quad.len(), 32);
        let f = expected_flow_cost(&Fixed, &quad, &kernel, 0.5, 0.7, 0.25, &family).unwrap();
        assert_abs_diff_eq!(f, 1.75, epsilon = 1e-14);
        let g = expected_terminal_cost(&Fixed, &quad, &kernel, 1.0, -0.4, 0.25, &family).unwrap();
        assert_abs_diff_eq!(g, 1.75, epsilon = 1e-14);
    }

    #[test]
    fn state_linear_flow_recovers_posterior_mean() {
        let (quad, kernel) = setup();
        let family = uniform_family(quad.len(), 32);
        // (sigma=1, t=1, z=2): posterior mean = 1.0.
        let f =
            expected_flow_cost(&StateLinearFlow, &quad, &kernel, 1.0, 2.0, 0.0, &family).unwrap();
        assert_abs_diff_eq!(f, 1.0, epsilon = 1e-6);
    }

    #[test]
    fn state_square_flow_recovers_second_moment() {
        let quad = StateQuadrature::gauss_hermite(32).unwrap();
        let kernel = BeliefKernel::new(1.0).unwrap();
        let family = uniform_family(quad.len(), 32);
        // (sigma=1, t=1, z=0): E[S^2 | z] = var = 0.5.
        let f =
            expected_flow_cost(&StateSquareFlow, &quad, &kernel, 1.0, 0.0, 0.0, &family).unwrap();
        assert_abs_diff_eq!(f, 0.5, epsilon = 1e-3);
    }

    #[test]
    fn odd_terminal_cost_cancels_at_zero_signal() {
        let (quad, kernel) = setup();
        let family = uniform_family(quad.len(), 32);
        let g = expected_terminal_cost(&StateLinearFlow, &quad, &kernel, 1.0, 0.0, 0.5, &family)
            .unwrap();
        assert!(g.abs() < 1e-12);
    }

    #[test]
    fn product_differentiation_terminal_against_quadrature_oracle() {
        let (quad, kernel) = setup();
        let nx = 64;
        let family = uniform_family(quad.len(), nx);
        let model = ProductDifferentiation { weight: 1.0 };
        let (t, z, x) = (1.0, 0.8, 0.3);
        let got = expected_terminal_cost(&model, &quad, &kernel, t, z, x, &family).unwrap();

        // Direct quadrature: sum_q w~_q d(x, s_q)^2 minus the uniform spread.
        let pw = posterior_weights(&quad, &kernel, t, z);
        let tracking: f64 = quad
            .nodes()
            .iter()
            .zip(pw.weights.iter())
            .map(|(&s, &w)| {
                let d = torus_distance(x, s.rem_euclid(1.0));
                w * d * d
            })
            .sum();
        let dx = 1.0 / nx as f64;
        let spread: f64 = (0..nx)
            .map(|i| {
                let d = torus_distance(x, i as f64 * dx);
                d * d * dx
            })
            .sum();
        assert_abs_diff_eq!(got, tracking - spread, epsilon = 1e-12);
    }

    #[test]
    fn family_length_mismatch_rejected() {
        let (quad, kernel) = setup();
        let family = uniform_family(quad.len() - 1, 32);
        let err = expected_flow_cost(&ZeroCosts, &quad, &kernel, 0.5, 0.0, 0.0, &family);
        assert!(matches!(err, Err(MfgError::LengthMismatch { .. })));
    }

    #[test]
    fn quadratic_hamiltonian_closed_form() {
        let (quad, kernel) = setup();
        let ham = Hamiltonian::new(&ZeroCosts, &quad, &kernel);
        let hv = ham.evaluate(0.5, 0.0, 0.0, 2.0).unwrap();
        assert_abs_diff_eq!(hv.value, 2.0, epsilon = 1e-14);
        assert_abs_diff_eq!(hv.optimal_control, -2.0, epsilon = 1e-14);

        let hv0 = ham.evaluate(0.5, 0.0, 0.0, 0.0).unwrap();
        assert_abs_diff_eq!(hv0.value, 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(hv0.optimal_control, 0.0, epsilon = 1e-14);
    }

    #[test]
    fn quadratic_hamiltonian_with_offset() {
        // C = a^2/2 + c(s,x) with c = s^2: H(p=0) = -E[s^2|z].
        let quad = StateQuadrature::gauss_hermite(32).unwrap();
        let kernel = BeliefKernel::new(1.0).unwrap();
        struct Offset;
        impl CostModel for Offset {
            fn structure(&self) -> CostStructure {
                CostStructure::SeparableQuadratic
            }
            fn control_cost(&self, s: f64, _x: f64, a: f64) -> f64 {
                s * s + 0.5 * a * a
            }
            fn control_cost_offset(&self, s: f64, _x: f64) -> f64 {
                s * s
            }
            fn flow_cost(&self, _s: f64, _x: f64, _r: &PositionDensity) -> f64 {
                0.0
            }
            fn terminal_cost(&self, _s: f64, _x: f64, _r: &PositionDensity) -> f64 {
                0.0
            }
        }
        let ham = Hamiltonian::new(&Offset, &quad, &kernel);
        let hv = ham.evaluate(1.0, 0.0, 0.0, 0.0).unwrap();
        assert_abs_diff_eq!(hv.value, -0.5, epsilon = 1e-3);
        assert_abs_diff_eq!(hv.optimal_control, 0.0, epsilon = 1e-14);
    }

    #[test]
    fn general_hamiltonian_matches_grid_search() {
        let (quad, kernel) = setup();
        let model = QuarticControl { weight: 1.0 };
        let ham = Hamiltonian::new(&model, &quad, &kernel);
        let p = 1.0;
        let hv = ham.evaluate(0.5, 0.0, 0.0, p).unwrap();

        // Brute-force grid search over alpha in [-10, 10], step 1e-5.
        let mut best = f64::NEG_INFINITY;
        let mut best_a = 0.0;
        let n = 2_000_000;
        for k in 0..=n {
            let a = -10.0 + 20.0 * k as f64 / n as f64;
            let v = -a * p - (0.25 * a.powi(4) + 0.5 * a * a);
            if v > best {
                best = v;
                best_a = a;
            }
        }
        assert_abs_diff_eq!(hv.value, best, epsilon = 1e-8);
        assert_abs_diff_eq!(hv.optimal_control, best_a, epsilon = 1e-4);
    }

    #[test]
    fn p_derivative_matches_finite_difference() {
        let (quad, kernel) = setup();
        let model = QuarticControl { weight: 1.0 };
        let ham = Hamiltonian::new(&model, &quad, &kernel);
        for &p in &[-2.0, -0.5, 0.0, 1.0, 3.0] {
            let dp = ham.p_derivative(0.5, 0.2, 0.1, p).unwrap();
            let h = 1e-5;
            let hp = ham.evaluate(0.5, 0.2, 0.1, p + h).unwrap().value;
            let hm = ham.evaluate(0.5, 0.2, 0.1, p - h).unwrap().value;
            let fd = (hp - hm) / (2.0 * h);
            assert_abs_diff_eq!(dp, fd, epsilon = 1e-6);
        }
        // Quadratic case: D_p H = p.
        let hamq = Hamiltonian::new(&ZeroCosts, &quad, &kernel);
        assert_abs_diff_eq!(
            hamq.p_derivative(0.5, 0.0, 0.0, 3.0).unwrap(),
            3.0,
            epsilon = 1e-14
        );
        assert_abs_diff_eq!(
            hamq.p_derivative(0.5, 0.0, 0.0, 0.0).unwrap(),
            0.0,
            epsilon = 1e-14
        );
    }

    #[test]
    fn hamiltonian_convex_in_p() {
        let (quad, kernel) = setup();
        let model = QuarticControl { weight: 1.0 };
        let ham = Hamiltonian::new(&model, &quad, &kernel);
        let eval = |p: f64| ham.evaluate(0.4, 0.1, 0.6, p).unwrap().value;
        for k in 0..20 {
            let p1 = -3.0 + 0.11 * k as f64;
            let p2 = p1 + 1.7;
            let mid = 0.5 * (p1 + p2);
            assert!(eval(mid) <= 0.5 * (eval(p1) + eval(p2)) + 1e-9);
        }
    }

    #[test]
    fn control_lipschitz_in_p() {
        // |D_p H(p1) - D_p H(p2)| <= |p1 - p2| / (strong convexity constant).
        let (quad, kernel) = setup();
        let model = QuarticControl { weight: 1.0 };
        let m = validate_model(&model, "quartic_control").unwrap();
        let ham = Hamiltonian::new(&model, &quad, &kernel);
        let mut prev: Option<(f64, f64)> = None;
        for k in 0..25 {
            let p = -3.0 + 0.25 * k as f64;
            let dp = ham.p_derivative(0.3, 0.0, 0.0, p).unwrap();
            if let Some((p0, dp0)) = prev {
                assert!((dp - dp0).abs() <= (p - p0).abs() / m + 1e-6);
            }
            prev = Some((p, dp));
        }
    }

    #[test]
    fn envelope_residual_small() {
        let (quad, kernel) = setup();
        let model = QuarticControl { weight: 1.0 };
        let ham = Hamiltonian::new(&model, &quad, &kernel);
        for &p in &[-1.5, 0.3, 2.0] {
            let hv = ham.evaluate(0.7, -0.2, 0.4, p).unwrap();
            let a = hv.optimal_control;
            let direct = -a * p - expected_control_cost(&model, &quad, &kernel, 0.7, -0.2, 0.4, a);
            assert!((hv.value - direct).abs() < 1e-9);
        }
    }

    #[test]
    fn validation_rejects_concave_cost() {
        struct Concave;
        impl CostModel for Concave {
            fn structure(&self) -> CostStructure {
                CostStructure::General
            }
            fn control_cost(&self, _s: f64, _x: f64, a: f64) -> f64 {
                -(a * a)
            }
            fn flow_cost(&self, _s: f64, _x: f64, _r: &PositionDensity) -> f64 {
                0.0
            }
            fn terminal_cost(&self, _s: f64, _x: f64, _r: &PositionDensity) -> f64 {
                0.0
            }
        }
        assert!(validate_model(&Concave, "concave").is_err());
        assert!(validate_model(&ZeroCosts, "zero").unwrap() == 1.0);
        assert!(validate_model(&QuarticControl { weight: 1.0 }, "quartic").unwrap() >= 0.9);
    }

    #[test]
    fn catalog_lookup() {
        let params = CostParams::default();
        for name in [
            "zero",
            "tracking",
            "product_differentiation",
            "crowd",
            "quartic_control",
        ] {
            assert!(builtin(name, &params).is_ok(), "{name} missing");
        }
        assert!(matches!(
            builtin("nope", &params),
            Err(MfgError::UnknownCostModel { .. })
        ));
    }
}
