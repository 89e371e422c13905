//! Fixed-point computation of the game equilibrium.
//!
//! A candidate position flow (one density per state node and time slice)
//! induces belief-expected costs; solving the backward equation against
//! them, extracting the control, running the factor-density transport, and
//! taking state-conditional position marginals yields the population's
//! response flow. Equilibria are the fixed points of that map.
//!
//! The iteration is damped Picard: `flow <- (1-delta_k) flow + delta_k
//! response`, with either a fixed step or the averaging schedule
//! `delta_k = 1/(k+1)`. Raw iteration can cycle; averaging is the standard
//! convergent heuristic for monotone couplings. Convergence is declared on
//! the undamped fixed-point residual `metric(response(flow), flow)` - the
//! successive-iterate distance shrinks with the step size under averaging
//! and would stop too early. Non-convergence at the iteration cap is a
//! flagged result, not an error.
//!
//! The flow metric is the largest 1-D circular Wasserstein-1 distance over
//! all (state node, slice) pairs, computed through the median of the
//! cumulative differences.

use serde::Serialize;

use crate::costs::{validate_model, SharedCostModel};
use crate::density::{PositionDensity, PositionFlow};
use crate::dynamics::Dynamics;
use crate::error::{MfgError, Result};
use crate::fp::{position_marginal_factorized, solve_tau, FactorDensity};
use crate::grid::Grid;
use crate::hjb::{extract_control, solve_hjb, ControlField, ValueField};
use crate::quadrature::StateQuadrature;

/// A complete game specification: discretization, dynamics, state prior
/// quadrature, cost model, and initial position density.
pub struct MfgProblem {
    pub grid: Grid,
    pub dynamics: Dynamics,
    pub quadrature: StateQuadrature,
    pub model: SharedCostModel,
    pub initial_density: PositionDensity,
}

impl MfgProblem {
    /// Validate cross-field consistency (signal box vs quadrature reach,
    /// cost-model convexity).
    pub fn validate(&self, model_name: &str) -> Result<()> {
        self.grid
            .validate_signal_bound(self.quadrature.max_node(), self.dynamics.kernel.sigma())?;
        validate_model(self.model.as_ref(), model_name)?;
        Ok(())
    }

    /// Flow holding the initial density at every (state, slice).
    pub fn resting_flow(&self) -> PositionFlow {
        PositionFlow::constant(
            &self.initial_density,
            self.quadrature.len(),
            self.grid.n_slices(),
        )
    }
}

/// Damping schedule of the Picard iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum Damping {
    /// delta_k = 1/(k+1): averaged (fictitious-play style) updates.
    FictitiousPlay,
    /// Constant step in (0, 1].
    Fixed(f64),
}

impl Damping {
    fn step(&self, k: usize) -> f64 {
        match *self {
            Damping::FictitiousPlay => 1.0 / (k as f64 + 1.0),
            Damping::Fixed(delta) => delta,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct EquilibriumOptions {
    pub damping: Damping,
    /// Fixed-point residual tolerance in the flow metric.
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for EquilibriumOptions {
    fn default() -> Self {
        Self {
            damping: Damping::FictitiousPlay,
            tolerance: 1e-4,
            max_iterations: 200,
        }
    }
}

/// Pieces produced while evaluating the response map at a flow.
pub struct ResponseParts {
    pub value: ValueField,
    pub control: ControlField,
    pub factor: FactorDensity,
}

/// One application of the fixed-point map: backward solve against the flow,
/// control extraction, factor transport, state-conditional marginals.
pub fn population_response(
    problem: &MfgProblem,
    flow: &PositionFlow,
) -> Result<(PositionFlow, ResponseParts)> {
    let grid = &problem.grid;
    let value = solve_hjb(
        grid,
        &problem.dynamics,
        &problem.quadrature,
        problem.model.as_ref(),
        flow,
    )?;
    let control = extract_control(&value, &problem.dynamics, &problem.quadrature, problem.model.as_ref())?;
    let factor = solve_tau(grid, &problem.dynamics, &control, &problem.initial_density)?;

    let mut densities = Vec::with_capacity(problem.quadrature.len());
    for q in 0..problem.quadrature.len() {
        let s = problem.quadrature.node(q);
        let mut per_t = Vec::with_capacity(grid.n_slices());
        for k in 0..grid.n_slices() {
            let (rho, _renorm) =
                position_marginal_factorized(&factor, &problem.dynamics.kernel, s, k)?;
            per_t.push(rho);
        }
        densities.push(per_t);
    }
    let response = PositionFlow::new(densities)?;
    Ok((
        response,
        ResponseParts {
            value,
            control,
            factor,
        },
    ))
}

/// Largest circular Wasserstein-1 distance over all (state, slice) pairs.
pub fn flow_metric(a: &PositionFlow, b: &PositionFlow) -> Result<f64> {
    if a.n_states() != b.n_states() || a.n_slices() != b.n_slices() {
        return Err(MfgError::LengthMismatch {
            context: "flow metric operands",
            expected: a.n_states() * a.n_slices(),
            actual: b.n_states() * b.n_slices(),
        });
    }
    let mut worst: f64 = 0.0;
    for q in 0..a.n_states() {
        for k in 0..a.n_slices() {
            worst = worst.max(circular_w1(a.at(q, k), b.at(q, k)));
        }
    }
    Ok(worst)
}

/// Wasserstein-1 distance between densities on the unit circle: the minimal
/// over rotations of the integrated |CDF difference|, attained at the median
/// of the cumulative differences.
pub fn circular_w1(a: &PositionDensity, b: &PositionDensity) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    let dx = a.dx();
    let mut cum = Vec::with_capacity(n);
    let mut acc = 0.0;
    for i in 0..n {
        acc += (a.value(i) - b.value(i)) * dx;
        cum.push(acc);
    }
    let mut sorted = cum.clone();
    sorted.sort_by(|p, q| p.partial_cmp(q).unwrap());
    let median = sorted[n / 2];
    cum.iter().map(|d| (d - median).abs()).sum::<f64>() * dx
}

/// Empirical regularity constants of a flow: largest ratios
/// `W1(mu(s,t), mu(s,t')) / sqrt(|t-t'|)` over adjacent slices and
/// `W1(mu(s,t), mu(s',t)) / sqrt(|s-s'|)` over adjacent state nodes.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct HolderReport {
    pub time_constant: f64,
    pub state_constant: f64,
}

pub fn holder_diagnostics(
    flow: &PositionFlow,
    quad: &StateQuadrature,
    grid: &Grid,
) -> HolderReport {
    let sqrt_dt = grid.dt().sqrt();
    let mut time_constant: f64 = 0.0;
    for q in 0..flow.n_states() {
        for k in 0..flow.n_slices() - 1 {
            let w1 = circular_w1(flow.at(q, k), flow.at(q, k + 1));
            time_constant = time_constant.max(w1 / sqrt_dt);
        }
    }
    let mut state_constant: f64 = 0.0;
    for q in 0..flow.n_states().saturating_sub(1) {
        let gap = (quad.node(q + 1) - quad.node(q)).abs().sqrt();
        for k in 0..flow.n_slices() {
            let w1 = circular_w1(flow.at(q, k), flow.at(q + 1, k));
            state_constant = state_constant.max(w1 / gap);
        }
    }
    HolderReport {
        time_constant,
        state_constant,
    }
}

/// Result of the damped fixed-point iteration.
pub struct EquilibriumResult {
    pub flow: PositionFlow,
    pub value: ValueField,
    pub control: ControlField,
    pub factor: FactorDensity,
    pub converged: bool,
    /// Damped updates performed before the residual fell under tolerance.
    pub iterations: usize,
    /// Fixed-point residuals per evaluation of the response map.
    pub residual_history: Vec<f64>,
    /// metric(response(flow*), flow*), the closure of the loop.
    pub closure_residual: f64,
    pub holder: HolderReport,
}

impl EquilibriumResult {
    /// True once the residual history is non-increasing after its first
    /// quarter (reported, not enforced).
    pub fn residuals_monotone_after_burn_in(&self) -> bool {
        let burn = self.residual_history.len() / 4;
        self.residual_history
            .windows(2)
            .skip(burn)
            .all(|w| w[1] <= w[0] + 1e-12)
    }
}

/// Damped Picard iteration on the population-response map starting from
/// `initial_flow` (the problem's resting flow when `None`).
pub fn solve_equilibrium(
    problem: &MfgProblem,
    opts: &EquilibriumOptions,
    initial_flow: Option<PositionFlow>,
) -> Result<EquilibriumResult> {
    if !(opts.tolerance > 0.0) {
        return Err(MfgError::Config {
            field: "solver.tolerance".into(),
            message: "tolerance must be positive".into(),
        });
    }
    if let Damping::Fixed(delta) = opts.damping {
        if !(delta > 0.0 && delta <= 1.0) {
            return Err(MfgError::Config {
                field: "solver.damping".into(),
                message: format!("fixed damping must lie in (0, 1], got {delta}"),
            });
        }
    }

    let mut flow = initial_flow.unwrap_or_else(|| problem.resting_flow());
    let mut history = Vec::new();

    for k in 0..=opts.max_iterations {
        let (response, parts) = population_response(problem, &flow)?;
        let residual = flow_metric(&response, &flow)?;
        history.push(residual);

        if residual < opts.tolerance || k == opts.max_iterations {
            let holder = holder_diagnostics(&flow, &problem.quadrature, &problem.grid);
            return Ok(EquilibriumResult {
                converged: residual < opts.tolerance,
                iterations: k,
                closure_residual: residual,
                residual_history: history,
                holder,
                flow,
                value: parts.value,
                control: parts.control,
                factor: parts.factor,
            });
        }

        let delta = opts.damping.step(k);
        flow = flow.blend(&response, delta)?;
    }
    unreachable!("loop returns at the iteration cap");
}

/// Report of the state-wise coupling monotonicity probe.
#[derive(Debug, Clone, Serialize)]
pub struct MonotonicityReport {
    /// Smallest pair integral of the flow cost over all sampled pairs/states.
    pub min_flow_integral: f64,
    /// Smallest pair integral of the terminal cost.
    pub min_terminal_integral: f64,
    pub pairs_tested: usize,
    pub states_tested: usize,
    /// True when both minima clear -1e-10.
    pub monotone: bool,
}

/// Probe the state-wise monotonicity inequality
/// `integral (rho1 - rho2)(F(s,., rho1) - F(s,.,rho2)) >= 0` (and the same
/// for the terminal cost) on seeded random density pairs.
pub fn monotonicity_check(
    model: &dyn crate::costs::CostModel,
    quad: &StateQuadrature,
    nx: usize,
    n_pairs: usize,
    seed: u64,
) -> MonotonicityReport {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let dx = 1.0 / nx as f64;

    let mut min_flow = f64::INFINITY;
    let mut min_terminal = f64::INFINITY;
    for _ in 0..n_pairs {
        let rho1 = random_density(&mut rng, nx);
        let rho2 = random_density(&mut rng, nx);
        for &s in quad.nodes() {
            let mut flow_acc = 0.0;
            let mut term_acc = 0.0;
            for i in 0..nx {
                let x = i as f64 * dx;
                let d_rho = rho1.value(i) - rho2.value(i);
                flow_acc += d_rho * (model.flow_cost(s, x, &rho1) - model.flow_cost(s, x, &rho2));
                term_acc +=
                    d_rho * (model.terminal_cost(s, x, &rho1) - model.terminal_cost(s, x, &rho2));
            }
            min_flow = min_flow.min(flow_acc * dx);
            min_terminal = min_terminal.min(term_acc * dx);
        }
    }
    MonotonicityReport {
        min_flow_integral: min_flow,
        min_terminal_integral: min_terminal,
        pairs_tested: n_pairs,
        states_tested: quad.len(),
        monotone: min_flow >= -1e-10 && min_terminal >= -1e-10,
    }
}

/// Random mollified densities: bumps, bump mixtures, and clipped Fourier
/// perturbations of uniform.
fn random_density(rng: &mut rand_chacha::ChaCha8Rng, nx: usize) -> PositionDensity {
    use rand::Rng;
    let dx = 1.0 / nx as f64;
    let kind: u8 = rng.gen_range(0..3);
    let mut values = ndarray::Array1::zeros(nx);
    match kind {
        0 => {
            let center: f64 = rng.gen_range(0.0..1.0);
            let width: f64 = rng.gen_range(0.05..0.3);
            for i in 0..nx {
                values[i] = crate::density::wrapped_gaussian(i as f64 * dx, center, width);
            }
        }
        1 => {
            for _ in 0..2 {
                let center: f64 = rng.gen_range(0.0..1.0);
                let width: f64 = rng.gen_range(0.05..0.25);
                let w: f64 = rng.gen_range(0.2..0.8);
                for i in 0..nx {
                    values[i] += w * crate::density::wrapped_gaussian(i as f64 * dx, center, width);
                }
            }
        }
        _ => {
            let a1: f64 = rng.gen_range(-0.8..0.8);
            let a2: f64 = rng.gen_range(-0.4..0.4);
            let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            for i in 0..nx {
                let x = i as f64 * dx;
                let v = 1.0
                    + a1 * (std::f64::consts::TAU * x + phase).sin()
                    + a2 * (2.0 * std::f64::consts::TAU * x).cos();
                values[i] = v.max(0.0);
            }
        }
    }
    PositionDensity::from_values(values, dx).expect("random density construction")
}
