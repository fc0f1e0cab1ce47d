//! Independent brute-force verification: exact-tree utility evaluation,
//! exhaustive dynamic-programming optimization over a control grid, and the
//! martingale-optimality checker for the candidate strategy.
//!
//! The utility of a strategy is the exact tree expectation of
//! `-exp(-gamma (W_T - F))` with the wealth recursion
//! `W_{k+1} = W_k + p_k (dW0_k + theta_k dt)`. Because the utility is
//! exponential, the optimal discrete value factorizes and backward dynamic
//! programming over a certainty-equivalent recursion is exact; its optimizer
//! differs from the continuous-time formula by one power of `dt`, so all
//! comparisons here are convergence-order checks, never exact matches.

use rayon::prelude::*;

use crate::bsde::BsdeSolution;
use crate::error::OracleError;
use crate::lattice::{pairwise_mean, CommonVecField, NoiseLattice, ScalarField, VecField};
use crate::model::{AgentType, MarketLattice};

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Candidate exposure grid for the exhaustive optimizer: per-dimension range
/// `[-p_max, p_max]` with spacing `resolution`.
#[derive(Debug, Clone, Copy)]
pub struct ControlGrid {
    pub p_max: f64,
    pub resolution: f64,
}

impl ControlGrid {
    pub fn new(p_max: f64, resolution: f64) -> Result<Self, OracleError> {
        if !(resolution > 0.0) || !(p_max > 0.0) {
            return Err(OracleError::Precondition(
                "control grid needs positive range and resolution".into(),
            ));
        }
        Ok(Self { p_max, resolution })
    }

    pub fn candidates(&self) -> Vec<f64> {
        let count = (2.0 * self.p_max / self.resolution).round() as usize;
        (0..=count)
            .map(|j| -self.p_max + j as f64 * self.resolution)
            .collect()
    }
}

/// Forward wealth accumulation: `W_{k+1} = W_k + p_k (dW0 + theta dt)`.
fn wealth_forward(
    lattice: &NoiseLattice,
    initial_wealth: f64,
    theta: &CommonVecField,
    strategy: &VecField,
) -> ScalarField {
    let steps = lattice.steps();
    let d0 = lattice.common_dim();
    let dt = lattice.dt();
    let sqrt_dt = dt.sqrt();
    let b0 = lattice.common_branches();
    let b1 = lattice.idio_branches();
    let mut wealth = ScalarField::zeros(lattice);
    wealth.slices[0][0] = initial_wealth;
    for k in 0..steps {
        let idio_k = lattice.idio_nodes(k);
        let idio_next = lattice.idio_nodes(k + 1);
        let (head, tail) = wealth.slices.split_at_mut(k + 1);
        let current = &head[k];
        let next = &mut tail[0];
        for c in 0..lattice.common_nodes(k) {
            let th = theta.get(k, c);
            for i in 0..idio_k {
                let at = c * idio_k + i;
                let p = &strategy.slices[k][at * d0..(at + 1) * d0];
                let drift = dot(p, th) * dt;
                for a in 0..b0 {
                    let diffusion: f64 = (0..d0)
                        .map(|j| p[j] * NoiseLattice::branch_sign(a, j) * sqrt_dt)
                        .sum();
                    let value = current[at] + diffusion + drift;
                    for b in 0..b1 {
                        next[(c * b0 + a) * idio_next + (i * b1 + b)] = value;
                    }
                }
            }
        }
    }
    wealth
}

/// Exact tree expectation of `-exp(-gamma (W_T - F))` for a node-indexed
/// exposure field.
pub fn evaluate_utility(
    lattice: &NoiseLattice,
    _market: &MarketLattice,
    agent: &AgentType,
    theta: &CommonVecField,
    strategy: &VecField,
) -> Result<f64, OracleError> {
    let gamma = agent.risk_aversion;
    let terminal = crate::bsde::terminal_liability(lattice, agent)?;
    let wealth = wealth_forward(lattice, agent.initial_wealth, theta, strategy);
    let steps = lattice.steps();
    let utilities: Vec<f64> = wealth.slices[steps]
        .iter()
        .zip(&terminal)
        .map(|(w, f)| -(-gamma * (w - f)).exp())
        .collect();
    if utilities.iter().any(|u| !u.is_finite()) {
        return Err(OracleError::NumericalFailure(
            "utility overflow; reduce gamma or the wealth scale".into(),
        ));
    }
    Ok(pairwise_mean(&utilities))
}

/// Result of the exhaustive discrete optimization.
#[derive(Debug, Clone)]
pub struct BruteForceResult {
    /// Argmax exposure per node (width `d0 = 1`).
    pub strategy: VecField,
    /// Optimal utility of the exact discrete problem over the grid.
    pub value: f64,
}

/// Backward dynamic programming over the certainty-equivalent recursion,
/// minimizing `E[exp(-gamma p dX) H_{k+1}]` over the control grid at every
/// node. Restricted to the scalar desk-scale setting (one stock, both noise
/// families one-dimensional, at most three steps).
pub fn brute_force_optimal(
    lattice: &NoiseLattice,
    market: &MarketLattice,
    agent: &AgentType,
    theta: &CommonVecField,
    grid: &ControlGrid,
) -> Result<BruteForceResult, OracleError> {
    if lattice.common_dim() != 1 || lattice.idio_dim() != 1 || market.market().stocks != 1 {
        return Err(OracleError::Precondition(
            "exhaustive optimizer requires one stock and one-dimensional noise families".into(),
        ));
    }
    if lattice.steps() > 3 {
        return Err(OracleError::Precondition(
            "exhaustive optimizer is limited to three steps".into(),
        ));
    }
    let gamma = agent.risk_aversion;
    let dt = lattice.dt();
    let sqrt_dt = dt.sqrt();
    let steps = lattice.steps();
    let candidates = grid.candidates();
    let last = candidates.len() - 1;

    let terminal = crate::bsde::terminal_liability(lattice, agent)?;
    let mut objective: Vec<f64> = terminal.iter().map(|f| (gamma * f).exp()).collect();
    if objective.iter().any(|h| !h.is_finite()) {
        return Err(OracleError::NumericalFailure(
            "certainty-equivalent overflow at the terminal slice".into(),
        ));
    }
    let mut strategy = VecField::zeros(lattice, 1, steps);

    for k in (0..steps).rev() {
        let idio_k = lattice.idio_nodes(k);
        let idio_next = lattice.idio_nodes(k + 1);
        let b0 = lattice.common_branches();
        let b1 = lattice.idio_branches();
        let joint = lattice.joint_nodes(k);
        let mut next_objective = vec![0.0; joint];
        let results: Vec<(f64, usize)> = (0..joint)
            .into_par_iter()
            .map(|at| {
                let c = at / idio_k;
                let i = at % idio_k;
                let th = theta.get(k, c)[0];
                let mut best = f64::INFINITY;
                let mut best_idx = 0usize;
                for (idx, &p) in candidates.iter().enumerate() {
                    let mut acc = 0.0;
                    for a in 0..b0 {
                        let dx = NoiseLattice::branch_sign(a, 0) * sqrt_dt + th * dt;
                        let weight = (-gamma * p * dx).exp();
                        for b in 0..b1 {
                            acc += weight * objective[(c * b0 + a) * idio_next + (i * b1 + b)];
                        }
                    }
                    acc /= (b0 * b1) as f64;
                    if acc < best {
                        best = acc;
                        best_idx = idx;
                    }
                }
                (best, best_idx)
            })
            .collect();
        for (at, (best, best_idx)) in results.into_iter().enumerate() {
            if best_idx == 0 || best_idx == last {
                return Err(OracleError::WidenGrid {
                    step: k,
                    common: at / idio_k,
                    idio: at % idio_k,
                    p_max: grid.p_max,
                });
            }
            next_objective[at] = best;
            strategy.slices[k][at] = candidates[best_idx];
        }
        objective = next_objective;
    }

    let value = -(-gamma * agent.initial_wealth).exp() * objective[0];
    Ok(BruteForceResult { strategy, value })
}

/// Strategy perturbations probed by the martingale-optimality check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Perturbation {
    AddConstant(f64),
    SignFlip,
    Zero,
}

impl Perturbation {
    pub fn label(&self) -> String {
        match self {
            Perturbation::AddConstant(c) => format!("add_constant({c})"),
            Perturbation::SignFlip => "sign_flip".into(),
            Perturbation::Zero => "zero".into(),
        }
    }

    fn apply(&self, base: &VecField) -> VecField {
        let slices = base
            .slices
            .iter()
            .map(|s| {
                s.iter()
                    .map(|v| match self {
                        Perturbation::AddConstant(c) => v + c,
                        Perturbation::SignFlip => -v,
                        Perturbation::Zero => 0.0,
                    })
                    .collect()
            })
            .collect();
        VecField {
            width: base.width,
            slices,
        }
    }
}

/// Drift statistics of the wealth-utility supermartingale family for one
/// strategy.
#[derive(Debug, Clone)]
pub struct DriftStats {
    pub label: String,
    /// Largest one-step conditional drift `E[R_{k+1} | node] - R_k` (signed).
    pub max_drift: f64,
    /// Largest absolute one-step drift.
    pub max_abs_drift: f64,
    /// Absolute one-step drift at the root node (a fixed point in time and
    /// state, so its order in `dt` is uncontaminated by extreme-wealth paths).
    pub root_abs_drift: f64,
    /// Nodes whose drift exceeds the supermartingale tolerance.
    pub violations: usize,
    /// Largest positive exceedance over the tolerance.
    pub violation_magnitude: f64,
}

/// Martingale-optimality report: the candidate strategy must be driftless at
/// first order while every perturbation drifts downward.
#[derive(Debug, Clone)]
pub struct MartingaleDriftReport {
    pub candidate: DriftStats,
    /// `max_abs_drift / dt`: the drift rate, which vanishes at first order.
    pub candidate_drift_rate: f64,
    pub perturbed: Vec<DriftStats>,
}

fn drift_stats(
    lattice: &NoiseLattice,
    gamma: f64,
    wealth: &ScalarField,
    y: &ScalarField,
    label: String,
    tolerance: f64,
) -> DriftStats {
    let steps = lattice.steps();
    let mut max_drift = f64::NEG_INFINITY;
    let mut max_abs: f64 = 0.0;
    let mut root_abs: f64 = 0.0;
    let mut violations = 0usize;
    let mut violation_magnitude: f64 = 0.0;
    // R on the next slice, then one-step conditional means
    for k in 0..steps {
        let r_next: Vec<f64> = wealth.slices[k + 1]
            .iter()
            .zip(&y.slices[k + 1])
            .map(|(w, yv)| -(-gamma * (w - yv)).exp())
            .collect();
        let expected = lattice.backward_mean_step(k, &r_next);
        for (at, e) in expected.iter().enumerate() {
            let r_here = -(-gamma * (wealth.slices[k][at] - y.slices[k][at])).exp();
            let drift = e - r_here;
            max_drift = max_drift.max(drift);
            max_abs = max_abs.max(drift.abs());
            if k == 0 {
                root_abs = drift.abs();
            }
            if drift > tolerance {
                violations += 1;
                violation_magnitude = violation_magnitude.max(drift - tolerance);
            }
        }
    }
    DriftStats {
        label,
        max_drift,
        max_abs_drift: max_abs,
        root_abs_drift: root_abs,
        violations,
        violation_magnitude,
    }
}

/// Checks the martingale-optimality principle on the solved scenario: the
/// candidate exposure `p*` makes `R^p = -exp(-gamma (W - Y))` driftless up to
/// the discretization order, and each perturbed strategy drifts downward
/// (supermartingale direction) at every node within `tolerance` per step.
pub fn verify_martingale_optimality(
    lattice: &NoiseLattice,
    _market: &MarketLattice,
    agent: &AgentType,
    theta: &CommonVecField,
    solution: &BsdeSolution,
    candidate: &VecField,
    perturbations: &[Perturbation],
    tolerance: f64,
) -> Result<MartingaleDriftReport, OracleError> {
    let gamma = agent.risk_aversion;
    let wealth = wealth_forward(lattice, agent.initial_wealth, theta, candidate);
    let stats = drift_stats(
        lattice,
        gamma,
        &wealth,
        &solution.y,
        "candidate".into(),
        tolerance,
    );
    let rate = stats.max_abs_drift / lattice.dt();
    let perturbed = perturbations
        .iter()
        .map(|p| {
            let field = p.apply(candidate);
            let w = wealth_forward(lattice, agent.initial_wealth, theta, &field);
            drift_stats(lattice, gamma, &w, &solution.y, p.label(), tolerance)
        })
        .collect();
    Ok(MartingaleDriftReport {
        candidate: stats,
        candidate_drift_rate: rate,
        perturbed,
    })
}

/// Composite verification of one scenario: martingale-optimality drifts plus
/// the exhaustive-optimizer comparison.
#[derive(Debug, Clone)]
pub struct VerificationReport {
    pub drifts: MartingaleDriftReport,
    /// Sup-norm distance between the exhaustive argmax and the formula strategy.
    pub strategy_gap: f64,
    /// `brute-force value - utility(candidate)` (nonnegative up to rounding).
    pub value_gap: f64,
    pub brute_force_value: f64,
    pub candidate_utility: f64,
}

/// Runs the full oracle suite on one agent/premium scenario.
#[allow(clippy::too_many_arguments)]
pub fn run_verification(
    lattice: &NoiseLattice,
    market: &MarketLattice,
    agent: &AgentType,
    theta: &CommonVecField,
    solution: &BsdeSolution,
    candidate: &VecField,
    grid: &ControlGrid,
    tolerance: f64,
) -> Result<VerificationReport, OracleError> {
    let drifts = verify_martingale_optimality(
        lattice,
        market,
        agent,
        theta,
        solution,
        candidate,
        &[
            Perturbation::AddConstant(0.1),
            Perturbation::SignFlip,
            Perturbation::Zero,
        ],
        tolerance,
    )?;
    let brute = brute_force_optimal(lattice, market, agent, theta, grid)?;
    let mut strategy_gap: f64 = 0.0;
    for (a, b) in brute.strategy.slices.iter().zip(&candidate.slices) {
        for (x, y) in a.iter().zip(b) {
            strategy_gap = strategy_gap.max((x - y).abs());
        }
    }
    let candidate_utility = evaluate_utility(lattice, market, agent, theta, candidate)?;
    Ok(VerificationReport {
        drifts,
        strategy_gap,
        value_gap: brute.value - candidate_utility,
        brute_force_value: brute.value,
        candidate_utility,
    })
}
