//! Single-agent quadratic-growth BSDE solver for a given risk-premium
//! process, with a Cole-Hopf closed-form oracle, a measure-changed
//! cross-check solver, optimal-strategy extraction, and the wealth/liability
//! shift-invariance check.
//!
//! The backward equation solved here is
//!
//! ```text
//! Y_k = E[Y_{k+1} | node] + f(Z0_k, Z1_k) dt,   Y_K = F,
//! f(z0, z1) = -z0_par . theta - |theta|^2 / (2 gamma)
//!             + (gamma / 2) (|z0_perp|^2 + |z1|^2),
//! ```
//!
//! an explicit first-order scheme with `(Z0, Z1)` from the exact
//! martingale-increment regression of the tree. The solver works in
//! unnormalized `(Y, Z)` units; the normalized `(y, z) = gamma (Y, Z)` view
//! is a pure rescaling accessor. The candidate optimal exposure is
//! `p* = Z0_par + theta^T / gamma`.

use rayon::prelude::*;

use crate::error::BsdeError;
use crate::lattice::{pairwise_mean, pairwise_sum, CommonVecField, NoiseLattice, ScalarField, VecField};
use crate::model::{AgentType, MarketLattice};

/// Step-size guard: discrete measure changes stay valid while
/// `|theta| sqrt(dt)` is safely below one.
pub const THETA_STEP_LIMIT: f64 = 0.5;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

/// Risk-premium specification resolved on the lattice. All variants construct
/// `theta` from a drift through `sigma^T (sigma sigma^T)^{-1} mu`, so the
/// result lies in the row space of sigma by construction.
#[derive(Debug, Clone, PartialEq)]
pub enum ThetaSpec {
    Zero,
    /// Constant drift `mu` (one entry per stock).
    ConstantDrift(Vec<f64>),
    /// Deterministic per-step drifts (steps x stocks).
    PerStepDrift(Vec<Vec<f64>>),
    /// State-dependent drift `mu_i = scale * tanh(W0[0])` per stock.
    StateDrift { scale: f64 },
}

/// Resolves a [`ThetaSpec`] into a common-node risk-premium field.
pub fn resolve_theta(
    lattice: &NoiseLattice,
    market: &MarketLattice,
    spec: &ThetaSpec,
) -> Result<CommonVecField, BsdeError> {
    let d0 = lattice.common_dim();
    let stocks = market.market().stocks;
    let mut field = CommonVecField::zeros(lattice, d0, lattice.steps());
    for k in 0..lattice.steps() {
        for c in 0..lattice.common_nodes(k) {
            let node = market.node(k, c);
            let theta = match spec {
                ThetaSpec::Zero => vec![0.0; d0],
                ThetaSpec::ConstantDrift(mu) => {
                    if mu.len() != stocks {
                        return Err(BsdeError::Precondition(format!(
                            "drift has {} entries for {} stocks",
                            mu.len(),
                            stocks
                        )));
                    }
                    node.risk_premium_from_drift(mu)
                }
                ThetaSpec::PerStepDrift(rows) => {
                    if rows.len() != lattice.steps() || rows[k].len() != stocks {
                        return Err(BsdeError::Precondition(
                            "per-step drift table does not match grid or stock count".into(),
                        ));
                    }
                    node.risk_premium_from_drift(&rows[k])
                }
                ThetaSpec::StateDrift { scale } => {
                    let w0 = lattice.common_state(k, c);
                    let mu = vec![scale * w0[0].tanh(); stocks];
                    node.risk_premium_from_drift(&mu)
                }
            };
            field.slices[k][c * d0..(c + 1) * d0].copy_from_slice(&theta);
        }
    }
    Ok(field)
}

/// Builds a common-node field from a joint-node field, failing if any value
/// varies with the idiosyncratic index (an adaptedness violation).
pub fn common_field_from_joint(
    lattice: &NoiseLattice,
    field: &VecField,
) -> Result<CommonVecField, BsdeError> {
    let width = field.width;
    let mut out = CommonVecField::zeros(lattice, width, field.slices.len());
    for (k, slice) in field.slices.iter().enumerate() {
        let idio_k = lattice.idio_nodes(k);
        for c in 0..lattice.common_nodes(k) {
            let first = &slice[c * idio_k * width..(c * idio_k + 1) * width];
            for i in 1..idio_k {
                let at = (c * idio_k + i) * width;
                if slice[at..at + width] != *first {
                    return Err(BsdeError::Precondition(format!(
                        "field varies across the idiosyncratic index at step {k}, common node {c}: not adapted to the common filtration"
                    )));
                }
            }
            out.slices[k][c * width..(c + 1) * width].copy_from_slice(first);
        }
    }
    Ok(out)
}

/// Risk-premium process and risk aversion entering a single agent's driver.
#[derive(Debug, Clone)]
pub struct AgentDriverParams {
    pub gamma: f64,
    pub theta: CommonVecField,
}

impl AgentDriverParams {
    pub fn new(gamma: f64, theta: CommonVecField) -> Result<Self, BsdeError> {
        if !(gamma > 0.0) {
            return Err(BsdeError::Precondition(format!(
                "risk aversion must be positive, got {gamma}"
            )));
        }
        Ok(Self { gamma, theta })
    }
}

/// Driver of the agent BSDE, evaluated with the projection split of `z0`.
pub fn driver_agent(
    node: &crate::model::SigmaNode,
    z0: &[f64],
    z1: &[f64],
    theta: &[f64],
    gamma: f64,
) -> f64 {
    let (par, perp) = node.project(z0);
    driver_agent_split(&par, &perp, z1, theta, gamma)
}

fn driver_agent_split(z0_par: &[f64], z0_perp: &[f64], z1: &[f64], theta: &[f64], gamma: f64) -> f64 {
    -dot(z0_par, theta) - norm_sq(theta) / (2.0 * gamma)
        + 0.5 * gamma * (norm_sq(z0_perp) + norm_sq(z1))
}

/// Node-indexed solution of the backward equation with the projection split
/// of the common integrand and summary diagnostics.
#[derive(Debug, Clone)]
pub struct BsdeSolution {
    pub y: ScalarField,
    pub z0: VecField,
    pub z1: VecField,
    pub z0_par: VecField,
    pub z0_perp: VecField,
    pub max_abs_y: f64,
    /// Max over nodes of the conditional remaining quadratic variation
    /// `E[sum_{j>=k} (|Z0_j|^2 + |Z1_j|^2) dt | node]`.
    pub bmo_surrogate: f64,
}

impl BsdeSolution {
    /// Normalized view `(y, z0, z1) = gamma * (Y, Z0, Z1)`.
    pub fn normalized(&self, gamma: f64) -> (ScalarField, VecField, VecField) {
        let scale = |slices: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
            slices
                .iter()
                .map(|s| s.iter().map(|v| gamma * v).collect())
                .collect()
        };
        (
            ScalarField {
                slices: scale(&self.y.slices),
            },
            VecField {
                width: self.z0.width,
                slices: scale(&self.z0.slices),
            },
            VecField {
                width: self.z1.width,
                slices: scale(&self.z1.slices),
            },
        )
    }

    /// Boundedness diagnostic: the BMO surrogate against
    /// `exp(4 gamma max|Y|) / gamma^2`, with 10% slack for discretization.
    pub fn bmo_bound(&self, gamma: f64) -> (f64, f64, bool) {
        let bound = (4.0 * gamma * self.max_abs_y).exp() / (gamma * gamma);
        (
            self.bmo_surrogate,
            bound,
            self.bmo_surrogate <= bound * 1.1,
        )
    }
}

/// Evaluates an agent's terminal liability on every terminal node, enforcing
/// the declared supremum bound.
pub fn terminal_liability(
    lattice: &NoiseLattice,
    agent: &AgentType,
) -> Result<Vec<f64>, BsdeError> {
    let k = lattice.steps();
    let idio_count = lattice.idio_nodes(k);
    let bound = agent.liability.sup_bound(agent.risk_aversion);
    let mut values = vec![0.0; lattice.joint_nodes(k)];
    let mut violation: Option<f64> = None;
    for c in 0..lattice.common_nodes(k) {
        let common_state = lattice.common_state(k, c);
        for i in 0..idio_count {
            let idio_state = lattice.idio_state(k, i);
            let v = agent.liability.evaluate(
                agent.risk_aversion,
                common_state.as_slice(),
                idio_state.as_slice(),
                (c, i, idio_count),
            );
            if v.abs() > bound + 1e-12 {
                violation = Some(v);
            }
            values[lattice.joint_index(k, c, i)] = v;
        }
    }
    if let Some(v) = violation {
        return Err(BsdeError::Precondition(format!(
            "[liability-bound] liability value {v} exceeds declared bound {bound}"
        )));
    }
    Ok(values)
}

fn check_theta(
    lattice: &NoiseLattice,
    market: &MarketLattice,
    theta: &CommonVecField,
) -> Result<(), BsdeError> {
    let sqrt_dt = lattice.dt().sqrt();
    if theta.width != lattice.common_dim() || theta.slices.len() < lattice.steps() {
        return Err(BsdeError::Precondition(
            "risk-premium field does not match the lattice".into(),
        ));
    }
    for k in 0..lattice.steps() {
        for c in 0..lattice.common_nodes(k) {
            let th = theta.get(k, c);
            let size = norm_sq(th).sqrt() * sqrt_dt;
            if size >= THETA_STEP_LIMIT {
                return Err(BsdeError::StepSize {
                    step: k,
                    value: size,
                    limit: THETA_STEP_LIMIT,
                });
            }
            let par = market.node(k, c).project_par(th);
            let gap: f64 = par
                .iter()
                .zip(th)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            if gap > 1e-10 * (1.0 + norm_sq(th).sqrt()) {
                return Err(BsdeError::Precondition(format!(
                    "risk premium at ({k}, {c}) is not in the row space of sigma (gap {gap:.3e})"
                )));
            }
        }
    }
    Ok(())
}

/// Backward sweep shared by the P-measure solver paths: terminal values plus
/// a per-node driver callback `(k, common, idio, z0_par, z0_perp, z1) -> f`.
pub(crate) fn sweep<F>(
    lattice: &NoiseLattice,
    market: &MarketLattice,
    terminal: Vec<f64>,
    driver: F,
) -> Result<BsdeSolution, BsdeError>
where
    F: Fn(usize, usize, usize, &[f64], &[f64], &[f64]) -> f64 + Sync,
{
    let steps = lattice.steps();
    let d0 = lattice.common_dim();
    let d1 = lattice.idio_dim();
    let dt = lattice.dt();
    let mut y = ScalarField::zeros(lattice);
    let mut z0 = VecField::zeros(lattice, d0, steps);
    let mut z1 = VecField::zeros(lattice, d1, steps);
    let mut z0_par = VecField::zeros(lattice, d0, steps);
    let mut z0_perp = VecField::zeros(lattice, d0, steps);
    y.slices[steps] = terminal;

    for k in (0..steps).rev() {
        let regressed = lattice.regress_step(k, &y.slices[k + 1]);
        let idio_k = lattice.idio_nodes(k);
        let y_slice = &mut y.slices[k];
        let par_slice = &mut z0_par.slices[k];
        let perp_slice = &mut z0_perp.slices[k];
        y_slice
            .par_chunks_mut(idio_k)
            .zip(par_slice.par_chunks_mut(idio_k * d0))
            .zip(perp_slice.par_chunks_mut(idio_k * d0))
            .enumerate()
            .for_each(|(common, ((y_chunk, par_chunk), perp_chunk))| {
                let node = market.node(k, common);
                for idio in 0..idio_k {
                    let at = common * idio_k + idio;
                    let row0 = &regressed.z0[at * d0..(at + 1) * d0];
                    let row1 = &regressed.z1[at * d1..(at + 1) * d1];
                    let (par, perp) = node.project(row0);
                    let f = driver(k, common, idio, &par, &perp, row1);
                    y_chunk[idio] = regressed.mean[at] + f * dt;
                    par_chunk[idio * d0..(idio + 1) * d0].copy_from_slice(&par);
                    perp_chunk[idio * d0..(idio + 1) * d0].copy_from_slice(&perp);
                }
            });
        if y_slice.iter().any(|v| !v.is_finite()) {
            return Err(BsdeError::NumericalFailure {
                step: k,
                message: "backward value became non-finite; the time step is too coarse for the quadratic driver".into(),
            });
        }
        z0.slices[k] = regressed.z0;
        z1.slices[k] = regressed.z1;
    }

    let bmo_surrogate = bmo_surrogate(lattice, &z0, &z1);
    let max_abs_y = y.max_abs();
    Ok(BsdeSolution {
        y,
        z0,
        z1,
        z0_par,
        z0_perp,
        max_abs_y,
        bmo_surrogate,
    })
}

/// Max over nodes of the conditional remaining quadratic variation of `(Z0, Z1)`.
pub fn bmo_surrogate(lattice: &NoiseLattice, z0: &VecField, z1: &VecField) -> f64 {
    let steps = lattice.steps();
    let dt = lattice.dt();
    let d0 = z0.width;
    let d1 = z1.width;
    let mut max_q: f64 = 0.0;
    let mut next = vec![0.0; lattice.joint_nodes(steps)];
    for k in (0..steps).rev() {
        let expected = lattice.backward_mean_step(k, &next);
        let joint = lattice.joint_nodes(k);
        let mut q = vec![0.0; joint];
        for at in 0..joint {
            let own = norm_sq(&z0.slices[k][at * d0..(at + 1) * d0])
                + norm_sq(&z1.slices[k][at * d1..(at + 1) * d1]);
            q[at] = own * dt + expected[at];
        }
        max_q = q.iter().fold(max_q, |acc, v| acc.max(*v));
        next = q;
    }
    max_q
}

/// Solves the agent's quadratic-growth BSDE for the given risk premium.
pub fn solve_agent_bsde(
    lattice: &NoiseLattice,
    market: &MarketLattice,
    agent: &AgentType,
    theta: &CommonVecField,
) -> Result<BsdeSolution, BsdeError> {
    let terminal = terminal_liability(lattice, agent)?;
    solve_with_terminal(lattice, market, agent.risk_aversion, terminal, theta)
}

/// Same solver with an explicit terminal slice (used by the shift check and tests).
pub fn solve_with_terminal(
    lattice: &NoiseLattice,
    market: &MarketLattice,
    gamma: f64,
    terminal: Vec<f64>,
    theta: &CommonVecField,
) -> Result<BsdeSolution, BsdeError> {
    check_theta(lattice, market, theta)?;
    sweep(lattice, market, terminal, |k, common, _idio, par, perp, z1| {
        let th = theta.get(k, common);
        driver_agent_split(par, perp, z1, th, gamma)
    })
}

/// Noise family selector for the closed-form oracle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseFamily {
    Common,
    Idio,
}

/// Cole-Hopf closed form `y_k = ln E[exp(G) | node]` for terminal data `G`
/// measurable with respect to a single noise family, computed by the exact
/// recursion `y_k = ln E[exp(y_{k+1}) | node]` on that family's marginal tree.
///
/// Returns one slice per step, indexed by the family's node index.
pub fn solve_closed_form(
    lattice: &NoiseLattice,
    g_joint_terminal: &[f64],
    family: NoiseFamily,
) -> Result<Vec<Vec<f64>>, BsdeError> {
    let steps = lattice.steps();
    let idio_count = lattice.idio_nodes(steps);
    let common_count = lattice.common_nodes(steps);
    if g_joint_terminal.len() != lattice.joint_nodes(steps) {
        return Err(BsdeError::Precondition(
            "terminal slice does not match the lattice".into(),
        ));
    }

    // Measurability check, then marginal extraction.
    let terminal: Vec<f64> = match family {
        NoiseFamily::Common => {
            for c in 0..common_count {
                let first = g_joint_terminal[c * idio_count];
                if g_joint_terminal[c * idio_count..(c + 1) * idio_count]
                    .iter()
                    .any(|&v| v != first)
                {
                    return Err(BsdeError::Precondition(
                        "terminal data is not measurable with respect to the common family alone"
                            .into(),
                    ));
                }
            }
            (0..common_count)
                .map(|c| g_joint_terminal[c * idio_count])
                .collect()
        }
        NoiseFamily::Idio => {
            for i in 0..idio_count {
                let first = g_joint_terminal[i];
                if (0..common_count).any(|c| g_joint_terminal[c * idio_count + i] != first) {
                    return Err(BsdeError::Precondition(
                        "terminal data is not measurable with respect to the idiosyncratic family alone"
                            .into(),
                    ));
                }
            }
            g_joint_terminal[0..idio_count].to_vec()
        }
    };

    let branches = match family {
        NoiseFamily::Common => lattice.common_branches(),
        NoiseFamily::Idio => lattice.idio_branches(),
    };
    let mut result = vec![Vec::new(); steps + 1];
    result[steps] = terminal;
    for k in (0..steps).rev() {
        let next = &result[k + 1];
        let exp_next: Vec<f64> = next.iter().map(|v| v.exp()).collect();
        if exp_next.iter().any(|v| !v.is_finite()) {
            return Err(BsdeError::NumericalFailure {
                step: k,
                message: "exponential overflow in the closed-form recursion".into(),
            });
        }
        let parents = next.len() / branches;
        let mut slice = vec![0.0; parents];
        for (parent, slot) in slice.iter_mut().enumerate() {
            *slot =
                pairwise_mean(&exp_next[parent * branches..(parent + 1) * branches]).ln();
        }
        result[k] = slice;
    }
    Ok(result)
}

/// Solves the agent BSDE under the equivalent measure that absorbs the
/// `-z0_par . theta` term: common transition probabilities are exponentially
/// tilted by `exp(-theta . dW0)` (normalized), the driver loses its linear
/// term, and the regression is taken against the drift-shifted increments
/// `dW0 + theta dt`. Agrees with [`solve_agent_bsde`] at first order in `dt`.
pub fn solve_agent_bsde_qmeasure(
    lattice: &NoiseLattice,
    market: &MarketLattice,
    agent: &AgentType,
    theta: &CommonVecField,
) -> Result<BsdeSolution, BsdeError> {
    check_theta(lattice, market, theta)?;
    let gamma = agent.risk_aversion;
    let steps = lattice.steps();
    let d0 = lattice.common_dim();
    let d1 = lattice.idio_dim();
    let dt = lattice.dt();
    let sqrt_dt = dt.sqrt();
    let b0 = lattice.common_branches();
    let b1 = lattice.idio_branches();

    let mut y = ScalarField::zeros(lattice);
    let mut z0 = VecField::zeros(lattice, d0, steps);
    let mut z1 = VecField::zeros(lattice, d1, steps);
    let mut z0_par = VecField::zeros(lattice, d0, steps);
    let mut z0_perp = VecField::zeros(lattice, d0, steps);
    y.slices[steps] = terminal_liability(lattice, agent)?;

    for k in (0..steps).rev() {
        let idio_k = lattice.idio_nodes(k);
        let idio_next = lattice.idio_nodes(k + 1);
        let (head, tail) = y.slices.split_at_mut(k + 1);
        let y_next = &tail[0];
        let y_slice = &mut head[k];
        let z0_slice = &mut z0.slices[k];
        let z1_slice = &mut z1.slices[k];
        let par_slice = &mut z0_par.slices[k];
        let perp_slice = &mut z0_perp.slices[k];

        y_slice
            .par_chunks_mut(idio_k)
            .zip(z0_slice.par_chunks_mut(idio_k * d0))
            .zip(z1_slice.par_chunks_mut(idio_k * d1))
            .zip(par_slice.par_chunks_mut(idio_k * d0))
            .zip(perp_slice.par_chunks_mut(idio_k * d0))
            .enumerate()
            .for_each(
                |(common, ((((y_chunk, z0_chunk), z1_chunk), par_chunk), perp_chunk))| {
                    let node = market.node(k, common);
                    let th = theta.get(k, common);
                    // per-dimension tilted branch probabilities
                    let mut up = vec![0.0; d0];
                    let mut down = vec![0.0; d0];
                    for j in 0..d0 {
                        let x = th[j] * sqrt_dt;
                        let denom = 2.0 * x.cosh();
                        up[j] = (-x).exp() / denom;
                        down[j] = x.exp() / denom;
                    }
                    let branch_prob = |a: usize| -> f64 {
                        (0..d0)
                            .map(|j| if a & (1 << j) != 0 { up[j] } else { down[j] })
                            .product()
                    };
                    let probs: Vec<f64> = (0..b0).map(branch_prob).collect();
                    let inv_b1 = 1.0 / b1 as f64;
                    let mut weighted = Vec::with_capacity(b0 * b1);
                    for idio in 0..idio_k {
                        let child = |a: usize, b: usize| -> f64 {
                            y_next[(common * b0 + a) * idio_next + (idio * b1 + b)]
                        };
                        weighted.clear();
                        for a in 0..b0 {
                            for b in 0..b1 {
                                weighted.push(probs[a] * inv_b1 * child(a, b));
                            }
                        }
                        let mean = pairwise_sum(&weighted);
                        // regression against the shifted common increments
                        // dW0 + theta dt, written as a paired-difference term
                        // plus theta * mean so it reduces bit-exactly to the
                        // plain regression when theta vanishes
                        let mut row0 = vec![0.0; d0];
                        for (j, slot) in row0.iter_mut().enumerate() {
                            let mask = 1 << j;
                            let mut acc = Vec::with_capacity(b0 * b1 / 2);
                            for a in 0..b0 {
                                if a & mask != 0 {
                                    for b in 0..b1 {
                                        acc.push(
                                            (probs[a] * child(a, b)
                                                - probs[a ^ mask] * child(a ^ mask, b))
                                                * inv_b1,
                                        );
                                    }
                                }
                            }
                            *slot = pairwise_sum(&acc) / sqrt_dt + th[j] * mean;
                        }
                        let mut row1 = vec![0.0; d1];
                        for (j, slot) in row1.iter_mut().enumerate() {
                            let mask = 1 << j;
                            let mut acc = Vec::with_capacity(b0 * b1 / 2);
                            for b in 0..b1 {
                                if b & mask != 0 {
                                    for a in 0..b0 {
                                        acc.push(
                                            probs[a]
                                                * (child(a, b) - child(a, b ^ mask))
                                                * inv_b1,
                                        );
                                    }
                                }
                            }
                            *slot = pairwise_sum(&acc) / sqrt_dt;
                        }
                        let (par, perp) = node.project(&row0);
                        let f = -norm_sq(th) / (2.0 * gamma)
                            + 0.5 * gamma * (norm_sq(&perp) + norm_sq(&row1));
                        y_chunk[idio] = mean + f * dt;
                        z0_chunk[idio * d0..(idio + 1) * d0].copy_from_slice(&row0);
                        z1_chunk[idio * d1..(idio + 1) * d1].copy_from_slice(&row1);
                        par_chunk[idio * d0..(idio + 1) * d0].copy_from_slice(&par);
                        perp_chunk[idio * d0..(idio + 1) * d0].copy_from_slice(&perp);
                    }
                },
            );
        if y_slice.iter().any(|v| !v.is_finite()) {
            return Err(BsdeError::NumericalFailure {
                step: k,
                message: "backward value became non-finite under the tilted measure".into(),
            });
        }
    }

    let bmo_surrogate = bmo_surrogate(lattice, &z0, &z1);
    let max_abs_y = y.max_abs();
    Ok(BsdeSolution {
        y,
        z0,
        z1,
        z0_par,
        z0_perp,
        max_abs_y,
        bmo_surrogate,
    })
}

/// Row-space exposure `p` and the realizing stock positions `pi`.
#[derive(Debug, Clone)]
pub struct Strategy {
    /// `p = Z0_par + theta^T / gamma`, one row per node.
    pub p: VecField,
    /// `pi = (sigma sigma^T)^{-1} sigma p^T`, one stock vector per node.
    pub pi: VecField,
}

/// Extracts the candidate optimal strategy from a solved BSDE.
pub fn optimal_strategy(
    lattice: &NoiseLattice,
    market: &MarketLattice,
    solution: &BsdeSolution,
    theta: &CommonVecField,
    gamma: f64,
) -> Result<Strategy, BsdeError> {
    let d0 = lattice.common_dim();
    let stocks = market.market().stocks;
    if solution.z0_par.width != d0 || theta.width != d0 {
        return Err(BsdeError::Precondition("dimension mismatch".into()));
    }
    let steps = lattice.steps();
    let mut p = VecField::zeros(lattice, d0, steps);
    let mut pi = VecField::zeros(lattice, stocks, steps);
    for k in 0..steps {
        let idio_k = lattice.idio_nodes(k);
        for c in 0..lattice.common_nodes(k) {
            let node = market.node(k, c);
            let th = theta.get(k, c);
            for i in 0..idio_k {
                let at = lattice.joint_index(k, c, i);
                let par = &solution.z0_par.slices[k][at * d0..(at + 1) * d0];
                let row: Vec<f64> = par
                    .iter()
                    .zip(th)
                    .map(|(z, t)| z + t / gamma)
                    .collect();
                let position = node.position_from_exposure(&row);
                p.slices[k][at * d0..(at + 1) * d0].copy_from_slice(&row);
                pi.slices[k][at * stocks..(at + 1) * stocks].copy_from_slice(&position);
            }
        }
    }
    Ok(Strategy { p, pi })
}

/// Result of the wealth/liability shift-invariance check.
#[derive(Debug, Clone)]
pub struct ShiftReport {
    /// The subtracted constant `E[F]` for this agent type.
    pub shift: f64,
    /// Sup-norm of the node-wise strategy difference.
    pub max_strategy_gap: f64,
    /// Whether the two strategy fields are bit-identical.
    pub bytes_identical: bool,
    /// `|(Y'_0 - Y_0) + shift|`: the value process must move by exactly the shift.
    pub y0_gap: f64,
}

/// Solves the BSDE for the original and mean-shifted liabilities and compares
/// the optimal strategies; the shift enters only the value process.
pub fn shift_invariance_check(
    lattice: &NoiseLattice,
    market: &MarketLattice,
    agent: &AgentType,
    theta: &CommonVecField,
) -> Result<ShiftReport, BsdeError> {
    let gamma = agent.risk_aversion;
    let terminal = terminal_liability(lattice, agent)?;
    let shift = pairwise_mean(&terminal);
    let shifted: Vec<f64> = terminal.iter().map(|v| v - shift).collect();

    let base = solve_with_terminal(lattice, market, gamma, terminal, theta)?;
    let moved = solve_with_terminal(lattice, market, gamma, shifted, theta)?;
    let p_base = optimal_strategy(lattice, market, &base, theta, gamma)?;
    let p_moved = optimal_strategy(lattice, market, &moved, theta, gamma)?;

    let mut max_gap: f64 = 0.0;
    let mut bytes_identical = true;
    for (a, b) in p_base.p.slices.iter().zip(&p_moved.p.slices) {
        for (x, y) in a.iter().zip(b) {
            max_gap = max_gap.max((x - y).abs());
            if x.to_bits() != y.to_bits() {
                bytes_identical = false;
            }
        }
    }
    let y0_gap = ((moved.y.slices[0][0] - base.y.slices[0][0]) + shift).abs();
    Ok(ShiftReport {
        shift,
        max_strategy_gap: max_gap,
        bytes_identical,
        y0_gap,
    })
}
