//! The mean-field BSDE: a driver quadratic both in the integrands and in
//! their conditional means given the common noise, the frozen-driver map
//! whose fixed point solves it, Picard iteration with contraction
//! diagnostics, the equilibrium risk premium, and the additive fast path.
//!
//! The representative equation, with the agent type (risk aversion and
//! liability) drawn from the population atoms, is
//!
//! ```text
//! Y_t = F + int_t^T ( gh * Z0_par . E~[Z0_par]
//!                     - gh^2 / (2 gamma) |E~[Z0_par]|^2
//!                     + gamma / 2 (|Z0_perp|^2 + |Z1|^2) ) ds
//!       - int Z0 dW0 - int Z1 dW1,
//! ```
//!
//! where `gh` is the harmonic-mean risk aversion and `E~[.]` the conditional
//! mean over the idiosyncratic noise and the type distribution. The
//! equilibrium premium is `theta = -gh * E~[Z0_par]^T`. The frozen-driver map
//! sends an integrand guess `z` to the integrands of the linear equation with
//! driver `f(z)`; below a liability-size threshold it is a strict contraction
//! on a ball whose squared radius is `2 ||F||_inf^2`.

use crate::bsde::{self, BsdeSolution};
use crate::error::MeanFieldError;
use crate::lattice::{pairwise_mean, CommonVecField, NoiseLattice, ScalarField, VecField};
use crate::model::{MarketLattice, PopulationLaw, SigmaNode};

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

/// Risk-aversion constants controlling the size estimates of the mean-field
/// driver. The derived quantities are recomputed on demand, never stored.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GammaConstants {
    pub gamma_lo: f64,
    pub gamma_hi: f64,
    pub gamma_hat: f64,
}

impl GammaConstants {
    pub fn from_population(pop: &PopulationLaw) -> Self {
        Self {
            gamma_lo: pop.gamma_lo,
            gamma_hi: pop.gamma_hi,
            gamma_hat: pop.gamma_hat(),
        }
    }

    /// Constant in the absolute driver bound:
    /// `|f| <= (gamma_hi/2)(|z0|^2 + |z1|^2) + (gamma_hat^2/gamma_lo)|E~[z0]|^2`,
    /// integrated form `c_gamma = gamma_hi/2 + gamma_hat^2/gamma_lo`.
    pub fn c_gamma(&self) -> f64 {
        self.gamma_hi / 2.0 + self.gamma_hat * self.gamma_hat / self.gamma_lo
    }

    /// Constant in the driver's Lipschitz-type spread estimate:
    /// `max(gamma_hat, gamma_hat^2 / (2 gamma_lo), gamma_hi / 2)`.
    pub fn lipschitz(&self) -> f64 {
        let a = self.gamma_hat;
        let b = self.gamma_hat * self.gamma_hat / (2.0 * self.gamma_lo);
        let c = self.gamma_hi / 2.0;
        a.max(b).max(c)
    }

    /// Squared-norm ball radius `R = sqrt(2) ||F||_inf` stabilized by the map.
    pub fn ball_radius(&self, f_sup: f64) -> f64 {
        2.0f64.sqrt() * f_sup
    }

    /// Liability size below which the ball is stable: `1 / (2 c_gamma)`.
    pub fn stability_threshold(&self) -> f64 {
        1.0 / (2.0 * self.c_gamma())
    }

    /// Liability size below which the map contracts: `1 / (12 sqrt(2) C)`.
    pub fn contraction_threshold(&self) -> f64 {
        1.0 / (12.0 * 2.0f64.sqrt() * self.lipschitz())
    }
}

/// Mean-field driver evaluated with the projection split of `z0`.
pub fn driver_meanfield(
    node: &SigmaNode,
    z0: &[f64],
    z1: &[f64],
    zbar_par: &[f64],
    gamma: f64,
    gamma_hat: f64,
) -> f64 {
    let (par, perp) = node.project(z0);
    driver_meanfield_split(&par, &perp, z1, zbar_par, gamma, gamma_hat)
}

fn driver_meanfield_split(
    z0_par: &[f64],
    z0_perp: &[f64],
    z1: &[f64],
    zbar_par: &[f64],
    gamma: f64,
    gamma_hat: f64,
) -> f64 {
    gamma_hat * dot(z0_par, zbar_par)
        - gamma_hat * gamma_hat / (2.0 * gamma) * norm_sq(zbar_par)
        + 0.5 * gamma * (norm_sq(z0_perp) + norm_sq(z1))
}

/// Conditional mean of the projected common integrand over the idiosyncratic
/// index and the population atoms, one row per common node.
pub fn population_zbar(
    lattice: &NoiseLattice,
    pop: &PopulationLaw,
    state: &[BsdeSolution],
) -> CommonVecField {
    let d0 = lattice.common_dim();
    let steps = lattice.steps();
    let mut out = CommonVecField::zeros(lattice, d0, steps);
    let mut column = Vec::new();
    for k in 0..steps {
        let idio_k = lattice.idio_nodes(k);
        for c in 0..lattice.common_nodes(k) {
            for j in 0..d0 {
                let mut acc = 0.0;
                for (atom, (weight, _)) in pop.atoms().iter().enumerate() {
                    let slice = &state[atom].z0_par.slices[k];
                    column.clear();
                    column.extend(
                        (0..idio_k).map(|i| slice[(c * idio_k + i) * d0 + j]),
                    );
                    acc += weight * pairwise_mean(&column);
                }
                out.slices[k][c * d0 + j] = acc;
            }
        }
    }
    out
}

/// Equilibrium risk premium `theta = -gamma_hat * zbar^T`, one column per
/// common node (stored as a row field).
pub fn theta_from_zbar(zbar: &CommonVecField, gamma_hat: f64) -> CommonVecField {
    CommonVecField {
        width: zbar.width,
        slices: zbar
            .slices
            .iter()
            .map(|s| s.iter().map(|v| -gamma_hat * v).collect())
            .collect(),
    }
}

fn zero_state(lattice: &NoiseLattice, atoms: usize) -> Vec<BsdeSolution> {
    let steps = lattice.steps();
    (0..atoms)
        .map(|_| BsdeSolution {
            y: ScalarField::zeros(lattice),
            z0: VecField::zeros(lattice, lattice.common_dim(), steps),
            z1: VecField::zeros(lattice, lattice.idio_dim(), steps),
            z0_par: VecField::zeros(lattice, lattice.common_dim(), steps),
            z0_perp: VecField::zeros(lattice, lattice.common_dim(), steps),
            max_abs_y: 0.0,
            bmo_surrogate: 0.0,
        })
        .collect()
}

/// One application of the frozen-driver map: solves, for every atom, the
/// linear backward equation whose driver is the mean-field driver evaluated
/// at the input integrands, and returns the regressed integrands.
pub fn gamma_map(
    lattice: &NoiseLattice,
    market: &MarketLattice,
    pop: &PopulationLaw,
    state: &[BsdeSolution],
) -> Result<Vec<BsdeSolution>, MeanFieldError> {
    if state.len() != pop.len() {
        return Err(MeanFieldError::Precondition(format!(
            "state carries {} atoms, population has {}",
            state.len(),
            pop.len()
        )));
    }
    let gamma_hat = pop.gamma_hat();
    let zbar = population_zbar(lattice, pop, state);
    let d0 = lattice.common_dim();
    let d1 = lattice.idio_dim();
    let mut next = Vec::with_capacity(pop.len());
    for (atom, (_, agent)) in pop.atoms().iter().enumerate() {
        let gamma = agent.risk_aversion;
        let terminal = bsde::terminal_liability(lattice, agent)?;
        let input = &state[atom];
        let solution = bsde::sweep(
            lattice,
            market,
            terminal,
            |k, common, idio, _par, _perp, _z1| {
                let idio_k = lattice.idio_nodes(k);
                let at = common * idio_k + idio;
                let z0_par = &input.z0_par.slices[k][at * d0..(at + 1) * d0];
                let z0_perp = &input.z0_perp.slices[k][at * d0..(at + 1) * d0];
                let z1 = &input.z1.slices[k][at * d1..(at + 1) * d1];
                driver_meanfield_split(z0_par, z0_perp, z1, zbar.get(k, common), gamma, gamma_hat)
            },
        )?;
        next.push(solution);
    }
    Ok(next)
}

/// Sup-over-nodes distance between two iterates' integrands plus the change
/// of the BMO surrogate, maximized over atoms.
fn iterate_delta(a: &[BsdeSolution], b: &[BsdeSolution]) -> f64 {
    let mut sup: f64 = 0.0;
    let mut bmo_change: f64 = 0.0;
    for (sa, sb) in a.iter().zip(b) {
        for (za, zb) in sa.z0.slices.iter().zip(&sb.z0.slices) {
            for (x, y) in za.iter().zip(zb) {
                sup = sup.max((x - y).abs());
            }
        }
        for (za, zb) in sa.z1.slices.iter().zip(&sb.z1.slices) {
            for (x, y) in za.iter().zip(zb) {
                sup = sup.max((x - y).abs());
            }
        }
        bmo_change = bmo_change.max((sa.bmo_surrogate - sb.bmo_surrogate).abs());
    }
    sup + bmo_change
}

/// BMO-surrogate distance between two iterates (the squared-norm metric of
/// the contraction estimate), maximized over atoms.
pub fn state_bmo_distance(
    lattice: &NoiseLattice,
    a: &[BsdeSolution],
    b: &[BsdeSolution],
) -> f64 {
    let mut worst: f64 = 0.0;
    for (sa, sb) in a.iter().zip(b) {
        let diff = |x: &VecField, y: &VecField| VecField {
            width: x.width,
            slices: x
                .slices
                .iter()
                .zip(&y.slices)
                .map(|(p, q)| p.iter().zip(q).map(|(u, v)| u - v).collect())
                .collect(),
        };
        let d0 = diff(&sa.z0, &sb.z0);
        let d1 = diff(&sa.z1, &sb.z1);
        worst = worst.max(bsde::bmo_surrogate(lattice, &d0, &d1));
    }
    worst
}

/// Per-iteration convergence diagnostics of the Picard sweep.
#[derive(Debug, Clone, Copy)]
pub struct IterationDiag {
    pub iteration: usize,
    /// Sup-over-nodes change of the integrands plus the BMO-surrogate change.
    pub delta: f64,
    /// `delta_k / delta_{k-1}`; absent on the first iteration.
    pub ratio: Option<f64>,
    /// Max over atoms of the iterate's BMO surrogate.
    pub bmo: f64,
    /// Whether the iterate sits inside the stability ball (surrogate <= R^2).
    pub in_ball: bool,
}

/// Fixed point of the frozen-driver map: per-atom solutions, the conditional
/// mean of the projected common integrand, the equilibrium premium, and the
/// full iteration history.
#[derive(Debug, Clone)]
pub struct MeanFieldSolution {
    pub atoms: Vec<BsdeSolution>,
    pub zbar: CommonVecField,
    pub theta: CommonVecField,
    pub diagnostics: Vec<IterationDiag>,
    pub f_sup: f64,
    pub constants: GammaConstants,
}

impl MeanFieldSolution {
    /// Whether the liability size sits below the contraction threshold, i.e.
    /// the run sits inside the proven contraction regime rather than exploratory territory.
    pub fn in_theory(&self) -> bool {
        self.f_sup < self.constants.contraction_threshold()
    }

    pub fn max_abs_y(&self) -> f64 {
        self.atoms.iter().map(|a| a.max_abs_y).fold(0.0, f64::max)
    }

    pub fn max_bmo(&self) -> f64 {
        self.atoms
            .iter()
            .map(|a| a.bmo_surrogate)
            .fold(0.0, f64::max)
    }

    /// Value-process bound `sqrt(3) R` that holds inside the stability regime.
    pub fn y_bound(&self) -> f64 {
        3.0f64.sqrt() * self.constants.ball_radius(self.f_sup)
    }

    pub fn iterations(&self) -> usize {
        self.diagnostics.len()
    }
}

fn assemble(
    lattice: &NoiseLattice,
    pop: &PopulationLaw,
    atoms: Vec<BsdeSolution>,
    diagnostics: Vec<IterationDiag>,
) -> MeanFieldSolution {
    let constants = GammaConstants::from_population(pop);
    let zbar = population_zbar(lattice, pop, &atoms);
    let theta = theta_from_zbar(&zbar, constants.gamma_hat);
    MeanFieldSolution {
        atoms,
        zbar,
        theta,
        diagnostics,
        f_sup: pop.sup_liability(),
        constants,
    }
}

/// Solves the mean-field BSDE by Picard iteration of the frozen-driver map
/// from the zero integrand. Stops when the iterate change drops to `tol`;
/// reports divergence with the full ratio history otherwise (expected
/// territory when the liability size exceeds the contraction threshold).
pub fn solve_fixed_point(
    lattice: &NoiseLattice,
    market: &MarketLattice,
    pop: &PopulationLaw,
    tol: f64,
    max_iter: usize,
) -> Result<MeanFieldSolution, MeanFieldError> {
    if !(tol > 0.0) {
        return Err(MeanFieldError::Precondition(format!(
            "tolerance must be positive, got {tol}"
        )));
    }
    if max_iter == 0 {
        return Err(MeanFieldError::Precondition(
            "need at least one Picard iteration".into(),
        ));
    }
    let constants = GammaConstants::from_population(pop);
    let f_sup = pop.sup_liability();
    let radius_sq = {
        let r = constants.ball_radius(f_sup);
        r * r
    };

    let mut state = zero_state(lattice, pop.len());
    let mut diagnostics: Vec<IterationDiag> = Vec::new();
    for iteration in 1..=max_iter {
        let next = gamma_map(lattice, market, pop, &state)?;
        let delta = iterate_delta(&next, &state);
        let bmo = next
            .iter()
            .map(|a| a.bmo_surrogate)
            .fold(0.0f64, f64::max);
        let ratio = diagnostics
            .last()
            .map(|prev| if prev.delta > 0.0 { delta / prev.delta } else { 0.0 });
        diagnostics.push(IterationDiag {
            iteration,
            delta,
            ratio,
            bmo,
            in_ball: bmo <= radius_sq,
        });
        state = next;
        if delta <= tol {
            return Ok(assemble(lattice, pop, state, diagnostics));
        }
    }
    let ratios: Vec<f64> = diagnostics.iter().filter_map(|d| d.ratio).collect();
    Err(MeanFieldError::Divergence {
        tol,
        iterations: max_iter,
        last_delta: diagnostics.last().map(|d| d.delta).unwrap_or(f64::NAN),
        ratios,
    })
}

/// Additive decomposition of one atom's liability: the shared common
/// amplitude (entering as `amp * sign(W0_T) / gamma`) and the atom's
/// idiosyncratic terminal payoff in normalized units.
fn additive_components(
    agent: &crate::model::AgentType,
) -> Option<(f64, AdditiveIdioPart)> {
    use crate::model::LiabilityKind::*;
    match &agent.liability.kind {
        Constant { value } => Some((0.0, AdditiveIdioPart::Constant(*value))),
        IdioSign { amplitude } => Some((0.0, AdditiveIdioPart::Sign(*amplitude))),
        Additive {
            common_amplitude,
            idio_amplitude,
        } => Some((*common_amplitude, AdditiveIdioPart::Sign(*idio_amplitude))),
        _ => None,
    }
}

enum AdditiveIdioPart {
    Constant(f64),
    Sign(f64),
}

/// Direct construction of the mean-field solution for additive liabilities
/// `F = F0 / gamma + F1`: the normalized value decouples into a common-only
/// and an idiosyncratic-only backward equation, each with driver `|z|^2 / 2`,
/// solved with the same explicit scheme as the fixed point (so the two code
/// paths agree node-wise, not just at first order).
pub fn solve_additive(
    lattice: &NoiseLattice,
    market: &MarketLattice,
    pop: &PopulationLaw,
) -> Result<MeanFieldSolution, MeanFieldError> {
    let steps = lattice.steps();
    let dt = lattice.dt();
    let d0 = lattice.common_dim();
    let d1 = lattice.idio_dim();

    // Preconditions: every atom additive with one shared common amplitude.
    let mut common_amp: Option<f64> = None;
    let mut idio_parts = Vec::with_capacity(pop.len());
    for (_, agent) in pop.atoms() {
        let Some((ca, idio)) = additive_components(agent) else {
            return Err(MeanFieldError::Precondition(format!(
                "liability {:?} is not of the additive form",
                agent.liability.kind
            )));
        };
        match common_amp {
            None => common_amp = Some(ca),
            Some(existing) if existing == ca => {}
            Some(existing) => {
                return Err(MeanFieldError::Precondition(format!(
                    "additive construction needs one shared common amplitude, got {existing} and {ca}"
                )));
            }
        }
        idio_parts.push(idio);
    }
    let common_amp = common_amp.unwrap();

    // Common component: terminal amp * sign(W0_T[0]), driver |z|^2 / 2.
    let terminal_common: Vec<f64> = (0..lattice.common_nodes(steps))
        .map(|c| {
            let w = lattice.common_state(steps, c)[0];
            common_amp * if w > 0.0 { 1.0 } else if w < 0.0 { -1.0 } else { 0.0 }
        })
        .collect();
    let mut y0 = vec![Vec::new(); steps + 1];
    let mut z0 = vec![Vec::new(); steps];
    y0[steps] = terminal_common;
    for k in (0..steps).rev() {
        let (mean, z) = lattice.regress_common_step(&y0[k + 1]);
        y0[k] = mean
            .iter()
            .enumerate()
            .map(|(c, m)| m + 0.5 * norm_sq(&z[c * d0..(c + 1) * d0]) * dt)
            .collect();
        z0[k] = z;
    }

    // Idiosyncratic components per atom (normalized by the atom's gamma).
    let mut atoms = Vec::with_capacity(pop.len());
    for (atom, (_, agent)) in pop.atoms().iter().enumerate() {
        let gamma = agent.risk_aversion;
        let terminal_idio: Vec<f64> = (0..lattice.idio_nodes(steps))
            .map(|i| {
                let value = match &idio_parts[atom] {
                    AdditiveIdioPart::Constant(v) => *v,
                    AdditiveIdioPart::Sign(amp) => {
                        let w = lattice.idio_state(steps, i)[0];
                        amp * if w > 0.0 { 1.0 } else if w < 0.0 { -1.0 } else { 0.0 }
                    }
                };
                gamma * value
            })
            .collect();
        let mut y1 = vec![Vec::new(); steps + 1];
        let mut z1 = vec![Vec::new(); steps];
        y1[steps] = terminal_idio;
        for k in (0..steps).rev() {
            let (mean, z) = lattice.regress_idio_step(&y1[k + 1]);
            y1[k] = mean
                .iter()
                .enumerate()
                .map(|(i, m)| m + 0.5 * norm_sq(&z[i * d1..(i + 1) * d1]) * dt)
                .collect();
            z1[k] = z;
        }

        // Assemble the joint, unnormalized solution for this atom.
        let mut y = ScalarField::zeros(lattice);
        let mut jz0 = VecField::zeros(lattice, d0, steps);
        let mut jz1 = VecField::zeros(lattice, d1, steps);
        let mut jpar = VecField::zeros(lattice, d0, steps);
        let mut jperp = VecField::zeros(lattice, d0, steps);
        for k in 0..=steps {
            let idio_k = lattice.idio_nodes(k);
            for c in 0..lattice.common_nodes(k) {
                for i in 0..idio_k {
                    y.slices[k][c * idio_k + i] = (y0[k][c] + y1[k][i]) / gamma;
                }
            }
        }
        for k in 0..steps {
            let idio_k = lattice.idio_nodes(k);
            for c in 0..lattice.common_nodes(k) {
                let scaled0: Vec<f64> =
                    z0[k][c * d0..(c + 1) * d0].iter().map(|v| v / gamma).collect();
                let (par, perp) = market.node(k, c).project(&scaled0);
                for i in 0..idio_k {
                    let at = (c * idio_k + i) * d0;
                    jz0.slices[k][at..at + d0].copy_from_slice(&scaled0);
                    jpar.slices[k][at..at + d0].copy_from_slice(&par);
                    jperp.slices[k][at..at + d0].copy_from_slice(&perp);
                }
                for i in 0..idio_k {
                    let at = (c * idio_k + i) * d1;
                    for j in 0..d1 {
                        jz1.slices[k][at + j] = z1[k][i * d1 + j] / gamma;
                    }
                }
            }
        }
        let bmo_surrogate = bsde::bmo_surrogate(lattice, &jz0, &jz1);
        let max_abs_y = y.max_abs();
        atoms.push(BsdeSolution {
            y,
            z0: jz0,
            z1: jz1,
            z0_par: jpar,
            z0_perp: jperp,
            max_abs_y,
            bmo_surrogate,
        });
    }

    Ok(assemble(lattice, pop, atoms, Vec::new()))
}
