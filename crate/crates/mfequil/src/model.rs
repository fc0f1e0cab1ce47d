//! Market, agent, and population domain types, the projection algebra on the
//! row space of the volatility matrix, and aggregate risk-aversion constants.
//!
//! The market carries `n` risky stocks driven by a `d0`-dimensional common
//! Brownian motion through a volatility matrix `sigma` whose Gram matrix
//! `sigma * sigma^T` has eigenvalues pinned inside `[lambda_lo, lambda_hi]`.
//! Strategies and the risk premium live in the row space of `sigma`; the
//! orthogonal projection onto that subspace is computed by explicit normal
//! equations with partial pivoting.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::ModelError;

/// Relative tolerance for rank checks, measured against the largest singular value.
pub const RANK_TOLERANCE: f64 = 1e-10;

/// Uniform time grid on `[0, T]` with `K` steps of size `dt = T / K`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self, ModelError> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(ModelError::Config(format!(
                "time horizon must be a positive real, got {horizon}"
            )));
        }
        if steps == 0 {
            return Err(ModelError::Config("time grid needs at least one step".into()));
        }
        Ok(Self { horizon, steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    /// Grid time `t_k = k * dt`.
    pub fn t(&self, k: usize) -> f64 {
        self.dt() * k as f64
    }
}

/// Volatility specification: a constant matrix, or the same matrix scaled by a
/// bounded function of the common-noise state (a scalar stochastic-volatility
/// toggle). Both are adapted to the common filtration only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SigmaSpec {
    Constant(Vec<Vec<f64>>),
    /// `sigma(w) = base * (1 + amplitude * tanh(w[0]))`, requires `|amplitude| < 1`.
    StateScaled {
        base: Vec<Vec<f64>>,
        amplitude: f64,
    },
}

impl SigmaSpec {
    fn base_rows(&self) -> &Vec<Vec<f64>> {
        match self {
            SigmaSpec::Constant(rows) => rows,
            SigmaSpec::StateScaled { base, .. } => base,
        }
    }

    fn to_matrix(rows: &[Vec<f64>]) -> Result<DMatrix<f64>, ModelError> {
        let n = rows.len();
        if n == 0 {
            return Err(ModelError::Config("sigma matrix must have at least one row".into()));
        }
        let d0 = rows[0].len();
        if d0 == 0 || rows.iter().any(|r| r.len() != d0) {
            return Err(ModelError::Config("sigma matrix rows must be nonempty and equal length".into()));
        }
        Ok(DMatrix::from_fn(n, d0, |i, j| rows[i][j]))
    }
}

/// Market primitives: dimensions, the volatility map, and its spectral bounds.
#[derive(Debug, Clone)]
pub struct MarketModel {
    pub stocks: usize,
    pub common_dim: usize,
    pub idio_dim: usize,
    pub sigma: SigmaSpec,
    pub lambda_lo: f64,
    pub lambda_hi: f64,
    base: DMatrix<f64>,
}

impl MarketModel {
    pub fn new(
        sigma: SigmaSpec,
        idio_dim: usize,
        lambda_lo: f64,
        lambda_hi: f64,
    ) -> Result<Self, ModelError> {
        let base = SigmaSpec::to_matrix(sigma.base_rows())?;
        let (stocks, common_dim) = (base.nrows(), base.ncols());
        if stocks > common_dim {
            return Err(ModelError::Validation {
                rule: "noise-dimension".into(),
                message: format!(
                    "number of stocks ({stocks}) must not exceed the common-noise dimension ({common_dim})"
                ),
            });
        }
        if idio_dim == 0 {
            return Err(ModelError::Config("idiosyncratic dimension must be positive".into()));
        }
        if !(lambda_lo > 0.0 && lambda_hi > lambda_lo) {
            return Err(ModelError::Validation {
                rule: "lambda-ordering".into(),
                message: format!("need 0 < lambda_lo < lambda_hi, got [{lambda_lo}, {lambda_hi}]"),
            });
        }
        if let SigmaSpec::StateScaled { amplitude, .. } = sigma {
            if !(amplitude.abs() < 1.0) {
                return Err(ModelError::Config(format!(
                    "state-scaled sigma amplitude must satisfy |a| < 1, got {amplitude}"
                )));
            }
        }
        Ok(Self {
            stocks,
            common_dim,
            idio_dim,
            sigma,
            lambda_lo,
            lambda_hi,
            base,
        })
    }

    /// Volatility matrix at a common-noise state.
    pub fn sigma_at(&self, w0: &[f64]) -> DMatrix<f64> {
        match &self.sigma {
            SigmaSpec::Constant(_) => self.base.clone(),
            SigmaSpec::StateScaled { amplitude, .. } => {
                let scale = 1.0 + amplitude * w0[0].tanh();
                &self.base * scale
            }
        }
    }
}

/// Partial-pivoting LU factorization of a small symmetric positive system,
/// used to solve the normal equations of the projection.
#[derive(Debug, Clone)]
struct PivotedLu {
    lu: DMatrix<f64>,
    perm: Vec<usize>,
}

impl PivotedLu {
    fn factor(a: &DMatrix<f64>, pivot_floor: f64) -> Result<Self, ModelError> {
        let n = a.nrows();
        let mut lu = a.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        for col in 0..n {
            let mut best = col;
            for row in col + 1..n {
                if lu[(row, col)].abs() > lu[(best, col)].abs() {
                    best = row;
                }
            }
            if lu[(best, col)].abs() <= pivot_floor {
                return Err(ModelError::SingularSystem { pivot: col });
            }
            if best != col {
                lu.swap_rows(best, col);
                perm.swap(best, col);
            }
            let inv_pivot = 1.0 / lu[(col, col)];
            for row in col + 1..n {
                let factor = lu[(row, col)] * inv_pivot;
                lu[(row, col)] = factor;
                for j in col + 1..n {
                    let sub = factor * lu[(col, j)];
                    lu[(row, j)] -= sub;
                }
            }
        }
        Ok(Self { lu, perm })
    }

    fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.perm.len();
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for col in 0..n {
            for row in col + 1..n {
                x[row] -= self.lu[(row, col)] * x[col];
            }
        }
        for col in (0..n).rev() {
            for row in col + 1..n {
                x[col] -= self.lu[(col, row)] * x[row];
            }
            x[col] /= self.lu[(col, col)];
        }
        x
    }
}

/// Volatility matrix at one lattice node together with the factored Gram
/// matrix `sigma * sigma^T`, the extreme eigenvalues, and projection helpers.
#[derive(Debug, Clone)]
pub struct SigmaNode {
    sigma: DMatrix<f64>,
    gram: PivotedLu,
    pub min_eigenvalue: f64,
    pub max_eigenvalue: f64,
}

impl SigmaNode {
    /// Builds the node, rejecting rank-deficient volatility. The rank check
    /// uses `RANK_TOLERANCE` relative to the largest singular value.
    pub fn new(sigma: DMatrix<f64>) -> Result<Self, ModelError> {
        let svd = sigma.clone().svd(false, false);
        let max_sv = svd.singular_values.max();
        let min_sv = svd.singular_values.min();
        if !(min_sv > RANK_TOLERANCE * max_sv) || max_sv == 0.0 {
            return Err(ModelError::RankDeficient {
                min_sv,
                tol: RANK_TOLERANCE * max_sv,
            });
        }
        let gram_matrix = &sigma * sigma.transpose();
        let gram = PivotedLu::factor(&gram_matrix, (RANK_TOLERANCE * max_sv).powi(2))?;
        Ok(Self {
            sigma,
            gram,
            min_eigenvalue: min_sv * min_sv,
            max_eigenvalue: max_sv * max_sv,
        })
    }

    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    pub fn stocks(&self) -> usize {
        self.sigma.nrows()
    }

    pub fn common_dim(&self) -> usize {
        self.sigma.ncols()
    }

    /// Orthogonal projection of the row `z` onto the row space of sigma,
    /// returned as `(z_par, z_perp)` with `z = z_par + z_perp`.
    ///
    /// Solves the normal equations `(sigma sigma^T) u = sigma z^T` and sets
    /// `z_par = u^T sigma`.
    pub fn project(&self, z: &[f64]) -> (Vec<f64>, Vec<f64>) {
        debug_assert_eq!(z.len(), self.common_dim());
        let rhs: Vec<f64> = (0..self.stocks())
            .map(|row| (0..self.common_dim()).map(|j| self.sigma[(row, j)] * z[j]).sum())
            .collect();
        let u = self.gram.solve(&rhs);
        let mut par = vec![0.0; self.common_dim()];
        for (row, coeff) in u.iter().enumerate() {
            for j in 0..self.common_dim() {
                par[j] += coeff * self.sigma[(row, j)];
            }
        }
        let perp: Vec<f64> = z.iter().zip(&par).map(|(zi, pi)| zi - pi).collect();
        (par, perp)
    }

    /// Projection of `z` onto the row space, discarding the orthogonal part.
    pub fn project_par(&self, z: &[f64]) -> Vec<f64> {
        self.project(z).0
    }

    /// Risk premium `theta = sigma^T (sigma sigma^T)^{-1} mu` for a drift `mu`.
    /// By construction `theta^T` lies in the row space and `sigma theta = mu`.
    pub fn risk_premium_from_drift(&self, mu: &[f64]) -> Vec<f64> {
        debug_assert_eq!(mu.len(), self.stocks());
        let u = self.gram.solve(mu);
        let mut theta = vec![0.0; self.common_dim()];
        for (row, coeff) in u.iter().enumerate() {
            for j in 0..self.common_dim() {
                theta[j] += coeff * self.sigma[(row, j)];
            }
        }
        theta
    }

    /// Stock positions `pi = (sigma sigma^T)^{-1} sigma p^T` realizing a
    /// row-space exposure `p = pi^T sigma`.
    pub fn position_from_exposure(&self, p: &[f64]) -> Vec<f64> {
        let rhs: Vec<f64> = (0..self.stocks())
            .map(|row| (0..self.common_dim()).map(|j| self.sigma[(row, j)] * p[j]).sum())
            .collect();
        self.gram.solve(&rhs)
    }
}

/// Volatility nodes evaluated (and validated) at every common lattice node.
///
/// Building this structure checks the spectral bounds `lambda_lo I <= sigma
/// sigma^T <= lambda_hi I` at every node the solvers will ever touch.
#[derive(Debug)]
pub struct MarketLattice {
    market: MarketModel,
    nodes: Vec<Vec<SigmaNode>>,
}

impl MarketLattice {
    pub fn build(
        market: MarketModel,
        lattice: &crate::lattice::NoiseLattice,
    ) -> Result<Self, ModelError> {
        if market.common_dim != lattice.common_dim() || market.idio_dim != lattice.idio_dim() {
            return Err(ModelError::Config(format!(
                "market dimensions ({}, {}) do not match lattice dimensions ({}, {})",
                market.common_dim,
                market.idio_dim,
                lattice.common_dim(),
                lattice.idio_dim()
            )));
        }
        let slack = 1e-12;
        let mut nodes = Vec::with_capacity(lattice.steps());
        for k in 0..lattice.steps() {
            let mut slice = Vec::with_capacity(lattice.common_nodes(k));
            for c in 0..lattice.common_nodes(k) {
                let state = lattice.common_state(k, c);
                let node = SigmaNode::new(market.sigma_at(state.as_slice()))?;
                if node.min_eigenvalue < market.lambda_lo * (1.0 - slack)
                    || node.max_eigenvalue > market.lambda_hi * (1.0 + slack)
                {
                    return Err(ModelError::Validation {
                        rule: "sigma-spectral-bounds".into(),
                        message: format!(
                            "eigenvalues of sigma sigma^T at node ({k}, {c}) are [{:.6}, {:.6}], outside [{}, {}]",
                            node.min_eigenvalue,
                            node.max_eigenvalue,
                            market.lambda_lo,
                            market.lambda_hi
                        ),
                    });
                }
                slice.push(node);
            }
            nodes.push(slice);
        }
        Ok(Self { market, nodes })
    }

    pub fn market(&self) -> &MarketModel {
        &self.market
    }

    pub fn node(&self, k: usize, common: usize) -> &SigmaNode {
        &self.nodes[k][common]
    }
}

/// Classification of how a liability loads on the two noise families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StructureTag {
    CommonOnly,
    IdioOnly,
    Additive,
    General,
}

/// Terminal liability specification. Sign payoffs read the first coordinate of
/// the terminal noise state; the additive kind follows the `F = F0/gamma + F1`
/// decomposition that decouples the common and idiosyncratic parts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LiabilityKind {
    Constant { value: f64 },
    /// `amplitude * sign(W0_T[0])`
    CommonSign { amplitude: f64 },
    /// `amplitude * sign(W1_T[0])`
    IdioSign { amplitude: f64 },
    /// `amplitude * sign(W0_T[0] + W1_T[0])`, a non-additive mix of the two families.
    MixedSign { amplitude: f64 },
    /// `(common_amplitude * sign(W0_T[0])) / gamma + idio_amplitude * sign(W1_T[0])`
    Additive {
        common_amplitude: f64,
        idio_amplitude: f64,
    },
    /// Explicit values per terminal `(common, idio)` node pair, row-major in
    /// the common index.
    CustomTable { values: Vec<f64>, bound: f64 },
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Liability of one agent type: a bounded terminal payoff of the common and
/// idiosyncratic paths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiabilitySpec {
    pub kind: LiabilityKind,
}

impl LiabilitySpec {
    pub fn new(kind: LiabilityKind) -> Self {
        Self { kind }
    }

    /// Evaluates the payoff at terminal noise states. `gamma` is the owning
    /// agent's risk aversion (the additive kind scales its common part by
    /// `1/gamma`); `terminal_index` identifies the `(common, idio)` node pair
    /// for table lookups.
    pub fn evaluate(
        &self,
        gamma: f64,
        common_terminal: &[f64],
        idio_terminal: &[f64],
        terminal_index: (usize, usize, usize),
    ) -> f64 {
        match &self.kind {
            LiabilityKind::Constant { value } => *value,
            LiabilityKind::CommonSign { amplitude } => amplitude * sign(common_terminal[0]),
            LiabilityKind::IdioSign { amplitude } => amplitude * sign(idio_terminal[0]),
            LiabilityKind::MixedSign { amplitude } => {
                amplitude * sign(common_terminal[0] + idio_terminal[0])
            }
            LiabilityKind::Additive {
                common_amplitude,
                idio_amplitude,
            } => common_amplitude * sign(common_terminal[0]) / gamma
                + idio_amplitude * sign(idio_terminal[0]),
            LiabilityKind::CustomTable { values, .. } => {
                let (common, idio, idio_count) = terminal_index;
                values[common * idio_count + idio]
            }
        }
    }

    /// Supremum bound `||F||_inf` for the given risk aversion.
    pub fn sup_bound(&self, gamma: f64) -> f64 {
        match &self.kind {
            LiabilityKind::Constant { value } => value.abs(),
            LiabilityKind::CommonSign { amplitude }
            | LiabilityKind::IdioSign { amplitude }
            | LiabilityKind::MixedSign { amplitude } => amplitude.abs(),
            LiabilityKind::Additive {
                common_amplitude,
                idio_amplitude,
            } => common_amplitude.abs() / gamma + idio_amplitude.abs(),
            LiabilityKind::CustomTable { bound, .. } => *bound,
        }
    }

    pub fn structure(&self) -> StructureTag {
        match &self.kind {
            LiabilityKind::Constant { .. } => StructureTag::Additive,
            LiabilityKind::CommonSign { .. } => StructureTag::CommonOnly,
            LiabilityKind::IdioSign { .. } => StructureTag::IdioOnly,
            LiabilityKind::Additive { .. } => StructureTag::Additive,
            LiabilityKind::MixedSign { .. } | LiabilityKind::CustomTable { .. } => {
                StructureTag::General
            }
        }
    }
}

/// One agent type: bounded initial wealth, risk aversion, terminal liability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentType {
    pub initial_wealth: f64,
    pub risk_aversion: f64,
    pub liability: LiabilitySpec,
}

/// Finite weighted mixture of agent types. Sampling an agent draws a type from
/// the weights and an idiosyncratic path independently of all other agents
/// given the common path, which realizes the conditional-i.i.d. population.
#[derive(Debug, Clone)]
pub struct PopulationLaw {
    atoms: Vec<(f64, AgentType)>,
    pub gamma_lo: f64,
    pub gamma_hi: f64,
}

impl PopulationLaw {
    pub fn new(
        atoms: Vec<(f64, AgentType)>,
        gamma_lo: f64,
        gamma_hi: f64,
    ) -> Result<Self, ModelError> {
        if atoms.is_empty() {
            return Err(ModelError::Config("population must have at least one atom".into()));
        }
        if !(gamma_lo > 0.0 && gamma_hi >= gamma_lo) {
            return Err(ModelError::Validation {
                rule: "risk-aversion-range".into(),
                message: format!("need 0 < gamma_lo <= gamma_hi, got [{gamma_lo}, {gamma_hi}]"),
            });
        }
        let weight_sum: f64 = atoms.iter().map(|(w, _)| w).sum();
        if atoms.iter().any(|(w, _)| !(*w > 0.0)) || (weight_sum - 1.0).abs() > 1e-12 {
            return Err(ModelError::Validation {
                rule: "population-weights".into(),
                message: format!("weights must be positive and sum to 1, got sum {weight_sum}"),
            });
        }
        for (_, agent) in &atoms {
            let g = agent.risk_aversion;
            if !(g >= gamma_lo && g <= gamma_hi) {
                return Err(ModelError::Validation {
                    rule: "risk-aversion-range".into(),
                    message: format!("atom risk aversion {g} outside [{gamma_lo}, {gamma_hi}]"),
                });
            }
            if !agent.initial_wealth.is_finite() {
                return Err(ModelError::Validation {
                    rule: "initial-wealth-bounded".into(),
                    message: "initial wealth must be finite".into(),
                });
            }
        }
        Ok(Self {
            atoms,
            gamma_lo,
            gamma_hi,
        })
    }

    pub fn atoms(&self) -> &[(f64, AgentType)] {
        &self.atoms
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn weight(&self, atom: usize) -> f64 {
        self.atoms[atom].0
    }

    pub fn agent(&self, atom: usize) -> &AgentType {
        &self.atoms[atom].1
    }

    /// Harmonic-mean aggregate risk aversion `1 / E[1/gamma]`.
    pub fn gamma_hat(&self) -> f64 {
        let mean_inverse: f64 = self
            .atoms
            .iter()
            .map(|(w, a)| w / a.risk_aversion)
            .sum();
        1.0 / mean_inverse
    }

    /// Population-wide liability bound `max_a ||F_a||_inf`.
    pub fn sup_liability(&self) -> f64 {
        self.atoms
            .iter()
            .map(|(_, a)| a.liability.sup_bound(a.risk_aversion))
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::DVector;
    use proptest::prelude::*;

    fn atom(gamma: f64) -> AgentType {
        AgentType {
            initial_wealth: 0.0,
            risk_aversion: gamma,
            liability: LiabilitySpec::new(LiabilityKind::Constant { value: 0.0 }),
        }
    }

    #[test]
    fn gamma_hat_constant_population() {
        let pop = PopulationLaw::new(vec![(1.0, atom(2.0))], 2.0, 2.0).unwrap();
        assert_eq!(pop.gamma_hat(), 2.0);
    }

    #[test]
    fn gamma_hat_two_atoms() {
        let pop =
            PopulationLaw::new(vec![(0.5, atom(1.0)), (0.5, atom(2.0))], 1.0, 2.0).unwrap();
        assert_relative_eq!(pop.gamma_hat(), 4.0 / 3.0, max_relative = 1e-15);
    }

    #[test]
    fn gamma_hat_weighted_atoms() {
        // hand evaluation: E[1/gamma] = 0.3/0.5 + 0.7/5 = 0.74
        let pop =
            PopulationLaw::new(vec![(0.3, atom(0.5)), (0.7, atom(5.0))], 0.5, 5.0).unwrap();
        assert_relative_eq!(pop.gamma_hat(), 1.0 / 0.74, max_relative = 1e-15);
        assert!((pop.gamma_lo..=pop.gamma_hi).contains(&pop.gamma_hat()));
    }

    #[test]
    fn empty_population_rejected() {
        assert!(matches!(
            PopulationLaw::new(vec![], 1.0, 2.0),
            Err(ModelError::Config(_))
        ));
    }

    #[test]
    fn bad_weights_rejected() {
        let err = PopulationLaw::new(vec![(0.4, atom(1.0)), (0.4, atom(2.0))], 1.0, 2.0);
        assert!(matches!(err, Err(ModelError::Validation { .. })));
    }

    #[test]
    fn projection_identity_sigma() {
        let node = SigmaNode::new(DMatrix::identity(2, 2)).unwrap();
        let z = [0.7, -1.3];
        let (par, perp) = node.project(&z);
        assert_eq!(par, vec![0.7, -1.3]);
        assert_eq!(perp, vec![0.0, 0.0]);
    }

    #[test]
    fn projection_axis_aligned() {
        let node = SigmaNode::new(DMatrix::from_row_slice(1, 2, &[1.0, 0.0])).unwrap();
        let (par, perp) = node.project(&[3.0, 4.0]);
        assert_eq!(par, vec![3.0, 0.0]);
        assert_eq!(perp, vec![0.0, 4.0]);
    }

    #[test]
    fn projection_matches_pseudo_inverse_oracle() {
        // oracle: explicit sigma^T (sigma sigma^T)^{-1} sigma applied to z
        let sigma = DMatrix::from_row_slice(2, 3, &[1.0, 0.4, -0.2, 0.3, -1.1, 0.5]);
        let node = SigmaNode::new(sigma.clone()).unwrap();
        let gram_inv = (&sigma * sigma.transpose()).try_inverse().unwrap();
        let projector = sigma.transpose() * gram_inv * &sigma;
        let z = DVector::from_row_slice(&[0.9, -0.7, 0.25]);
        let oracle = &projector * &z;
        let (par, _) = node.project(z.as_slice());
        for j in 0..3 {
            assert_relative_eq!(par[j], oracle[j], epsilon = 1e-13);
        }
        // idempotence and theta reproduction
        let (par2, _) = node.project(&par);
        for j in 0..3 {
            assert_relative_eq!(par2[j], par[j], epsilon = 1e-13);
        }
        let theta = node.risk_premium_from_drift(&[0.2, -0.1]);
        let (theta_par, theta_perp) = node.project(&theta);
        for j in 0..3 {
            assert_relative_eq!(theta_par[j], theta[j], epsilon = 1e-13);
            assert!(theta_perp[j].abs() < 1e-13);
        }
    }

    #[test]
    fn risk_premium_zero_drift() {
        let node = SigmaNode::new(DMatrix::from_row_slice(1, 2, &[2.0, 0.0])).unwrap();
        assert_eq!(node.risk_premium_from_drift(&[0.0]), vec![0.0, 0.0]);
    }

    #[test]
    fn risk_premium_identity_sigma() {
        let node = SigmaNode::new(DMatrix::identity(1, 1)).unwrap();
        let theta = node.risk_premium_from_drift(&[0.2]);
        assert_relative_eq!(theta[0], 0.2, max_relative = 1e-15);
    }

    #[test]
    fn risk_premium_hand_example() {
        // sigma = [2 0], mu = 0.4: theta = sigma^T (sigma sigma^T)^{-1} mu = (0.2, 0)
        let node = SigmaNode::new(DMatrix::from_row_slice(1, 2, &[2.0, 0.0])).unwrap();
        let theta = node.risk_premium_from_drift(&[0.4]);
        assert_relative_eq!(theta[0], 0.2, max_relative = 1e-15);
        assert_eq!(theta[1], 0.0);
    }

    #[test]
    fn rank_deficient_sigma_rejected() {
        let sigma = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        assert!(matches!(
            SigmaNode::new(sigma),
            Err(ModelError::RankDeficient { .. })
        ));
    }

    #[test]
    fn additive_liability_scales_common_part() {
        let spec = LiabilitySpec::new(LiabilityKind::Additive {
            common_amplitude: 1.0,
            idio_amplitude: 0.5,
        });
        let value = spec.evaluate(2.0, &[0.3], &[-0.2], (0, 0, 1));
        assert_relative_eq!(value, 1.0 / 2.0 - 0.5, max_relative = 1e-15);
        assert_relative_eq!(spec.sup_bound(2.0), 1.0, max_relative = 1e-15);
        assert_eq!(spec.structure(), StructureTag::Additive);
    }

    proptest! {
        #[test]
        fn projection_properties(
            entries in proptest::collection::vec(-2.0f64..2.0, 6),
            z in proptest::collection::vec(-3.0f64..3.0, 3),
            y in proptest::collection::vec(-3.0f64..3.0, 3),
        ) {
            let sigma = DMatrix::from_row_slice(2, 3, &entries);
            // skip near-degenerate draws; Assumption-violating matrices are rejected elsewhere
            let svd = sigma.clone().svd(false, false);
            prop_assume!(svd.singular_values.min() > 1e-3 * svd.singular_values.max());
            prop_assume!(svd.singular_values.max() > 1e-3);
            let node = SigmaNode::new(sigma).unwrap();
            let (par, perp) = node.project(&z);
            // decomposition and norm split
            for j in 0..3 {
                prop_assert!((par[j] + perp[j] - z[j]).abs() < 1e-12);
            }
            let n2: f64 = z.iter().map(|v| v * v).sum();
            let split: f64 = par.iter().map(|v| v * v).sum::<f64>()
                + perp.iter().map(|v| v * v).sum::<f64>();
            prop_assert!((n2 - split).abs() <= 1e-9 * n2.max(1.0));
            // z_perp orthogonal to every row of sigma
            for row in 0..2 {
                let dot: f64 = (0..3).map(|j| node.sigma()[(row, j)] * perp[j]).sum();
                prop_assert!(dot.abs() < 1e-9);
            }
            // idempotence
            let (par2, _) = node.project(&par);
            for j in 0..3 {
                prop_assert!((par2[j] - par[j]).abs() < 1e-9);
            }
            // symmetry <P x, y> = <x, P y>
            let (pary, _) = node.project(&y);
            let lhs: f64 = par.iter().zip(&y).map(|(a, b)| a * b).sum();
            let rhs: f64 = z.iter().zip(&pary).map(|(a, b)| a * b).sum();
            prop_assert!((lhs - rhs).abs() < 1e-9);
        }

        #[test]
        fn sigma_times_risk_premium_recovers_drift(
            entries in proptest::collection::vec(-2.0f64..2.0, 6),
            mu in proptest::collection::vec(-1.0f64..1.0, 2),
        ) {
            let sigma = DMatrix::from_row_slice(2, 3, &entries);
            let svd = sigma.clone().svd(false, false);
            prop_assume!(svd.singular_values.min() > 1e-3 * svd.singular_values.max());
            prop_assume!(svd.singular_values.max() > 1e-3);
            let node = SigmaNode::new(sigma).unwrap();
            let theta = node.risk_premium_from_drift(&mu);
            for row in 0..2 {
                let recovered: f64 = (0..3).map(|j| node.sigma()[(row, j)] * theta[j]).sum();
                prop_assert!((recovered - mu[row]).abs() < 1e-9);
            }
        }

        #[test]
        fn gamma_hat_between_bounds(
            pairs in proptest::collection::vec((0.2f64..5.0, 0.05f64..1.0), 1..6),
        ) {
            let total: f64 = pairs.iter().map(|(_, w)| w).sum();
            let atoms: Vec<(f64, AgentType)> = pairs
                .iter()
                .map(|&(g, w)| (w / total, atom(g)))
                .collect();
            let lo = pairs.iter().map(|(g, _)| *g).fold(f64::INFINITY, f64::min);
            let hi = pairs.iter().map(|(g, _)| *g).fold(0.0, f64::max);
            // renormalized weights may miss 1.0 by float dust; retry with exact last weight
            let mut atoms = atoms;
            let correction: f64 = 1.0 - atoms.iter().map(|(w, _)| w).sum::<f64>();
            atoms.last_mut().unwrap().0 += correction;
            let pop = PopulationLaw::new(atoms, lo, hi).unwrap();
            let hat = pop.gamma_hat();
            prop_assert!(hat >= lo - 1e-12 && hat <= hi + 1e-12);
        }
    }
}
