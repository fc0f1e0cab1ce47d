//! Run configuration: a versioned JSON schema validated against the model
//! assumptions before any computation starts. Every assumption clause maps to
//! one named validation rule; the rule names are echoed into the manifest.

use serde::{Deserialize, Serialize};

use mfequil::bsde::ThetaSpec;
use mfequil::lattice::NoiseLattice;
use mfequil::meanfield::GammaConstants;
use mfequil::model::{
    AgentType, LiabilityKind, LiabilitySpec, MarketLattice, MarketModel, PopulationLaw, SigmaSpec,
    TimeGrid,
};

use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub grid: GridConfig,
    pub market: MarketConfig,
    pub population: PopulationConfig,
    #[serde(default)]
    pub theta: ThetaConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub clearing: ClearingConfig,
    #[serde(default)]
    pub oracle: OracleConfig,
    /// Atom used by `solve-agent` and `verify`.
    #[serde(default)]
    pub agent_index: usize,
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: String,
}

fn default_output_dir() -> String {
    "out".into()
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub horizon: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketConfig {
    pub stocks: usize,
    pub common_dim: usize,
    pub idio_dim: usize,
    pub sigma: SigmaConfig,
    pub lambda_lo: f64,
    pub lambda_hi: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SigmaConfig {
    Constant { matrix: Vec<Vec<f64>> },
    StateScaled { matrix: Vec<Vec<f64>>, amplitude: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PopulationConfig {
    pub gamma_lo: f64,
    pub gamma_hi: f64,
    /// Optional bound enforced on initial wealths.
    #[serde(default)]
    pub wealth_bound: Option<f64>,
    pub atoms: Vec<AtomConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AtomConfig {
    pub weight: f64,
    pub initial_wealth: f64,
    pub risk_aversion: f64,
    pub liability: LiabilityKind,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ThetaConfig {
    #[default]
    Zero,
    ConstantDrift {
        drift: Vec<f64>,
    },
    PerStepDrift {
        drift: Vec<Vec<f64>>,
    },
    StateDrift {
        scale: f64,
    },
    /// Solve the population equilibrium and use its premium.
    MeanField,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 100,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClearingConfig {
    pub n_list: Vec<usize>,
    pub outer_samples: usize,
}

impl Default for ClearingConfig {
    fn default() -> Self {
        Self {
            n_list: vec![4, 16, 64, 256],
            outer_samples: 2000,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleConfig {
    pub p_max: f64,
    pub resolution: f64,
    pub drift_tolerance: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            p_max: 1.0,
            resolution: 0.01,
            drift_tolerance: 1e-12,
        }
    }
}

/// Everything a command needs, constructed after validation.
pub struct Workspace {
    pub lattice: NoiseLattice,
    pub market: MarketLattice,
    pub population: PopulationLaw,
    pub constants: GammaConstants,
    pub f_sup: f64,
    /// Names of the validation rules that were checked.
    pub rules: Vec<&'static str>,
    /// "in-theory" when the liability size sits below the contraction
    /// threshold, "exploratory" otherwise.
    pub regime: &'static str,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let config: RunConfig = serde_json::from_str(text)
            .map_err(|e| CliError::Config(format!("config parse error: {e}")))?;
        if config.version != SCHEMA_VERSION {
            return Err(CliError::Config(format!(
                "unsupported schema version {} (expected {SCHEMA_VERSION})",
                config.version
            )));
        }
        Ok(config)
    }

    fn sigma_spec(&self) -> SigmaSpec {
        match &self.market.sigma {
            SigmaConfig::Constant { matrix } => SigmaSpec::Constant(matrix.clone()),
            SigmaConfig::StateScaled { matrix, amplitude } => SigmaSpec::StateScaled {
                base: matrix.clone(),
                amplitude: *amplitude,
            },
        }
    }

    pub fn theta_spec(&self) -> Option<ThetaSpec> {
        match &self.theta {
            ThetaConfig::Zero => Some(ThetaSpec::Zero),
            ThetaConfig::ConstantDrift { drift } => Some(ThetaSpec::ConstantDrift(drift.clone())),
            ThetaConfig::PerStepDrift { drift } => Some(ThetaSpec::PerStepDrift(drift.clone())),
            ThetaConfig::StateDrift { scale } => Some(ThetaSpec::StateDrift { scale: *scale }),
            ThetaConfig::MeanField => None,
        }
    }

    /// Validates the assumption clauses and builds the solver inputs.
    ///
    /// Rule map: `time-grid` (positive horizon, desk-scale tree),
    /// `market-dimensions` (matrix shape, stocks <= common dimension),
    /// `lambda-ordering` (0 < lo < hi), `sigma-spectral-bounds` (eigenvalues
    /// of the Gram matrix inside the declared band at every lattice node),
    /// `sigma-common-adapted` (structural: the volatility map reads only the
    /// common state), `risk-aversion-range`, `population-weights`,
    /// `initial-wealth-bounded`, `liability-bound` (payoff within its declared
    /// supremum on every lattice path), `conditional-iid-sampler` (structural:
    /// idiosyncratic draws are independent per agent given the common path).
    pub fn build(&self) -> Result<Workspace, CliError> {
        let mut rules = vec!["time-grid"];
        let grid = TimeGrid::new(self.grid.horizon, self.grid.steps)
            .map_err(|e| CliError::Validation(format!("[time-grid] {e}")))?;
        let lattice = NoiseLattice::new(grid, self.market.common_dim, self.market.idio_dim)
            .map_err(|e| CliError::Validation(format!("[time-grid] {e}")))?;

        rules.push("market-dimensions");
        let sigma = self.sigma_spec();
        let model = MarketModel::new(
            sigma,
            self.market.idio_dim,
            self.market.lambda_lo,
            self.market.lambda_hi,
        )
        .map_err(CliError::from_model)?;
        if model.stocks != self.market.stocks || model.common_dim != self.market.common_dim {
            return Err(CliError::Validation(format!(
                "[market-dimensions] sigma matrix is {}x{} but the config declares {} stocks and common dimension {}",
                model.stocks, model.common_dim, self.market.stocks, self.market.common_dim
            )));
        }
        rules.push("lambda-ordering");
        rules.push("sigma-spectral-bounds");
        rules.push("sigma-common-adapted");
        let market = MarketLattice::build(model, &lattice).map_err(CliError::from_model)?;

        rules.push("risk-aversion-range");
        rules.push("population-weights");
        rules.push("initial-wealth-bounded");
        let atoms: Vec<(f64, AgentType)> = self
            .population
            .atoms
            .iter()
            .map(|a| {
                (
                    a.weight,
                    AgentType {
                        initial_wealth: a.initial_wealth,
                        risk_aversion: a.risk_aversion,
                        liability: LiabilitySpec::new(a.liability.clone()),
                    },
                )
            })
            .collect();
        if let Some(bound) = self.population.wealth_bound {
            for (_, agent) in &atoms {
                if agent.initial_wealth.abs() > bound {
                    return Err(CliError::Validation(format!(
                        "[initial-wealth-bounded] initial wealth {} exceeds the declared bound {bound}",
                        agent.initial_wealth
                    )));
                }
            }
        }
        let population =
            PopulationLaw::new(atoms, self.population.gamma_lo, self.population.gamma_hi)
                .map_err(CliError::from_model)?;

        rules.push("liability-bound");
        for (_, agent) in population.atoms() {
            mfequil::bsde::terminal_liability(&lattice, agent).map_err(CliError::from_bsde)?;
        }
        rules.push("conditional-iid-sampler");

        if self.agent_index >= population.len() {
            return Err(CliError::Validation(format!(
                "[agent-index] agent index {} out of range for {} atoms",
                self.agent_index,
                population.len()
            )));
        }

        let constants = GammaConstants::from_population(&population);
        let f_sup = population.sup_liability();
        let regime = if f_sup < constants.contraction_threshold() {
            "in-theory"
        } else {
            "exploratory"
        };
        Ok(Workspace {
            lattice,
            market,
            population,
            constants,
            f_sup,
            rules,
            regime,
        })
    }
}
