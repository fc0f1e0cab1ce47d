//! N-agent market-clearing experiments: sample heterogeneous agents
//! conditionally i.i.d. given a common path, form their optimal positions
//! under the equilibrium premium, and measure how the squared excess demand
//! per capita `E int |N^{-1} sum pi*|^2 dt` decays in `N`, together with the
//! finite-N naive-premium diagnostic.
//!
//! Agents sharing an atom reuse one solved strategy (their integrands
//! coincide as functions of the noise), so the per-sample cost scales with
//! the number of atoms, not with `N`: a sample draws one common path, a
//! categorical atom label per agent, and an independent idiosyncratic path
//! per agent.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;

use crate::bsde::{optimal_strategy, BsdeSolution, Strategy};
use crate::error::ClearingError;
use crate::lattice::{pairwise_mean, pairwise_sum, CommonScalarField, CommonVecField, NoiseLattice};
use crate::meanfield::MeanFieldSolution;
use crate::model::{MarketLattice, PopulationLaw};

/// Per-atom strategies under the equilibrium premium, ready for sampling.
pub struct ClearingContext<'a> {
    lattice: &'a NoiseLattice,
    pop: &'a PopulationLaw,
    strategies: Vec<Strategy>,
    stocks: usize,
}

impl<'a> ClearingContext<'a> {
    pub fn from_equilibrium(
        lattice: &'a NoiseLattice,
        market: &MarketLattice,
        pop: &'a PopulationLaw,
        solution: &MeanFieldSolution,
    ) -> Result<Self, ClearingError> {
        if solution.atoms.len() != pop.len() {
            return Err(ClearingError::Precondition(
                "equilibrium solution does not match the population".into(),
            ));
        }
        let strategies = pop
            .atoms()
            .iter()
            .enumerate()
            .map(|(atom, (_, agent))| {
                optimal_strategy(
                    lattice,
                    market,
                    &solution.atoms[atom],
                    &solution.theta,
                    agent.risk_aversion,
                )
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            lattice,
            pop,
            strategies,
            stocks: market.market().stocks,
        })
    }

    fn cumulative_weights(&self) -> Vec<f64> {
        let mut acc = 0.0;
        self.pop
            .atoms()
            .iter()
            .map(|(w, _)| {
                acc += w;
                acc
            })
            .collect()
    }
}

/// One outer sample: draw a common path and `n_agents` conditionally i.i.d.
/// agents, return the time-integral of the squared per-capita position sum.
fn clearing_sample(
    ctx: &ClearingContext,
    n_agents: usize,
    cumulative: &[f64],
    rng: &mut ChaCha12Rng,
) -> f64 {
    let lattice = ctx.lattice;
    let steps = lattice.steps();
    let dt = lattice.dt();
    let b0 = lattice.common_branches();
    let b1 = lattice.idio_branches();
    let stocks = ctx.stocks;

    // atom label per agent
    let atoms: Vec<usize> = (0..n_agents)
        .map(|_| {
            let u: f64 = rng.gen();
            cumulative.iter().position(|&c| u < c).unwrap_or(cumulative.len() - 1)
        })
        .collect();

    let mut common: usize = 0;
    let mut idio: Vec<usize> = vec![0; n_agents];
    let mut total = 0.0;
    let mut sum = vec![0.0; stocks];
    for k in 0..steps {
        sum.iter_mut().for_each(|v| *v = 0.0);
        let idio_k = lattice.idio_nodes(k);
        for (agent, &atom) in atoms.iter().enumerate() {
            let at = (common * idio_k + idio[agent]) * stocks;
            let pi = &ctx.strategies[atom].pi.slices[k][at..at + stocks];
            for (slot, v) in sum.iter_mut().zip(pi) {
                *slot += v;
            }
        }
        let mean_sq: f64 = sum
            .iter()
            .map(|v| {
                let per_capita = v / n_agents as f64;
                per_capita * per_capita
            })
            .sum();
        total += mean_sq * dt;
        // advance the paths
        common = common * b0 + rng.gen_range(0..b0);
        for slot in idio.iter_mut() {
            *slot = *slot * b1 + rng.gen_range(0..b1);
        }
    }
    total
}

fn clearing_samples(
    ctx: &ClearingContext,
    n_agents: usize,
    outer_samples: usize,
    seed: u64,
) -> Vec<f64> {
    let cumulative = ctx.cumulative_weights();
    (0..outer_samples)
        .into_par_iter()
        .map(|sample| {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            rng.set_stream(sample as u64);
            clearing_sample(ctx, n_agents, &cumulative, &mut rng)
        })
        .collect()
}

/// Monte Carlo estimate of `E int_0^T |N^{-1} sum_i pi_i*|^2 dt` with its
/// standard error.
pub fn simulate_clearing(
    ctx: &ClearingContext,
    n_agents: usize,
    outer_samples: usize,
    seed: u64,
) -> Result<(f64, f64), ClearingError> {
    if n_agents == 0 {
        return Err(ClearingError::Precondition(
            "need at least one agent".into(),
        ));
    }
    if outer_samples < 2 {
        return Err(ClearingError::Precondition(
            "need at least two outer samples for a standard error".into(),
        ));
    }
    let samples = clearing_samples(ctx, n_agents, outer_samples, seed);
    let mean = pairwise_mean(&samples);
    let sq_devs: Vec<f64> = samples.iter().map(|x| (x - mean) * (x - mean)).collect();
    let variance = pairwise_sum(&sq_devs) / (outer_samples as f64 - 1.0);
    let stderr = (variance / outer_samples as f64).sqrt();
    Ok((mean, stderr))
}

/// One row of the clearing sweep.
#[derive(Debug, Clone, Copy)]
pub struct ClearingRow {
    pub n_agents: usize,
    pub estimate: f64,
    pub stderr: f64,
    pub outer_samples: usize,
}

/// Sweep result: per-N estimates and the fitted log-log decay.
#[derive(Debug, Clone)]
pub struct ClearingReport {
    pub rows: Vec<ClearingRow>,
    /// Least-squares slope of `ln estimate` against `ln N`; omitted when any
    /// estimate is nonpositive (degenerate fit).
    pub slope: Option<f64>,
    /// Intercept of the same fit (the log of the rate constant).
    pub intercept: Option<f64>,
    pub degenerate: bool,
}

/// Runs [`simulate_clearing`] over an increasing list of population sizes and
/// fits the decay rate. The same seed is reused across sizes (common random
/// numbers), keeping the comparison across `N` deterministic.
pub fn clearing_sweep(
    ctx: &ClearingContext,
    n_list: &[usize],
    outer_samples: usize,
    seed: u64,
) -> Result<ClearingReport, ClearingError> {
    if n_list.len() < 3 {
        return Err(ClearingError::Precondition(
            "sweep needs at least three population sizes".into(),
        ));
    }
    if n_list.windows(2).any(|w| w[0] >= w[1]) {
        return Err(ClearingError::Precondition(
            "population sizes must be strictly increasing".into(),
        ));
    }
    let span = n_list[n_list.len() - 1] as f64 / n_list[0] as f64;
    if span < 16.0 {
        return Err(ClearingError::Precondition(format!(
            "population sizes must span at least a factor of 16, got {span}"
        )));
    }
    let rows: Vec<ClearingRow> = n_list
        .iter()
        .map(|&n| {
            simulate_clearing(ctx, n, outer_samples, seed).map(|(estimate, stderr)| ClearingRow {
                n_agents: n,
                estimate,
                stderr,
                outer_samples,
            })
        })
        .collect::<Result<_, _>>()?;

    let degenerate = rows.iter().any(|r| r.estimate <= 0.0);
    let (slope, intercept) = if degenerate {
        (None, None)
    } else {
        let xs: Vec<f64> = rows.iter().map(|r| (r.n_agents as f64).ln()).collect();
        let ys: Vec<f64> = rows.iter().map(|r| r.estimate.ln()).collect();
        let xbar = xs.iter().sum::<f64>() / xs.len() as f64;
        let ybar = ys.iter().sum::<f64>() / ys.len() as f64;
        let sxx: f64 = xs.iter().map(|x| (x - xbar) * (x - xbar)).sum();
        let sxy: f64 = xs
            .iter()
            .zip(&ys)
            .map(|(x, y)| (x - xbar) * (y - ybar))
            .sum();
        let slope = sxy / sxx;
        (Some(slope), Some(ybar - slope * xbar))
    };
    Ok(ClearingReport {
        rows,
        slope,
        intercept,
        degenerate,
    })
}

/// Finite-N naive premium: the premium that would clear the market exactly
/// for `N` sampled agents, which depends on their idiosyncratic noises and so
/// violates adaptedness to the common filtration. Conditional moments over
/// the idiosyncratic draws are computed exactly on the tree.
#[derive(Debug, Clone)]
pub struct FiniteNTheta {
    /// Conditional mean of the naive premium given the common path.
    pub theta: CommonVecField,
    /// Conditional standard deviation per common node: the magnitude of the
    /// adaptedness violation.
    pub violation: CommonScalarField,
    pub max_violation: f64,
    /// Root-mean-square distance to the reference premium, averaging the
    /// squared bias and the conditional variance over time and common nodes.
    pub rms_gap: f64,
}

/// Computes the naive finite-N premium diagnostic from `N` solved agents
/// (references into per-atom solutions plus each agent's risk aversion).
pub fn finite_n_theta(
    lattice: &NoiseLattice,
    agents: &[(&BsdeSolution, f64)],
    reference: &CommonVecField,
) -> Result<FiniteNTheta, ClearingError> {
    if agents.is_empty() {
        return Err(ClearingError::Precondition(
            "need at least one solved agent".into(),
        ));
    }
    let n = agents.len() as f64;
    let d0 = lattice.common_dim();
    let steps = lattice.steps();
    let mean_inv_gamma: f64 = agents.iter().map(|(_, g)| 1.0 / g).sum::<f64>() / n;
    let coef = 1.0 / mean_inv_gamma;

    let mut theta = CommonVecField::zeros(lattice, d0, steps);
    let mut violation = CommonScalarField {
        slices: (0..steps)
            .map(|k| vec![0.0; lattice.common_nodes(k)])
            .collect(),
    };
    let mut max_violation: f64 = 0.0;
    let mut rms_acc = 0.0;
    let mut column = Vec::new();
    for k in 0..steps {
        let idio_k = lattice.idio_nodes(k);
        let common_k = lattice.common_nodes(k);
        for c in 0..common_k {
            let mut var_total = 0.0;
            let mut bias_sq = 0.0;
            for j in 0..d0 {
                let mut mean_sum = 0.0;
                let mut var_sum = 0.0;
                for (sol, _) in agents {
                    let slice = &sol.z0_par.slices[k];
                    column.clear();
                    column.extend((0..idio_k).map(|i| slice[(c * idio_k + i) * d0 + j]));
                    let m = pairwise_mean(&column);
                    let dev: Vec<f64> = column.iter().map(|v| (v - m) * (v - m)).collect();
                    mean_sum += m;
                    var_sum += pairwise_mean(&dev);
                }
                let mean_value = -coef * mean_sum / n;
                theta.slices[k][c * d0 + j] = mean_value;
                var_total += coef * coef / (n * n) * var_sum;
                let gap = mean_value - reference.get(k, c)[j];
                bias_sq += gap * gap;
            }
            violation.slices[k][c] = var_total.sqrt();
            max_violation = max_violation.max(violation.slices[k][c]);
            rms_acc += (bias_sq + var_total) / common_k as f64;
        }
    }
    let rms_gap = (rms_acc / steps as f64).sqrt();
    Ok(FiniteNTheta {
        theta,
        violation,
        max_violation,
        rms_gap,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::NoiseLattice;
    use crate::meanfield::{solve_additive, solve_fixed_point};
    use crate::model::{
        AgentType, LiabilityKind, LiabilitySpec, MarketModel, SigmaSpec, TimeGrid,
    };

    fn lattice(steps: usize) -> NoiseLattice {
        NoiseLattice::new(TimeGrid::new(1.0, steps).unwrap(), 1, 1).unwrap()
    }

    fn scalar_market(lat: &NoiseLattice) -> MarketLattice {
        let market =
            MarketModel::new(SigmaSpec::Constant(vec![vec![1.0]]), lat.idio_dim(), 0.5, 2.0)
                .unwrap();
        MarketLattice::build(market, lat).unwrap()
    }

    fn population(liability: LiabilityKind, gammas: &[f64]) -> PopulationLaw {
        let w = 1.0 / gammas.len() as f64;
        let atoms = gammas
            .iter()
            .map(|&g| {
                (
                    w,
                    AgentType {
                        initial_wealth: 0.0,
                        risk_aversion: g,
                        liability: LiabilitySpec::new(liability.clone()),
                    },
                )
            })
            .collect();
        let lo = gammas.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = gammas.iter().cloned().fold(0.0, f64::max);
        PopulationLaw::new(atoms, lo, hi).unwrap()
    }

    #[test]
    fn symmetric_common_liability_clears_exactly() {
        // constant gamma, common-only liability: exposures cancel node-wise,
        // so every sample integral is exactly zero
        let lat = lattice(4);
        let market = scalar_market(&lat);
        let pop = population(
            LiabilityKind::Additive {
                common_amplitude: 0.5,
                idio_amplitude: 0.0,
            },
            &[1.0],
        );
        let sol = solve_fixed_point(&lat, &market, &pop, 1e-12, 50).unwrap();
        let ctx = ClearingContext::from_equilibrium(&lat, &market, &pop, &sol).unwrap();
        for n in [1usize, 10, 100] {
            let (estimate, stderr) = simulate_clearing(&ctx, n, 50, 7).unwrap();
            assert!(estimate <= 1e-24, "estimate {estimate} for N = {n}");
            assert_eq!(stderr, 0.0);
        }
    }

    #[test]
    fn single_agent_matches_exact_integral() {
        // N = 1: the sample is the single agent's squared-position integral;
        // the Monte Carlo mean must straddle the exact tree expectation
        let lat = lattice(3);
        let market = scalar_market(&lat);
        let pop = population(LiabilityKind::MixedSign { amplitude: 0.04 }, &[1.0]);
        let sol = solve_fixed_point(&lat, &market, &pop, 1e-12, 50).unwrap();
        let ctx = ClearingContext::from_equilibrium(&lat, &market, &pop, &sol).unwrap();
        // exact: sum_k dt * mean over nodes |pi|^2
        let mut exact = 0.0;
        for k in 0..lat.steps() {
            let slice = &ctx.strategies[0].pi.slices[k];
            let mean_sq: f64 =
                slice.iter().map(|v| v * v).sum::<f64>() / lat.joint_nodes(k) as f64;
            exact += mean_sq * lat.dt();
        }
        let (estimate, stderr) = simulate_clearing(&ctx, 1, 4000, 11).unwrap();
        assert!(
            (estimate - exact).abs() <= 4.0 * stderr.max(1e-18),
            "estimate {estimate} vs exact {exact} (stderr {stderr})"
        );
    }

    #[test]
    fn heterogeneous_estimates_decrease_in_n() {
        let lat = lattice(4);
        let market = scalar_market(&lat);
        let pop = population(LiabilityKind::MixedSign { amplitude: 0.04 }, &[1.0, 2.0]);
        let sol = solve_fixed_point(&lat, &market, &pop, 1e-11, 60).unwrap();
        let ctx = ClearingContext::from_equilibrium(&lat, &market, &pop, &sol).unwrap();
        let mut previous = f64::INFINITY;
        for n in [4usize, 16, 64] {
            let (estimate, _) = simulate_clearing(&ctx, n, 800, 13).unwrap();
            assert!(estimate > 0.0);
            assert!(
                estimate < previous,
                "estimate not decreasing at N = {n}: {estimate} >= {previous}"
            );
            previous = estimate;
        }
    }

    #[test]
    fn sweep_reports_degenerate_fit_for_symmetric_case() {
        let lat = lattice(3);
        let market = scalar_market(&lat);
        let pop = population(
            LiabilityKind::Additive {
                common_amplitude: 0.5,
                idio_amplitude: 0.0,
            },
            &[1.0],
        );
        let sol = solve_additive(&lat, &market, &pop).unwrap();
        let ctx = ClearingContext::from_equilibrium(&lat, &market, &pop, &sol).unwrap();
        let report = clearing_sweep(&ctx, &[2, 8, 32], 20, 3).unwrap();
        assert!(report.degenerate);
        assert!(report.slope.is_none());
    }

    #[test]
    fn sweep_rejects_narrow_n_lists() {
        let lat = lattice(2);
        let market = scalar_market(&lat);
        let pop = population(LiabilityKind::MixedSign { amplitude: 0.04 }, &[1.0]);
        let sol = solve_fixed_point(&lat, &market, &pop, 1e-10, 40).unwrap();
        let ctx = ClearingContext::from_equilibrium(&lat, &market, &pop, &sol).unwrap();
        assert!(clearing_sweep(&ctx, &[2, 4], 10, 1).is_err());
        assert!(clearing_sweep(&ctx, &[2, 4, 8], 10, 1).is_err());
        assert!(clearing_sweep(&ctx, &[4, 4, 64], 10, 1).is_err());
    }

    #[test]
    fn naive_premium_exact_for_shared_common_liability() {
        // additive common-only liabilities: every agent's projected integrand
        // is common-adapted and the naive premium collapses onto the
        // equilibrium premium for every N
        let lat = lattice(3);
        let market = scalar_market(&lat);
        let pop = population(
            LiabilityKind::Additive {
                common_amplitude: 0.5,
                idio_amplitude: 0.0,
            },
            &[1.0, 2.0],
        );
        let sol = solve_additive(&lat, &market, &pop).unwrap();
        let agents: Vec<(&BsdeSolution, f64)> = vec![
            (&sol.atoms[0], 1.0),
            (&sol.atoms[1], 2.0),
            (&sol.atoms[1], 2.0),
        ];
        let naive = finite_n_theta(&lat, &agents, &sol.theta).unwrap();
        assert_eq!(naive.max_violation, 0.0);
        for k in 0..lat.steps() {
            for (a, b) in naive.theta.slices[k].iter().zip(&sol.theta.slices[k]) {
                assert!(
                    (a - b).abs() <= 1e-12,
                    "naive premium deviates: {a} vs {b}"
                );
            }
        }
        assert!(naive.rms_gap <= 1e-12);
    }

    #[test]
    fn naive_premium_violation_positive_for_mixed_liability() {
        let lat = lattice(3);
        let market = scalar_market(&lat);
        let pop = population(LiabilityKind::MixedSign { amplitude: 0.04 }, &[1.0]);
        let sol = solve_fixed_point(&lat, &market, &pop, 1e-11, 50).unwrap();
        let agents: Vec<(&BsdeSolution, f64)> = vec![(&sol.atoms[0], 1.0)];
        let naive = finite_n_theta(&lat, &agents, &sol.theta).unwrap();
        assert!(
            naive.max_violation > 0.0,
            "idiosyncratic dependence must show up as a violation"
        );
    }

    #[test]
    fn naive_premium_rms_decays_at_half_order() {
        // conditional law of large numbers: the naive premium approaches the
        // equilibrium premium at rate N^(-1/2)
        use rand::{Rng, SeedableRng};
        let lat = lattice(3);
        let market = scalar_market(&lat);
        let pop = population(LiabilityKind::MixedSign { amplitude: 0.04 }, &[1.0, 2.0]);
        let sol = solve_fixed_point(&lat, &market, &pop, 1e-11, 60).unwrap();
        let gammas = [1.0, 2.0];
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(17);
        let sizes = [8usize, 64, 512];
        let mut log_rms = Vec::new();
        for &n in &sizes {
            let mut mean_sq = 0.0;
            let draws = 8;
            for _ in 0..draws {
                let agents: Vec<(&BsdeSolution, f64)> = (0..n)
                    .map(|_| {
                        let atom = usize::from(rng.gen_bool(0.5));
                        (&sol.atoms[atom], gammas[atom])
                    })
                    .collect();
                let naive = finite_n_theta(&lat, &agents, &sol.theta).unwrap();
                mean_sq += naive.rms_gap * naive.rms_gap / draws as f64;
            }
            log_rms.push(mean_sq.sqrt().ln());
        }
        let xs: Vec<f64> = sizes.iter().map(|&n| (n as f64).ln()).collect();
        let xbar = xs.iter().sum::<f64>() / 3.0;
        let ybar = log_rms.iter().sum::<f64>() / 3.0;
        let slope = xs
            .iter()
            .zip(&log_rms)
            .map(|(x, y)| (x - xbar) * (y - ybar))
            .sum::<f64>()
            / xs.iter().map(|x| (x - xbar) * (x - xbar)).sum::<f64>();
        assert!(
            (-0.65..=-0.35).contains(&slope),
            "naive-premium RMS decay slope {slope} is not near -1/2"
        );
    }

    #[test]
    fn estimates_seed_invariant_within_three_stderr() {
        let lat = lattice(4);
        let market = scalar_market(&lat);
        let pop = population(LiabilityKind::MixedSign { amplitude: 0.04 }, &[1.0, 2.0]);
        let sol = solve_fixed_point(&lat, &market, &pop, 1e-11, 60).unwrap();
        let ctx = ClearingContext::from_equilibrium(&lat, &market, &pop, &sol).unwrap();
        let (e1, s1) = simulate_clearing(&ctx, 16, 600, 101).unwrap();
        let (e2, s2) = simulate_clearing(&ctx, 16, 600, 202).unwrap();
        assert!(
            (e1 - e2).abs() <= 3.0 * (s1 + s2),
            "estimates {e1} and {e2} differ beyond 3 standard errors ({s1}, {s2})"
        );
    }

    #[test]
    fn heterogeneity_scales_intercept_not_slope() {
        let lat = lattice(4);
        let market = scalar_market(&lat);
        let mut fits = Vec::new();
        for amplitude in [0.02, 0.04] {
            let pop = population(LiabilityKind::MixedSign { amplitude }, &[1.0, 2.0]);
            let sol = solve_fixed_point(&lat, &market, &pop, 1e-11, 80).unwrap();
            let ctx = ClearingContext::from_equilibrium(&lat, &market, &pop, &sol).unwrap();
            let report = clearing_sweep(&ctx, &[4, 16, 64], 1200, 33).unwrap();
            fits.push((report.slope.unwrap(), report.intercept.unwrap()));
        }
        assert!(
            fits[1].1 > fits[0].1,
            "larger liability dispersion must raise the intercept"
        );
        assert!(
            (fits[0].0 - fits[1].0).abs() < 0.3,
            "slopes {} and {} should agree",
            fits[0].0,
            fits[1].0
        );
    }
}
