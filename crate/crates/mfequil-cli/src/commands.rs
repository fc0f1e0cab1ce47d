//! The four batch commands: single-agent solve, mean-field equilibrium,
//! clearing sweep, and the oracle verification suite.

use std::path::Path;

use serde_json::json;

use mfequil::bsde::{
    optimal_strategy, resolve_theta, shift_invariance_check, solve_agent_bsde,
    solve_agent_bsde_qmeasure, solve_closed_form, solve_with_terminal, NoiseFamily, ThetaSpec,
};
use mfequil::clearing::{clearing_sweep, ClearingContext};
use mfequil::export;
use mfequil::lattice::{CommonVecField, NoiseLattice};
use mfequil::meanfield::{solve_additive, solve_fixed_point, MeanFieldSolution};
use mfequil::model::{MarketLattice, MarketModel, TimeGrid};
use mfequil::oracle::{
    brute_force_optimal, evaluate_utility, verify_martingale_optimality, ControlGrid, Perturbation,
};
use mfequil::MeanFieldError;

use crate::config::{RunConfig, Workspace};
use crate::output::OutputBundle;
use crate::CliError;

/// Equilibrium solve with the additive fast path auto-selected when every
/// atom is of the additive form, cross-checked against the Picard fixed point
/// whenever the run sits inside the contraction regime.
fn solve_equilibrium(
    config: &RunConfig,
    ws: &Workspace,
) -> Result<(MeanFieldSolution, &'static str, Option<f64>), CliError> {
    let solver = config.solver;
    match solve_additive(&ws.lattice, &ws.market, &ws.population) {
        Ok(direct) => {
            let cross = if ws.f_sup < ws.constants.contraction_threshold() {
                let picard =
                    solve_fixed_point(&ws.lattice, &ws.market, &ws.population, solver.tol, solver.max_iter)
                        .map_err(CliError::from_meanfield)?;
                let mut gap: f64 = 0.0;
                for (a, b) in direct.atoms.iter().zip(&picard.atoms) {
                    for (sa, sb) in a.y.slices.iter().zip(&b.y.slices) {
                        for (x, y) in sa.iter().zip(sb) {
                            gap = gap.max((x - y).abs());
                        }
                    }
                }
                for (sa, sb) in direct.theta.slices.iter().zip(&picard.theta.slices) {
                    for (x, y) in sa.iter().zip(sb) {
                        gap = gap.max((x - y).abs());
                    }
                }
                Some(gap)
            } else {
                None
            };
            Ok((direct, "additive", cross))
        }
        Err(MeanFieldError::Precondition(_)) => {
            let picard =
                solve_fixed_point(&ws.lattice, &ws.market, &ws.population, solver.tol, solver.max_iter)
                    .map_err(CliError::from_meanfield)?;
            Ok((picard, "picard", None))
        }
        Err(err) => Err(CliError::from_meanfield(err)),
    }
}

/// Resolves the premium process, solving the population equilibrium when the
/// configuration asks for the mean-field premium.
fn resolve_premium(
    config: &RunConfig,
    ws: &Workspace,
) -> Result<(CommonVecField, Option<MeanFieldSolution>), CliError> {
    match config.theta_spec() {
        Some(spec) => {
            let theta =
                resolve_theta(&ws.lattice, &ws.market, &spec).map_err(CliError::from_bsde)?;
            Ok((theta, None))
        }
        None => {
            let (solution, _, _) = solve_equilibrium(config, ws)?;
            Ok((solution.theta.clone(), Some(solution)))
        }
    }
}

pub fn cmd_solve_agent(config: &RunConfig, ws: &Workspace, out: &Path) -> Result<(), CliError> {
    let (theta, _) = resolve_premium(config, ws)?;
    let agent = ws.population.agent(config.agent_index);
    let solution =
        solve_agent_bsde(&ws.lattice, &ws.market, agent, &theta).map_err(CliError::from_bsde)?;
    let strategy = optimal_strategy(&ws.lattice, &ws.market, &solution, &theta, agent.risk_aversion)
        .map_err(CliError::from_bsde)?;
    let (bmo, bmo_bound, bmo_ok) = solution.bmo_bound(agent.risk_aversion);

    let mut bundle = OutputBundle::new(out);
    bundle.add(
        "solution.csv",
        export::solution_csv(&ws.lattice, &solution, Some(&strategy)).into_bytes(),
    );
    let summary = json!({
        "command": "solve-agent",
        "agent_index": config.agent_index,
        "y0": solution.y.slices[0][0],
        "max_abs_y": solution.max_abs_y,
        "bmo_surrogate": bmo,
        "bmo_bound": bmo_bound,
        "bmo_within_bound": bmo_ok,
        "theta_t0": theta.get(0, 0),
        "regime": ws.regime,
    });
    bundle.add_json("summary.json", &summary);
    let hash = bundle.write(config, config.seed, ws.regime, &ws.rules)?;
    println!(
        "solve-agent: Y_0 = {:.6e}, max|Y| = {:.6e}, BMO surrogate {:.3e} (bound {:.3e}), hash {hash}",
        solution.y.slices[0][0],
        solution.max_abs_y,
        bmo,
        bmo_bound
    );
    Ok(())
}

pub fn cmd_equilibrium(config: &RunConfig, ws: &Workspace, out: &Path) -> Result<(), CliError> {
    let (solution, method, cross_gap) = solve_equilibrium(config, ws)?;
    let mut bundle = OutputBundle::new(out);
    bundle.add(
        "theta.csv",
        export::theta_csv(&ws.lattice, &solution.theta).into_bytes(),
    );
    bundle.add(
        "diagnostics.csv",
        export::diagnostics_csv(&solution.diagnostics).into_bytes(),
    );
    let ball_radius = solution.constants.ball_radius(solution.f_sup);
    let summary = json!({
        "command": "equilibrium",
        "method": method,
        "theta_mfg_t0": solution.theta.get(0, 0),
        "iterations": solution.iterations(),
        "cross_check_gap": cross_gap,
        "gamma_hat": solution.constants.gamma_hat,
        "f_sup": solution.f_sup,
        "contraction_threshold": solution.constants.contraction_threshold(),
        "regime": ws.regime,
        "max_abs_y": solution.max_abs_y(),
        "y_bound": solution.y_bound(),
        "max_bmo": solution.max_bmo(),
        "ball_radius_sq": ball_radius * ball_radius,
    });
    bundle.add_json("summary.json", &summary);
    let hash = bundle.write(config, config.seed, ws.regime, &ws.rules)?;
    println!(
        "equilibrium ({method}): theta_mfg(0) = {:?}, iterations = {}, regime = {}, hash {hash}",
        solution.theta.get(0, 0),
        solution.iterations(),
        ws.regime
    );
    if let Some(gap) = cross_gap {
        println!("equilibrium: additive-vs-picard cross-check gap = {gap:.3e}");
    }
    Ok(())
}

pub fn cmd_clearing_sweep(config: &RunConfig, ws: &Workspace, out: &Path) -> Result<(), CliError> {
    let (solution, method, _) = solve_equilibrium(config, ws)?;
    let ctx = ClearingContext::from_equilibrium(&ws.lattice, &ws.market, &ws.population, &solution)
        .map_err(CliError::from_clearing)?;
    let report = clearing_sweep(
        &ctx,
        &config.clearing.n_list,
        config.clearing.outer_samples,
        config.seed,
    )
    .map_err(CliError::from_clearing)?;

    let mut bundle = OutputBundle::new(out);
    bundle.add("clearing.csv", export::clearing_csv(&report).into_bytes());
    bundle.add(
        "theta.csv",
        export::theta_csv(&ws.lattice, &solution.theta).into_bytes(),
    );
    let summary = json!({
        "command": "clearing-sweep",
        "method": method,
        "slope": report.slope,
        "intercept": report.intercept,
        "degenerate": report.degenerate,
        "rows": report.rows.iter().map(|r| json!({
            "n": r.n_agents,
            "estimate": r.estimate,
            "stderr": r.stderr,
            "outer_samples": r.outer_samples,
        })).collect::<Vec<_>>(),
        "regime": ws.regime,
    });
    bundle.add_json("summary.json", &summary);
    let hash = bundle.write(config, config.seed, ws.regime, &ws.rules)?;
    match report.slope {
        Some(slope) => println!(
            "clearing-sweep: slope = {slope:.4}, intercept = {:.4}, hash {hash}",
            report.intercept.unwrap()
        ),
        None => println!(
            "clearing-sweep: degenerate fit (an estimate is nonpositive), slope omitted, hash {hash}"
        ),
    }
    for row in &report.rows {
        println!(
            "  N = {:>4}: estimate = {:.6e} (stderr {:.2e})",
            row.n_agents, row.estimate, row.stderr
        );
    }
    Ok(())
}

struct Check {
    name: &'static str,
    pass: bool,
    details: String,
}

pub fn cmd_verify(config: &RunConfig, ws: &Workspace, out: &Path) -> Result<(), CliError> {
    let (theta, _) = resolve_premium(config, ws)?;
    let agent = ws.population.agent(config.agent_index).clone();
    let gamma = agent.risk_aversion;
    let solution =
        solve_agent_bsde(&ws.lattice, &ws.market, &agent, &theta).map_err(CliError::from_bsde)?;
    let strategy = optimal_strategy(&ws.lattice, &ws.market, &solution, &theta, gamma)
        .map_err(CliError::from_bsde)?;
    let mut checks: Vec<Check> = Vec::new();

    // boundedness of the integrands against the value-process bound
    let (bmo, bmo_bound, bmo_ok) = solution.bmo_bound(gamma);
    checks.push(Check {
        name: "bmo-bound",
        pass: bmo_ok,
        details: format!("surrogate {bmo:.6e} vs exp(4 gamma max|Y|)/gamma^2 = {bmo_bound:.6e}"),
    });

    // exact norm split of the common integrand
    let mut split_gap: f64 = 0.0;
    let d0 = ws.lattice.common_dim();
    for k in 0..ws.lattice.steps() {
        for at in 0..ws.lattice.joint_nodes(k) {
            let z = &solution.z0.slices[k][at * d0..(at + 1) * d0];
            let par = &solution.z0_par.slices[k][at * d0..(at + 1) * d0];
            let perp = &solution.z0_perp.slices[k][at * d0..(at + 1) * d0];
            let n2: f64 = z.iter().map(|v| v * v).sum();
            let split: f64 =
                par.iter().map(|v| v * v).sum::<f64>() + perp.iter().map(|v| v * v).sum::<f64>();
            split_gap = split_gap.max((n2 - split).abs() / (1.0 + n2));
        }
    }
    checks.push(Check {
        name: "norm-split",
        pass: split_gap <= 1e-10,
        details: format!("max relative norm-split gap {split_gap:.3e}"),
    });

    // martingale optimality
    let condition = verify_martingale_optimality(
        &ws.lattice,
        &ws.market,
        &agent,
        &theta,
        &solution,
        &strategy.p,
        &[
            Perturbation::AddConstant(0.1),
            Perturbation::SignFlip,
            Perturbation::Zero,
        ],
        config.oracle.drift_tolerance,
    )
    .map_err(CliError::from_oracle)?;
    let perturbed_ok = condition.perturbed.iter().all(|p| p.violations == 0);
    checks.push(Check {
        name: "martingale-optimality",
        pass: perturbed_ok,
        details: format!(
            "candidate max |drift| {:.3e} (rate {:.3e}); perturbed drifts nonpositive: {perturbed_ok}",
            condition.candidate.max_abs_drift, condition.candidate_drift_rate
        ),
    });

    // exhaustive optimizer on a three-step tree with the same horizon
    let bf_steps = ws.lattice.steps().min(3);
    let bf_grid = TimeGrid::new(config.grid.horizon, bf_steps)
        .map_err(|e| CliError::Validation(e.to_string()))?;
    let bf_lattice = NoiseLattice::new(bf_grid, ws.lattice.common_dim(), ws.lattice.idio_dim())
        .map_err(|e| CliError::Validation(e.to_string()))?;
    let bf_model = MarketModel::new(
        ws.market.market().sigma.clone(),
        ws.market.market().idio_dim,
        ws.market.market().lambda_lo,
        ws.market.market().lambda_hi,
    )
    .map_err(CliError::from_model)?;
    let bf_market = MarketLattice::build(bf_model, &bf_lattice).map_err(CliError::from_model)?;
    let bf_theta = match config.theta_spec() {
        Some(spec) => resolve_theta(&bf_lattice, &bf_market, &spec).map_err(CliError::from_bsde)?,
        None => {
            let solver = config.solver;
            solve_fixed_point(&bf_lattice, &bf_market, &ws.population, solver.tol, solver.max_iter)
                .map_err(CliError::from_meanfield)?
                .theta
        }
    };
    let bf_solution = solve_agent_bsde(&bf_lattice, &bf_market, &agent, &bf_theta)
        .map_err(CliError::from_bsde)?;
    let bf_strategy = optimal_strategy(&bf_lattice, &bf_market, &bf_solution, &bf_theta, gamma)
        .map_err(CliError::from_bsde)?;
    let control = ControlGrid::new(config.oracle.p_max, config.oracle.resolution)
        .map_err(CliError::from_oracle)?;
    let brute = brute_force_optimal(&bf_lattice, &bf_market, &agent, &bf_theta, &control)
        .map_err(CliError::from_oracle)?;
    let mut strategy_gap: f64 = 0.0;
    for (a, b) in brute.strategy.slices.iter().zip(&bf_strategy.p.slices) {
        for (x, y) in a.iter().zip(b) {
            strategy_gap = strategy_gap.max((x - y).abs());
        }
    }
    let p_sup = bf_strategy.p.max_abs();
    let utility = evaluate_utility(&bf_lattice, &bf_market, &agent, &bf_theta, &bf_strategy.p)
        .map_err(CliError::from_oracle)?;
    let value_gap = brute.value - utility;
    let gap_budget = control.resolution + 2.0 * bf_lattice.dt() * p_sup;
    let value_budget = control.resolution * control.resolution + 0.5 * bf_lattice.dt();
    let bf_pass =
        strategy_gap <= gap_budget && value_gap >= -1e-12 && value_gap <= value_budget;
    checks.push(Check {
        name: "brute-force",
        pass: bf_pass,
        details: format!(
            "argmax gap {strategy_gap:.4} (budget {gap_budget:.4}), value gap {value_gap:.3e} (budget {value_budget:.3e}) on a {bf_steps}-step tree"
        ),
    });

    // closed-form machinery: exact one-step value plus a first-order ladder
    let cole_hopf = {
        let lat1 = NoiseLattice::new(TimeGrid::new(1.0, 1).unwrap(), 1, 1).unwrap();
        let idio = lat1.idio_nodes(1);
        let mut g = vec![0.0; lat1.joint_nodes(1)];
        for c in 0..lat1.common_nodes(1) {
            for i in 0..idio {
                g[c * idio + i] = NoiseLattice::branch_sign(i, 0);
            }
        }
        let y = solve_closed_form(&lat1, &g, NoiseFamily::Idio).map_err(CliError::from_bsde)?;
        let one_step_gap = (y[0][0] - 1.0f64.cosh().ln()).abs();

        let mut gaps = Vec::new();
        for steps in [1usize, 2, 4, 8] {
            let lat = NoiseLattice::new(TimeGrid::new(1.0, steps).unwrap(), 1, 1).unwrap();
            let model =
                MarketModel::new(mfequil::model::SigmaSpec::Constant(vec![vec![1.0]]), 1, 0.5, 2.0)
                    .unwrap();
            let market = MarketLattice::build(model, &lat).unwrap();
            let idio_terminal = lat.idio_nodes(steps);
            let mut terminal = vec![0.0; lat.joint_nodes(steps)];
            for c in 0..lat.common_nodes(steps) {
                for i in 0..idio_terminal {
                    terminal[c * idio_terminal + i] = 0.5 * lat.idio_state(steps, i)[0];
                }
            }
            let zero = resolve_theta(&lat, &market, &ThetaSpec::Zero).unwrap();
            let scheme = solve_with_terminal(&lat, &market, 1.0, terminal.clone(), &zero)
                .map_err(CliError::from_bsde)?;
            let closed =
                solve_closed_form(&lat, &terminal, NoiseFamily::Idio).map_err(CliError::from_bsde)?;
            gaps.push((scheme.y.slices[0][0] - closed[0][0]).abs());
        }
        let ratios: Vec<f64> = gaps.windows(2).map(|w| w[0] / w[1]).collect();
        let ratios_ok = ratios.iter().all(|r| (1.6..=2.4).contains(r));
        Check {
            name: "cole-hopf",
            pass: one_step_gap <= 1e-12 && ratios_ok,
            details: format!(
                "one-step gap {one_step_gap:.2e}; refinement ratios {ratios:?}"
            ),
        }
    };
    checks.push(cole_hopf);

    // measure-changed solver agreement on the configured scenario
    let q_solution = solve_agent_bsde_qmeasure(&ws.lattice, &ws.market, &agent, &theta)
        .map_err(CliError::from_bsde)?;
    let q_gap = (solution.y.slices[0][0] - q_solution.y.slices[0][0]).abs();
    let theta_sup = theta.max_abs();
    let q_budget = 0.25 * ws.lattice.dt() * (1.0 + theta_sup * theta_sup) * (1.0 + ws.f_sup);
    checks.push(Check {
        name: "q-measure",
        pass: q_gap <= q_budget,
        details: format!("Y_0 gap {q_gap:.3e} (first-order budget {q_budget:.3e})"),
    });

    // invariance of the strategy under the liability recentring
    let shift = shift_invariance_check(&ws.lattice, &ws.market, &agent, &theta)
        .map_err(CliError::from_bsde)?;
    checks.push(Check {
        name: "shift-invariance",
        pass: shift.max_strategy_gap <= 1e-12 && shift.y0_gap <= 1e-12,
        details: format!(
            "strategy gap {:.3e}, byte-identical: {}, value shift error {:.3e}",
            shift.max_strategy_gap, shift.bytes_identical, shift.y0_gap
        ),
    });

    let all_pass = checks.iter().all(|c| c.pass);
    let mut bundle = OutputBundle::new(out);
    let verification = json!({
        "checks": checks.iter().map(|c| json!({
            "name": c.name,
            "pass": c.pass,
            "details": c.details,
        })).collect::<Vec<_>>(),
        "all_pass": all_pass,
    });
    bundle.add_json("verification.json", &verification);
    let summary = json!({
        "command": "verify",
        "all_pass": all_pass,
        "regime": ws.regime,
    });
    bundle.add_json("summary.json", &summary);
    bundle.write(config, config.seed, ws.regime, &ws.rules)?;
    for check in &checks {
        println!(
            "{} {}: {}",
            if check.pass { "PASS" } else { "FAIL" },
            check.name,
            check.details
        );
    }
    if all_pass {
        Ok(())
    } else {
        Err(CliError::Oracle("verification checks failed".into()))
    }
}
