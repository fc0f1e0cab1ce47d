//! CSV emission. All floats are written with 17 significant digits so a
//! rerun with the same configuration and seed reproduces byte-identical
//! files.

use crate::bsde::{BsdeSolution, Strategy};
use crate::clearing::ClearingReport;
use crate::lattice::{CommonVecField, NoiseLattice};
use crate::meanfield::IterationDiag;

/// 17-significant-digit float formatting (round-trip exact for f64).
pub fn fmt_float(x: f64) -> String {
    format!("{x:.16e}")
}

/// Node-level solution export: `k, common_idx, idio_idx, Y, Z0..., Z1...,
/// p_star...`. Integrand and strategy columns are empty on the terminal
/// slice, where only the value process is defined.
pub fn solution_csv(
    lattice: &NoiseLattice,
    solution: &BsdeSolution,
    strategy: Option<&Strategy>,
) -> String {
    let d0 = lattice.common_dim();
    let d1 = lattice.idio_dim();
    let mut out = String::new();
    out.push_str("k,common_idx,idio_idx,Y");
    for j in 0..d0 {
        out.push_str(&format!(",Z0_{j}"));
    }
    for j in 0..d1 {
        out.push_str(&format!(",Z1_{j}"));
    }
    if strategy.is_some() {
        for j in 0..d0 {
            out.push_str(&format!(",p_star_{j}"));
        }
    }
    out.push('\n');
    for k in 0..=lattice.steps() {
        let idio_k = lattice.idio_nodes(k);
        for c in 0..lattice.common_nodes(k) {
            for i in 0..idio_k {
                let at = c * idio_k + i;
                out.push_str(&format!("{k},{c},{i}"));
                out.push(',');
                out.push_str(&fmt_float(solution.y.slices[k][at]));
                if k < lattice.steps() {
                    for j in 0..d0 {
                        out.push(',');
                        out.push_str(&fmt_float(solution.z0.slices[k][at * d0 + j]));
                    }
                    for j in 0..d1 {
                        out.push(',');
                        out.push_str(&fmt_float(solution.z1.slices[k][at * d1 + j]));
                    }
                    if let Some(s) = strategy {
                        for j in 0..d0 {
                            out.push(',');
                            out.push_str(&fmt_float(s.p.slices[k][at * d0 + j]));
                        }
                    }
                } else {
                    let blanks = d0 + d1 + if strategy.is_some() { d0 } else { 0 };
                    for _ in 0..blanks {
                        out.push(',');
                    }
                }
                out.push('\n');
            }
        }
    }
    out
}

/// Equilibrium premium export: `k, common_idx, theta_0...`.
pub fn theta_csv(lattice: &NoiseLattice, theta: &CommonVecField) -> String {
    let d0 = theta.width;
    let mut out = String::new();
    out.push_str("k,common_idx");
    for j in 0..d0 {
        out.push_str(&format!(",theta_{j}"));
    }
    out.push('\n');
    for k in 0..lattice.steps() {
        for c in 0..lattice.common_nodes(k) {
            out.push_str(&format!("{k},{c}"));
            for j in 0..d0 {
                out.push(',');
                out.push_str(&fmt_float(theta.slices[k][c * d0 + j]));
            }
            out.push('\n');
        }
    }
    out
}

/// Picard iteration history: `iter, delta, ratio, in_ball`.
pub fn diagnostics_csv(diagnostics: &[IterationDiag]) -> String {
    let mut out = String::from("iter,delta,ratio,in_ball\n");
    for diag in diagnostics {
        out.push_str(&diag.iteration.to_string());
        out.push(',');
        out.push_str(&fmt_float(diag.delta));
        out.push(',');
        if let Some(r) = diag.ratio {
            out.push_str(&fmt_float(r));
        }
        out.push(',');
        out.push_str(if diag.in_ball { "true" } else { "false" });
        out.push('\n');
    }
    out
}

/// Clearing sweep rows: `N, estimate, stderr, n_outer`.
pub fn clearing_csv(report: &ClearingReport) -> String {
    let mut out = String::from("N,estimate,stderr,n_outer\n");
    for row in &report.rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            row.n_agents,
            fmt_float(row.estimate),
            fmt_float(row.stderr),
            row.outer_samples
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_format_round_trips() {
        for x in [0.1, -3.25e-17, 1.0 / 3.0, 12345.6789, 0.0] {
            let s = fmt_float(x);
            let back: f64 = s.parse().unwrap();
            assert_eq!(back.to_bits(), x.to_bits(), "{s} does not round-trip");
        }
    }
}
