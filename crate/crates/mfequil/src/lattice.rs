//! Discrete noise engines: a non-recombining product tree carrying the common
//! and idiosyncratic Brownian families with exact conditional expectations,
//! and a Gaussian path ensemble with empirical conditional means.
//!
//! Per step, each family branches into `2^dim` children of equal probability
//! with increments `+-sqrt(dt)` in every dimension, so one-step increments
//! have exact mean zero and covariance `dt * I` per family and the two
//! branchings are independent. Node storage is flat, indexed by
//! `(step, common_index, idio_index)` with explicit stride arithmetic.
//!
//! All reductions use pairwise summation: deterministic, accurate, and exact
//! when averaging identical values (which keeps structurally constant fields
//! exactly constant).

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::LatticeError;
use crate::model::TimeGrid;

/// Cap on joint terminal nodes; beyond this the tree no longer fits desk scale.
const MAX_JOINT_TERMINAL_NODES: u128 = 1 << 24;

/// Pairwise (binary-tree) sum of a slice.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        2 => values[0] + values[1],
        n => {
            let (a, b) = values.split_at(n / 2);
            pairwise_sum(a) + pairwise_sum(b)
        }
    }
}

/// Pairwise mean of a slice.
pub fn pairwise_mean(values: &[f64]) -> f64 {
    pairwise_sum(values) / values.len() as f64
}

/// Non-recombining product tree for the two noise families.
#[derive(Debug, Clone)]
pub struct NoiseLattice {
    grid: TimeGrid,
    common_dim: usize,
    idio_dim: usize,
}

impl NoiseLattice {
    pub fn new(grid: TimeGrid, common_dim: usize, idio_dim: usize) -> Result<Self, LatticeError> {
        if common_dim == 0 || idio_dim == 0 {
            return Err(LatticeError::Config(
                "noise dimensions must be positive".into(),
            ));
        }
        let terminal: u128 = 1u128 << ((common_dim + idio_dim) * grid.steps()).min(127);
        if terminal > MAX_JOINT_TERMINAL_NODES {
            return Err(LatticeError::Config(format!(
                "lattice too large: 2^{} joint terminal nodes exceeds the desk-scale cap",
                (common_dim + idio_dim) * grid.steps()
            )));
        }
        Ok(Self {
            grid,
            common_dim,
            idio_dim,
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn steps(&self) -> usize {
        self.grid.steps()
    }

    pub fn dt(&self) -> f64 {
        self.grid.dt()
    }

    pub fn common_dim(&self) -> usize {
        self.common_dim
    }

    pub fn idio_dim(&self) -> usize {
        self.idio_dim
    }

    /// Children per step in the common family: `2^d0`.
    pub fn common_branches(&self) -> usize {
        1 << self.common_dim
    }

    /// Children per step in the idiosyncratic family: `2^d`.
    pub fn idio_branches(&self) -> usize {
        1 << self.idio_dim
    }

    pub fn common_nodes(&self, k: usize) -> usize {
        1usize << (self.common_dim * k)
    }

    pub fn idio_nodes(&self, k: usize) -> usize {
        1usize << (self.idio_dim * k)
    }

    pub fn joint_nodes(&self, k: usize) -> usize {
        self.common_nodes(k) * self.idio_nodes(k)
    }

    pub fn joint_index(&self, k: usize, common: usize, idio: usize) -> usize {
        common * self.idio_nodes(k) + idio
    }

    /// Probability of one joint node at step `k` (all histories equally likely).
    pub fn node_probability(&self, k: usize) -> f64 {
        1.0 / self.joint_nodes(k) as f64
    }

    /// Increment sign of `dim` encoded in a branch label: bit set means `+`.
    pub fn branch_sign(branch: usize, dim: usize) -> f64 {
        if branch & (1 << dim) != 0 {
            1.0
        } else {
            -1.0
        }
    }

    /// Branch taken on the transition into step `step + 1` along the history
    /// of a node at step `k` (`step < k`).
    fn history_branch(index: usize, dim: usize, k: usize, step: usize) -> usize {
        (index >> (dim * (k - 1 - step))) & ((1 << dim) - 1)
    }

    /// Common-noise state `W0` at node `(k, common)`.
    pub fn common_state(&self, k: usize, common: usize) -> DVector<f64> {
        let sqrt_dt = self.dt().sqrt();
        let mut state = DVector::zeros(self.common_dim);
        for step in 0..k {
            let branch = Self::history_branch(common, self.common_dim, k, step);
            for dim in 0..self.common_dim {
                state[dim] += Self::branch_sign(branch, dim) * sqrt_dt;
            }
        }
        state
    }

    /// Idiosyncratic state `W1` at node `(k, idio)`.
    pub fn idio_state(&self, k: usize, idio: usize) -> DVector<f64> {
        let sqrt_dt = self.dt().sqrt();
        let mut state = DVector::zeros(self.idio_dim);
        for step in 0..k {
            let branch = Self::history_branch(idio, self.idio_dim, k, step);
            for dim in 0..self.idio_dim {
                state[dim] += Self::branch_sign(branch, dim) * sqrt_dt;
            }
        }
        state
    }

    /// Exact one-node backward expectation and martingale-increment regression.
    ///
    /// Given values on all children of `(k, common, idio)`, returns
    /// `(E[V], E[V dW0]/dt, E[V dW1]/dt)`. The regression uses paired child
    /// differences, so a constant shift of all children leaves the Z rows
    /// exactly unchanged.
    pub fn backward_expectation(
        &self,
        values_next: &[f64],
        k: usize,
        common: usize,
        idio: usize,
    ) -> (f64, Vec<f64>, Vec<f64>) {
        let b0 = self.common_branches();
        let b1 = self.idio_branches();
        let idio_next = self.idio_nodes(k + 1);
        let child = |a: usize, b: usize| -> f64 {
            values_next[(common * b0 + a) * idio_next + (idio * b1 + b)]
        };
        let inv_count = 1.0 / (b0 * b1) as f64;
        let sqrt_dt = self.dt().sqrt();

        let all: Vec<f64> = (0..b0)
            .flat_map(|a| (0..b1).map(move |b| (a, b)))
            .map(|(a, b)| child(a, b))
            .collect();
        let mean = pairwise_sum(&all) * inv_count;

        let mut z0 = vec![0.0; self.common_dim];
        let mut diffs = Vec::with_capacity(b0 * b1 / 2);
        for (dim, z) in z0.iter_mut().enumerate() {
            let mask = 1 << dim;
            diffs.clear();
            for a in 0..b0 {
                if a & mask != 0 {
                    for b in 0..b1 {
                        diffs.push(child(a, b) - child(a ^ mask, b));
                    }
                }
            }
            *z = pairwise_sum(&diffs) * inv_count / sqrt_dt;
        }

        let mut z1 = vec![0.0; self.idio_dim];
        for (dim, z) in z1.iter_mut().enumerate() {
            let mask = 1 << dim;
            diffs.clear();
            for b in 0..b1 {
                if b & mask != 0 {
                    for a in 0..b0 {
                        diffs.push(child(a, b) - child(a, b ^ mask));
                    }
                }
            }
            *z = pairwise_sum(&diffs) * inv_count / sqrt_dt;
        }

        (mean, z0, z1)
    }

    /// Backward expectation and regression for a whole time slice, node-parallel.
    ///
    /// `values_next` holds the joint slice at step `k + 1`; the outputs are the
    /// joint slice at step `k`: means, Z0 rows (stride `d0`), Z1 rows (stride `d`).
    pub fn regress_step(&self, k: usize, values_next: &[f64]) -> RegressedSlice {
        let idio_k = self.idio_nodes(k);
        let joint = self.joint_nodes(k);
        let mut mean = vec![0.0; joint];
        let mut z0 = vec![0.0; joint * self.common_dim];
        let mut z1 = vec![0.0; joint * self.idio_dim];
        mean.par_chunks_mut(idio_k)
            .zip(z0.par_chunks_mut(idio_k * self.common_dim))
            .zip(z1.par_chunks_mut(idio_k * self.idio_dim))
            .enumerate()
            .for_each(|(common, ((mean_chunk, z0_chunk), z1_chunk))| {
                for idio in 0..idio_k {
                    let (m, row0, row1) = self.backward_expectation(values_next, k, common, idio);
                    mean_chunk[idio] = m;
                    z0_chunk[idio * self.common_dim..(idio + 1) * self.common_dim]
                        .copy_from_slice(&row0);
                    z1_chunk[idio * self.idio_dim..(idio + 1) * self.idio_dim]
                        .copy_from_slice(&row1);
                }
            });
        RegressedSlice { mean, z0, z1 }
    }

    /// Backward expectation only (no regression) for a whole time slice.
    pub fn backward_mean_step(&self, k: usize, values_next: &[f64]) -> Vec<f64> {
        let b0 = self.common_branches();
        let b1 = self.idio_branches();
        let idio_k = self.idio_nodes(k);
        let idio_next = self.idio_nodes(k + 1);
        let inv_count = 1.0 / (b0 * b1) as f64;
        let mut mean = vec![0.0; self.joint_nodes(k)];
        mean.par_chunks_mut(idio_k)
            .enumerate()
            .for_each(|(common, chunk)| {
                let mut all = Vec::with_capacity(b0 * b1);
                for (idio, slot) in chunk.iter_mut().enumerate() {
                    all.clear();
                    for a in 0..b0 {
                        for b in 0..b1 {
                            all.push(
                                values_next[(common * b0 + a) * idio_next + (idio * b1 + b)],
                            );
                        }
                    }
                    *slot = pairwise_sum(&all) * inv_count;
                }
            });
        mean
    }

    /// Conditional mean with respect to the common filtration: for each common
    /// node at step `k`, the equal-weight mean of the joint slice over the
    /// idiosyncratic index.
    pub fn conditional_mean_common(
        &self,
        k: usize,
        values: &[f64],
    ) -> Result<Vec<f64>, LatticeError> {
        if k > self.steps() {
            return Err(LatticeError::StepOutOfRange {
                step: k,
                steps: self.steps(),
            });
        }
        let idio_k = self.idio_nodes(k);
        if values.len() != self.joint_nodes(k) {
            return Err(LatticeError::Config(format!(
                "slice length {} does not match {} joint nodes at step {k}",
                values.len(),
                self.joint_nodes(k)
            )));
        }
        Ok(values
            .chunks(idio_k)
            .map(pairwise_mean)
            .collect())
    }

    /// Single-family backward regression on the common marginal tree.
    pub fn regress_common_step(&self, values_next: &[f64]) -> (Vec<f64>, Vec<f64>) {
        regress_family(values_next, self.common_dim, self.dt())
    }

    /// Single-family backward regression on the idiosyncratic marginal tree.
    pub fn regress_idio_step(&self, values_next: &[f64]) -> (Vec<f64>, Vec<f64>) {
        regress_family(values_next, self.idio_dim, self.dt())
    }
}

/// One regressed time slice: conditional means and integrand rows.
pub struct RegressedSlice {
    pub mean: Vec<f64>,
    pub z0: Vec<f64>,
    pub z1: Vec<f64>,
}

/// Backward regression on a single-family binary tree: `values_next` has
/// `parents * 2^dim` entries; returns per-parent means and Z rows (stride `dim`).
fn regress_family(values_next: &[f64], dim: usize, dt: f64) -> (Vec<f64>, Vec<f64>) {
    let branches = 1usize << dim;
    let parents = values_next.len() / branches;
    let sqrt_dt = dt.sqrt();
    let inv_count = 1.0 / branches as f64;
    let mut mean = vec![0.0; parents];
    let mut z = vec![0.0; parents * dim];
    let mut diffs = Vec::with_capacity(branches / 2);
    for parent in 0..parents {
        let children = &values_next[parent * branches..(parent + 1) * branches];
        mean[parent] = pairwise_sum(children) * inv_count;
        for d in 0..dim {
            let mask = 1 << d;
            diffs.clear();
            for b in 0..branches {
                if b & mask != 0 {
                    diffs.push(children[b] - children[b ^ mask]);
                }
            }
            z[parent * dim + d] = pairwise_sum(&diffs) * inv_count / sqrt_dt;
        }
    }
    (mean, z)
}

/// Scalar values on every joint node, one flat slice per step.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    pub slices: Vec<Vec<f64>>,
}

impl ScalarField {
    pub fn zeros(lattice: &NoiseLattice) -> Self {
        Self {
            slices: (0..=lattice.steps())
                .map(|k| vec![0.0; lattice.joint_nodes(k)])
                .collect(),
        }
    }

    pub fn get(&self, lattice: &NoiseLattice, k: usize, common: usize, idio: usize) -> f64 {
        self.slices[k][lattice.joint_index(k, common, idio)]
    }

    pub fn max_abs(&self) -> f64 {
        self.slices
            .iter()
            .flat_map(|s| s.iter())
            .fold(0.0, |acc, v| acc.max(v.abs()))
    }
}

/// Row-valued (`1 x width`) values on every joint node.
#[derive(Debug, Clone, PartialEq)]
pub struct VecField {
    pub width: usize,
    pub slices: Vec<Vec<f64>>,
}

impl VecField {
    pub fn zeros(lattice: &NoiseLattice, width: usize, steps: usize) -> Self {
        Self {
            width,
            slices: (0..steps)
                .map(|k| vec![0.0; lattice.joint_nodes(k) * width])
                .collect(),
        }
    }

    pub fn get<'a>(
        &'a self,
        lattice: &NoiseLattice,
        k: usize,
        common: usize,
        idio: usize,
    ) -> &'a [f64] {
        let at = lattice.joint_index(k, common, idio) * self.width;
        &self.slices[k][at..at + self.width]
    }

    pub fn max_abs(&self) -> f64 {
        self.slices
            .iter()
            .flat_map(|s| s.iter())
            .fold(0.0, |acc, v| acc.max(v.abs()))
    }
}

/// Scalar values on common nodes only (one entry per `(k, common)`).
#[derive(Debug, Clone, PartialEq)]
pub struct CommonScalarField {
    pub slices: Vec<Vec<f64>>,
}

/// Row-valued values on common nodes only.
#[derive(Debug, Clone, PartialEq)]
pub struct CommonVecField {
    pub width: usize,
    pub slices: Vec<Vec<f64>>,
}

impl CommonVecField {
    pub fn zeros(lattice: &NoiseLattice, width: usize, steps: usize) -> Self {
        Self {
            width,
            slices: (0..steps)
                .map(|k| vec![0.0; lattice.common_nodes(k) * width])
                .collect(),
        }
    }

    pub fn get(&self, k: usize, common: usize) -> &[f64] {
        &self.slices[k][common * self.width..(common + 1) * self.width]
    }

    pub fn max_abs(&self) -> f64 {
        self.slices
            .iter()
            .flat_map(|s| s.iter())
            .fold(0.0, |acc, v| acc.max(v.abs()))
    }
}

/// Monte Carlo counterpart of the lattice: outer common paths, inner
/// idiosyncratic particles per common path, Gaussian increments of variance
/// `dt`. Identical seeds produce bit-identical ensembles; every path draws
/// from its own counter-based stream so parallel generation is
/// order-independent, and inner particles are i.i.d. given the common path.
#[derive(Debug, Clone)]
pub struct PathEnsemble {
    pub grid: TimeGrid,
    pub common_dim: usize,
    pub idio_dim: usize,
    pub outer: usize,
    pub inner: usize,
    pub seed: u64,
}

impl PathEnsemble {
    pub fn new(
        grid: TimeGrid,
        common_dim: usize,
        idio_dim: usize,
        outer: usize,
        inner: usize,
        seed: u64,
    ) -> Result<Self, LatticeError> {
        if outer == 0 || inner == 0 {
            return Err(LatticeError::Config(
                "ensemble needs at least one outer path and one inner particle".into(),
            ));
        }
        Ok(Self {
            grid,
            common_dim,
            idio_dim,
            outer,
            inner,
            seed,
        })
    }

    fn stream_rng(&self, stream: u64) -> ChaCha12Rng {
        let mut rng = ChaCha12Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }

    fn draw_path(&self, mut rng: ChaCha12Rng, dim: usize) -> Vec<DVector<f64>> {
        let sqrt_dt = self.grid.dt().sqrt();
        (0..self.grid.steps())
            .map(|_| {
                DVector::from_iterator(
                    dim,
                    (0..dim).map(|_| {
                        let g: f64 = StandardNormal.sample(&mut rng);
                        g * sqrt_dt
                    }),
                )
            })
            .collect()
    }

    /// Common-noise increments of outer path `m`.
    pub fn common_increments(&self, m: usize) -> Vec<DVector<f64>> {
        self.draw_path(self.stream_rng(2 * m as u64), self.common_dim)
    }

    /// Idiosyncratic increments of particle `j` attached to outer path `m`.
    pub fn idio_increments(&self, m: usize, j: usize) -> Vec<DVector<f64>> {
        self.draw_path(
            self.stream_rng(2 * (m as u64 * self.inner as u64 + j as u64) + 1),
            self.idio_dim,
        )
    }

    /// Empirical conditional mean given each common path: for outer path `m`,
    /// the pairwise mean over inner particles of `f(common path, idio path)`.
    pub fn conditional_mean<F>(&self, f: F) -> Vec<f64>
    where
        F: Fn(&[DVector<f64>], &[DVector<f64>]) -> f64 + Sync,
    {
        (0..self.outer)
            .into_par_iter()
            .map(|m| {
                let common = self.common_increments(m);
                let values: Vec<f64> = (0..self.inner)
                    .map(|j| f(&common, &self.idio_increments(m, j)))
                    .collect();
                pairwise_mean(&values)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn lattice(steps: usize) -> NoiseLattice {
        NoiseLattice::new(TimeGrid::new(1.0, steps).unwrap(), 1, 1).unwrap()
    }

    #[test]
    fn increments_have_exact_moments() {
        let lat = NoiseLattice::new(TimeGrid::new(0.5, 2).unwrap(), 2, 1).unwrap();
        let sqrt_dt = lat.dt().sqrt();
        // one-step increments over all branches: mean 0, covariance dt * I
        let b0 = lat.common_branches();
        for dim in 0..2 {
            let mean: f64 = (0..b0)
                .map(|a| NoiseLattice::branch_sign(a, dim) * sqrt_dt)
                .sum::<f64>()
                / b0 as f64;
            assert_eq!(mean, 0.0);
        }
        let cov01: f64 = (0..b0)
            .map(|a| {
                NoiseLattice::branch_sign(a, 0) * NoiseLattice::branch_sign(a, 1) * lat.dt()
            })
            .sum::<f64>()
            / b0 as f64;
        assert_eq!(cov01, 0.0);
    }

    #[test]
    fn conditional_mean_of_constant() {
        let lat = lattice(3);
        let k = 2;
        let values = vec![2.5; lat.joint_nodes(k)];
        let means = lat.conditional_mean_common(k, &values).unwrap();
        assert!(means.iter().all(|&m| m == 2.5));
    }

    #[test]
    fn conditional_mean_of_idio_increment_is_zero() {
        let lat = lattice(2);
        let k = 1;
        let sqrt_dt = lat.dt().sqrt();
        // X = first idiosyncratic increment: sign of the idio branch bit
        let mut values = vec![0.0; lat.joint_nodes(k)];
        for c in 0..lat.common_nodes(k) {
            for i in 0..lat.idio_nodes(k) {
                values[lat.joint_index(k, c, i)] = NoiseLattice::branch_sign(i, 0) * sqrt_dt;
            }
        }
        let means = lat.conditional_mean_common(k, &values).unwrap();
        assert!(means.iter().all(|&m| m == 0.0));
    }

    #[test]
    fn conditional_mean_factorizes() {
        // X = g(common state) * h(idio state): conditional mean equals
        // g(common) times the brute-force mean of h
        let lat = lattice(3);
        let k = 3;
        let g = |w: f64| (0.7 * w).cos() + 0.2;
        let h = |w: f64| w * w - 0.3 * w;
        let mut values = vec![0.0; lat.joint_nodes(k)];
        for c in 0..lat.common_nodes(k) {
            for i in 0..lat.idio_nodes(k) {
                let w0 = lat.common_state(k, c)[0];
                let w1 = lat.idio_state(k, i)[0];
                values[lat.joint_index(k, c, i)] = g(w0) * h(w1);
            }
        }
        // brute-force mean of h over all idio nodes
        let h_mean: f64 = (0..lat.idio_nodes(k))
            .map(|i| h(lat.idio_state(k, i)[0]))
            .sum::<f64>()
            / lat.idio_nodes(k) as f64;
        let means = lat.conditional_mean_common(k, &values).unwrap();
        for c in 0..lat.common_nodes(k) {
            let w0 = lat.common_state(k, c)[0];
            assert_relative_eq!(means[c], g(w0) * h_mean, epsilon = 1e-14);
        }
    }

    #[test]
    fn tower_property_exact() {
        let lat = lattice(2);
        let k = 2;
        let values: Vec<f64> = (0..lat.joint_nodes(k))
            .map(|j| ((j * 37 + 11) % 101) as f64 / 17.0 - 2.0)
            .collect();
        let joint_mean = pairwise_mean(&values);
        let conditional = lat.conditional_mean_common(k, &values).unwrap();
        let common_mean = pairwise_mean(&conditional);
        assert_eq!(joint_mean, common_mean);
    }

    #[test]
    fn backward_expectation_of_constant() {
        let lat = lattice(2);
        let values = vec![3.25; lat.joint_nodes(1)];
        let (mean, z0, z1) = lat.backward_expectation(&values, 0, 0, 0);
        assert_eq!(mean, 3.25);
        assert_eq!(z0, vec![0.0]);
        assert_eq!(z1, vec![0.0]);
    }

    #[test]
    fn backward_expectation_recovers_unit_integrand() {
        // V = common increment of dimension j: E = 0, Z0 = e_j, Z1 = 0
        let lat = NoiseLattice::new(TimeGrid::new(1.0, 1).unwrap(), 2, 1).unwrap();
        let sqrt_dt = lat.dt().sqrt();
        for target in 0..2 {
            let mut values = vec![0.0; lat.joint_nodes(1)];
            for a in 0..lat.common_branches() {
                for b in 0..lat.idio_branches() {
                    values[a * lat.idio_nodes(1) + b] =
                        NoiseLattice::branch_sign(a, target) * sqrt_dt;
                }
            }
            let (mean, z0, z1) = lat.backward_expectation(&values, 0, 0, 0);
            assert_eq!(mean, 0.0);
            for dim in 0..2 {
                assert_eq!(z0[dim], if dim == target { 1.0 } else { 0.0 });
            }
            assert_eq!(z1, vec![0.0]);
        }
    }

    #[test]
    fn backward_expectation_cross_product_vanishes() {
        // V = dW0 * dW1 / dt is orthogonal to both increments
        let lat = lattice(1);
        let sqrt_dt = lat.dt().sqrt();
        let mut values = vec![0.0; lat.joint_nodes(1)];
        for a in 0..lat.common_branches() {
            for b in 0..lat.idio_branches() {
                values[a * lat.idio_nodes(1) + b] = NoiseLattice::branch_sign(a, 0)
                    * NoiseLattice::branch_sign(b, 0)
                    * sqrt_dt
                    * sqrt_dt
                    / lat.dt();
            }
        }
        let (mean, z0, z1) = lat.backward_expectation(&values, 0, 0, 0);
        assert_eq!(mean, 0.0);
        assert_eq!(z0, vec![0.0]);
        assert_eq!(z1, vec![0.0]);
    }

    #[test]
    fn martingale_representation_residual_orthogonal() {
        let lat = NoiseLattice::new(TimeGrid::new(0.7, 2).unwrap(), 2, 2).unwrap();
        let k = 1;
        let values: Vec<f64> = (0..lat.joint_nodes(k + 1))
            .map(|j| ((j * 13 + 5) % 37) as f64 / 7.0)
            .collect();
        let sqrt_dt = lat.dt().sqrt();
        let (c, i) = (2, 1);
        let (mean, z0, z1) = lat.backward_expectation(&values, k, c, i);
        let b0 = lat.common_branches();
        let b1 = lat.idio_branches();
        let idio_next = lat.idio_nodes(k + 1);
        for dim in 0..2 {
            let mut dot0 = 0.0;
            let mut dot1 = 0.0;
            for a in 0..b0 {
                for b in 0..b1 {
                    let v = values[(c * b0 + a) * idio_next + (i * b1 + b)];
                    let recon: f64 = mean
                        + (0..2)
                            .map(|d| z0[d] * NoiseLattice::branch_sign(a, d) * sqrt_dt)
                            .sum::<f64>()
                        + (0..2)
                            .map(|d| z1[d] * NoiseLattice::branch_sign(b, d) * sqrt_dt)
                            .sum::<f64>();
                    let residual = v - recon;
                    dot0 += residual * NoiseLattice::branch_sign(a, dim) * sqrt_dt;
                    dot1 += residual * NoiseLattice::branch_sign(b, dim) * sqrt_dt;
                }
            }
            assert!(dot0.abs() < 1e-12, "residual correlates with dW0[{dim}]");
            assert!(dot1.abs() < 1e-12, "residual correlates with dW1[{dim}]");
        }
    }

    #[test]
    fn regress_step_matches_single_node_path() {
        let lat = lattice(3);
        let k = 1;
        let values: Vec<f64> = (0..lat.joint_nodes(k + 1))
            .map(|j| (j as f64 * 0.37).sin())
            .collect();
        let slice = lat.regress_step(k, &values);
        for c in 0..lat.common_nodes(k) {
            for i in 0..lat.idio_nodes(k) {
                let (m, z0, z1) = lat.backward_expectation(&values, k, c, i);
                let at = lat.joint_index(k, c, i);
                assert_eq!(slice.mean[at], m);
                assert_eq!(slice.z0[at], z0[0]);
                assert_eq!(slice.z1[at], z1[0]);
            }
        }
    }

    #[test]
    fn ensemble_is_deterministic() {
        let grid = TimeGrid::new(1.0, 4).unwrap();
        let e1 = PathEnsemble::new(grid, 1, 1, 3, 5, 99).unwrap();
        let e2 = PathEnsemble::new(grid, 1, 1, 3, 5, 99).unwrap();
        for m in 0..3 {
            assert_eq!(e1.common_increments(m), e2.common_increments(m));
            for j in 0..5 {
                assert_eq!(e1.idio_increments(m, j), e2.idio_increments(m, j));
            }
        }
        let e3 = PathEnsemble::new(grid, 1, 1, 3, 5, 100).unwrap();
        assert_ne!(e1.common_increments(0), e3.common_increments(0));
    }

    #[test]
    fn ensemble_conditional_mean_converges_at_half_order() {
        // squared terminal idio state has the same expectation under the
        // Gaussian ensemble and the tree (matched first two moments); RMSE
        // over outer paths must decay like inner^(-1/2)
        let grid = TimeGrid::new(1.0, 4).unwrap();
        let horizon = grid.horizon();
        let sizes = [64usize, 256, 1024];
        let outer = 256;
        let mut log_rmse = Vec::new();
        for (idx, &inner) in sizes.iter().enumerate() {
            let ensemble = PathEnsemble::new(grid, 1, 1, outer, inner, 4242 + idx as u64).unwrap();
            let estimates = ensemble.conditional_mean(|_, idio| {
                let w: f64 = idio.iter().map(|inc| inc[0]).sum();
                w * w
            });
            let mse: f64 = estimates
                .iter()
                .map(|e| (e - horizon) * (e - horizon))
                .sum::<f64>()
                / outer as f64;
            log_rmse.push(mse.sqrt().ln());
        }
        // least-squares slope of ln RMSE against ln inner
        let xs: Vec<f64> = sizes.iter().map(|&m| (m as f64).ln()).collect();
        let xbar = xs.iter().sum::<f64>() / 3.0;
        let ybar = log_rmse.iter().sum::<f64>() / 3.0;
        let slope: f64 = xs
            .iter()
            .zip(&log_rmse)
            .map(|(x, y)| (x - xbar) * (y - ybar))
            .sum::<f64>()
            / xs.iter().map(|x| (x - xbar) * (x - xbar)).sum::<f64>();
        assert!(
            (slope + 0.5).abs() <= 0.15,
            "conditional-mean RMSE slope {slope} outside -0.5 +- 0.15"
        );
    }

    #[test]
    fn oversized_lattice_rejected() {
        let grid = TimeGrid::new(1.0, 30).unwrap();
        assert!(NoiseLattice::new(grid, 1, 1).is_err());
    }
}
