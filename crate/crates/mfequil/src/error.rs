//! Error types shared across the solver modules.

use thiserror::Error;

/// Errors raised while constructing or validating market and population inputs.
#[derive(Error, Debug, Clone)]
pub enum ModelError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("validation error [{rule}]: {message}")]
    Validation { rule: String, message: String },
    #[error("volatility matrix is rank-deficient (min singular value {min_sv:.3e} below {tol:.3e} relative tolerance)")]
    RankDeficient { min_sv: f64, tol: f64 },
    #[error("singular normal-equation system at pivot {pivot}")]
    SingularSystem { pivot: usize },
}

/// Errors raised by the noise lattice and path ensemble.
#[derive(Error, Debug, Clone)]
pub enum LatticeError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("step {step} out of range (lattice has {steps} steps)")]
    StepOutOfRange { step: usize, steps: usize },
}

/// Errors raised by the backward solvers.
#[derive(Error, Debug, Clone)]
pub enum BsdeError {
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("numerical failure at step {step}: {message}")]
    NumericalFailure { step: usize, message: String },
    #[error("step size too coarse at step {step}: |theta|*sqrt(dt) = {value:.3} >= {limit}; refine the time grid")]
    StepSize { step: usize, value: f64, limit: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Lattice(#[from] LatticeError),
}

/// Errors raised by the mean-field fixed-point solver.
#[derive(Error, Debug, Clone)]
pub enum MeanFieldError {
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("Picard iteration did not reach tol {tol:.3e} after {iterations} iterations (last delta {last_delta:.3e}); ratio history: {ratios:?}")]
    Divergence {
        tol: f64,
        iterations: usize,
        last_delta: f64,
        ratios: Vec<f64>,
    },
    #[error(transparent)]
    Bsde(#[from] BsdeError),
}

/// Errors raised by the clearing experiments.
#[derive(Error, Debug, Clone)]
pub enum ClearingError {
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error(transparent)]
    MeanField(#[from] MeanFieldError),
    #[error(transparent)]
    Bsde(#[from] BsdeError),
}

/// Errors raised by the brute-force verification oracle.
#[derive(Error, Debug, Clone)]
pub enum OracleError {
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("control grid too small: argmax on boundary at step {step}, node ({common}, {idio}); widen p_max beyond {p_max}")]
    WidenGrid {
        step: usize,
        common: usize,
        idio: usize,
        p_max: f64,
    },
    #[error("numerical failure: {0}")]
    NumericalFailure(String),
    #[error(transparent)]
    Bsde(#[from] BsdeError),
}
