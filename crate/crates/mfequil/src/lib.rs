//! Numerical laboratory for mean-field equilibrium risk premia under
//! exponential utility.
//!
//! A large population of investors with exponential utility, heterogeneous in
//! initial wealth, risk aversion, and terminal liability, trades stocks driven
//! by a common noise while each carries an idiosyncratic noise of their own.
//! The equilibrium risk-premium process solves a mean-field BSDE whose driver
//! is quadratic both in the stochastic integrands and in their conditional
//! means given the common noise. This crate solves that equation by Picard
//! iteration of a contraction map on an exact noise tree, extracts the
//! equilibrium premium, and measures how fast the optimal positions of `N`
//! sampled agents clear the market as `N` grows.
//!
//! Module map:
//! - [`model`]: market, agent, and population types; row-space projection.
//! - [`lattice`]: exact product tree and Gaussian path ensemble.
//! - [`bsde`]: single-agent quadratic BSDE solver, closed-form and
//!   measure-changed cross-checks, optimal strategies.
//! - [`meanfield`]: the mean-field BSDE, the frozen-driver map, Picard fixed
//!   points, the equilibrium premium, and the additive fast path.
//! - [`clearing`]: N-agent market-clearing experiments and the finite-N
//!   premium diagnostic.
//! - [`oracle`]: brute-force dynamic-programming verification and the
//!   martingale-optimality checker.
//! - [`export`]: CSV and summary emission.

pub mod bsde;
pub mod clearing;
pub mod error;
pub mod export;
pub mod lattice;
pub mod meanfield;
pub mod model;
pub mod oracle;

pub use error::{BsdeError, ClearingError, LatticeError, MeanFieldError, ModelError, OracleError};
