//! Batch front door: configuration ingestion, experiment orchestration,
//! deterministic seeding, and result emission.
//!
//! Exit codes: 0 ok, 2 configuration error, 3 validation error, 4 numerical
//! failure, 5 oracle failure.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::RunConfig;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Validation(String),
    Numerical(String),
    Oracle(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Validation(_) => 3,
            CliError::Numerical(_) => 4,
            CliError::Oracle(_) => 5,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m)
            | CliError::Validation(m)
            | CliError::Numerical(m)
            | CliError::Oracle(m) => m,
        }
    }

    fn from_model(err: mfequil::ModelError) -> Self {
        match err {
            mfequil::ModelError::Config(m) => CliError::Config(m),
            other => CliError::Validation(other.to_string()),
        }
    }

    fn from_bsde(err: mfequil::BsdeError) -> Self {
        match err {
            mfequil::BsdeError::Precondition(m) => CliError::Validation(m),
            mfequil::BsdeError::StepSize { .. } | mfequil::BsdeError::NumericalFailure { .. } => {
                CliError::Numerical(err.to_string())
            }
            mfequil::BsdeError::Model(e) => CliError::from_model(e),
            mfequil::BsdeError::Lattice(e) => CliError::Config(e.to_string()),
        }
    }

    fn from_meanfield(err: mfequil::MeanFieldError) -> Self {
        match err {
            mfequil::MeanFieldError::Precondition(m) => CliError::Validation(m),
            mfequil::MeanFieldError::Divergence { .. } => CliError::Numerical(err.to_string()),
            mfequil::MeanFieldError::Bsde(e) => CliError::from_bsde(e),
        }
    }

    fn from_clearing(err: mfequil::ClearingError) -> Self {
        match err {
            mfequil::ClearingError::Precondition(m) => CliError::Validation(m),
            mfequil::ClearingError::MeanField(e) => CliError::from_meanfield(e),
            mfequil::ClearingError::Bsde(e) => CliError::from_bsde(e),
        }
    }

    fn from_oracle(err: mfequil::OracleError) -> Self {
        match err {
            mfequil::OracleError::Precondition(m) => CliError::Validation(m),
            mfequil::OracleError::Bsde(e) => CliError::from_bsde(e),
            other => CliError::Oracle(other.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "mfequil",
    about = "Mean-field equilibrium risk premia: BSDE solvers, Picard fixed points, market-clearing experiments",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Path to the JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configuration seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = default).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Overrides the configuration output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Solve one agent's backward equation and export the strategy.
    SolveAgent,
    /// Solve the mean-field equilibrium and export the premium process.
    Equilibrium,
    /// Run the N-agent clearing sweep against the equilibrium premium.
    ClearingSweep,
    /// Run the oracle verification suite and emit pass/fail JSON.
    Verify,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let path = cli
        .config
        .ok_or_else(|| CliError::Config("--config PATH is required".into()))?;
    let text = std::fs::read_to_string(&path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut config = RunConfig::from_json(&text)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(out) = cli.out {
        config.output_dir = out.display().to_string();
    }
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .map_err(|e| CliError::Config(format!("cannot build thread pool: {e}")))?;
    }

    let workspace = config.build()?;
    println!(
        "run: regime = {} (||F|| = {:.4}, contraction threshold = {:.4}), seed = {}",
        workspace.regime,
        workspace.f_sup,
        workspace.constants.contraction_threshold(),
        config.seed
    );
    let out_dir = PathBuf::from(&config.output_dir);
    match cli.command {
        Command::SolveAgent => commands::cmd_solve_agent(&config, &workspace, &out_dir),
        Command::Equilibrium => commands::cmd_equilibrium(&config, &workspace, &out_dir),
        Command::ClearingSweep => commands::cmd_clearing_sweep(&config, &workspace, &out_dir),
        Command::Verify => commands::cmd_verify(&config, &workspace, &out_dir),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {}", err.message());
            ExitCode::from(err.exit_code())
        }
    }
}
