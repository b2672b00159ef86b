//! `stomech`: batch runs of the complex-diffusion laboratory.
//!
//! Exit codes: 0 success, 1 verification failure, 2 configuration error,
//! 3 runtime error.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("runtime error: {0}")]
    Runtime(String),
}

impl CliError {
    pub fn config(e: stomech::Error) -> Self {
        CliError::Config(e.to_string())
    }

    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

impl From<stomech::Error> for CliError {
    fn from(e: stomech::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

#[derive(Parser)]
#[command(name = "stomech", version, about = "Rotated Wiener ensembles, complex diffusion solves and acceptance checks")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (.toml or .json).
    #[arg(long)]
    config: PathBuf,
    /// Master seed; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a rotated Wiener ensemble: paths, realized QV and Lévy diagnostics.
    Noise(RunArgs),
    /// Solve the complex diffusion equation from an analytic family.
    Solve(RunArgs),
    /// Compare oracle-drift Monte Carlo densities with the Born density.
    Correspond(RunArgs),
    /// Run the acceptance suites at pinned seeds and sizes.
    Verify {
        /// noise, calculus, pde, correspond, geometry, relativity or all.
        #[arg(default_value = "all")]
        suite: String,
        #[arg(long)]
        seed: Option<u64>,
        /// Also write verify_report.json here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<bool, CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    match cli.command {
        Command::Noise(a) => {
            let cfg: config::NoiseConfig = config::load(&a.config)?;
            let s = commands::noise(&cfg, a.seed.unwrap_or(cfg.seed), &a.out)?;
            println!("{s}");
        }
        Command::Solve(a) => {
            let cfg: config::SolveConfig = config::load(&a.config)?;
            let s = commands::solve(&cfg, a.seed.unwrap_or(cfg.seed), &a.out)?;
            println!("{s}");
        }
        Command::Correspond(a) => {
            let cfg: config::CorrespondConfig = config::load(&a.config)?;
            let s = commands::correspond(&cfg, a.seed.unwrap_or(cfg.seed), &a.out)?;
            println!("{s}");
        }
        Command::Verify { suite, seed, out } => {
            let report = commands::verify(&suite, seed, out.as_deref())?;
            print!("{}", report.table());
            return Ok(report.passed);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("stomech: {e}");
            ExitCode::from(e.code())
        }
    }
}
