//! `homog-lab`: command-line front end of the homogenization laboratory.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use homog_core::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Command {
    EstimateEffective,
    DirichletError,
    Regularity,
    DualityCheck,
    VarianceDecay,
    PatchingCheck,
    Cell,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::EstimateEffective => "estimate-effective",
            Command::DirichletError => "dirichlet-error",
            Command::Regularity => "regularity",
            Command::DualityCheck => "duality-check",
            Command::VarianceDecay => "variance-decay",
            Command::PatchingCheck => "patching-check",
            Command::Cell => "cell",
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "homog-lab", version, about = "Stochastic homogenization experiments for convex integral functionals")]
pub struct Args {
    #[arg(value_enum)]
    pub command: Command,
    /// JSON configuration of the run.
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads (0 uses every core).
    #[arg(long, default_value_t = 0)]
    pub workers: usize,
    /// Output directory; overrides the config `out`, defaults to `out`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// What went wrong, sorted by exit code.
#[derive(Debug)]
pub enum Failure {
    Validation(String),
    Execution(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Validation(_) | Error::Range(_) | Error::Geometry(_) | Error::Json(_) => {
                Failure::Validation(e.to_string())
            }
            _ => Failure::Execution(e.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(&args) {
        Ok(dir) => {
            eprintln!("{}: outputs written to {}", args.command.name(), dir.display());
            ExitCode::SUCCESS
        }
        Err(Failure::Validation(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Execution(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
