//! Command-line front end: TOML configs in, JSON/CSV reports and binary run
//! archives out.

pub mod archive;
pub mod config;
pub mod pipeline;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::archive::ArchiveError;
use crate::config::Format;
use crate::pipeline::{Mismatch, Outcome, Overrides};

pub const EXIT_PASSED: i32 = 0;
pub const EXIT_CHECKS_FAILED: i32 = 1;
/// Invalid config, I/O failure or a module error.
pub const EXIT_ERROR: i32 = 2;
pub const EXIT_MISMATCH: i32 = 3;
pub const EXIT_CORRUPT: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "sve", version, about = "Simulate and verify stochastic Volterra equations")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output directory, overriding the config and SVE_OUT_DIR.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Seed override.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Emit only this report format.
    #[arg(long, global = true, value_enum)]
    pub format: Option<Format>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate and run the checks requested in the config.
    Run { config: PathBuf },
    /// Re-simulate an archived run and compare statistics bitwise.
    Replay { archive: PathBuf },
    /// Check the kernel hypotheses only.
    CheckKernel { config: PathBuf },
    /// Mollify the model coefficients and report the approximation.
    MollifyDemo { config: PathBuf },
}

fn dispatch(cli: &Cli) -> anyhow::Result<Outcome> {
    let overrides = Overrides {
        out: cli.out.clone(),
        seed: cli.seed,
        format: cli.format,
    };
    match &cli.command {
        Command::Run { config } => pipeline::run(config, &overrides),
        Command::Replay { archive } => pipeline::replay(archive, &overrides),
        Command::CheckKernel { config } => pipeline::check_kernel(config, &overrides),
        Command::MollifyDemo { config } => pipeline::mollify_demo(config, &overrides),
    }
}

/// Runs a parsed command and returns the process exit code.
pub fn execute(cli: &Cli) -> i32 {
    let result = match cli.threads {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| dispatch(cli)),
            Err(e) => Err(e.into()),
        },
        None => dispatch(cli),
    };
    match result {
        Ok(Outcome::Passed) => EXIT_PASSED,
        Ok(Outcome::ChecksFailed) => EXIT_CHECKS_FAILED,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Mismatch>().is_some() {
                EXIT_MISMATCH
            } else if matches!(e.downcast_ref::<ArchiveError>(), Some(ArchiveError::Corrupt(_))) {
                EXIT_CORRUPT
            } else {
                EXIT_ERROR
            }
        }
    }
}
