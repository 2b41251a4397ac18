//! Driver for the `hstar` command: define a problem, solve, certify, export.

pub mod commands;
pub mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::commands::Status;
use crate::config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "hstar", version, about = "Capacitary potentials in the Heisenberg group and their starshapedness certificates")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory; overrides `output_dir` in the config.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Boundary-sampling seed; overrides `seed` in the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve the configured annulus and write a field checkpoint.
    Solve,
    /// Certify a checkpoint: sign certificate, level surfaces, dilation quotients.
    Verify {
        /// Checkpoint binary (default: OUT/field.bin).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Error table against the closed-form potential at each oracle resolution.
    Oracle,
    /// Starshapedness, tangent-ball probes and flow entry for both domains.
    CheckDomain,
    /// Solve and certify for every exponent in `sweep.p_values`.
    SweepP,
}

fn execute(cli: &Cli) -> anyhow::Result<Status> {
    let path = cli.config.as_ref().ok_or_else(|| anyhow::anyhow!("--config is required"))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    log::info!("config hash {}", cfg.hash());
    match &cli.command {
        Command::Solve => commands::cmd_solve(&cfg),
        Command::Verify { checkpoint } => {
            let ckpt = checkpoint.clone().unwrap_or_else(|| commands::default_checkpoint(&cfg));
            commands::cmd_verify(&cfg, &ckpt)
        }
        Command::Oracle => commands::cmd_oracle(&cfg),
        Command::CheckDomain => commands::cmd_check_domain(&cfg),
        Command::SweepP => commands::cmd_sweep_p(&cfg),
    }
}

/// Exit codes: 0 success, 1 input error, 2 non-convergence, 3 certificate failure.
pub fn run(cli: Cli) -> ExitCode {
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot set thread count: {e}");
            return ExitCode::from(1);
        }
    }
    match execute(&cli) {
        Ok(status) => {
            if status != Status::Success {
                eprintln!("{status:?}");
            }
            ExitCode::from(status.exit_code())
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
