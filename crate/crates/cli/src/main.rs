//! `vmoe`: command-line driver for the sparse mixture-of-experts toolkit.
//!
//! Exit codes: 0 success, 1 error (bad config, missing inputs, I/O), 2 usage
//! errors (from argument parsing), 3 training divergence.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::AblateMode;

const EXIT_ERROR: u8 = 1;
const EXIT_DIVERGED: u8 = 3;

#[derive(Args, Debug)]
struct Common {
    /// Experiment config (flat TOML; unknown keys are rejected).
    #[arg(long)]
    config: PathBuf,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Parser, Debug)]
#[command(
    name = "vmoe",
    version,
    about = "Sparse mixture-of-experts experiments on a toy vision transformer",
    after_help = "Exit codes: 0 success, 1 error, 2 usage error, 3 training divergence."
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Train a model; writes metrics.csv, checkpoint.bin, and the resolved config.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint on the held-out synthetic split; writes eval.json.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint produced by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Accuracy and FLOPs across a (policy, capacity, k) grid; writes capacity_sweep.csv.
    SweepCapacity {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Routing ablations: gating-order twins, random routers, or k mismatch.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// routing_order trains twins and needs no checkpoint; the others do.
        #[arg(long, value_enum)]
        mode: AblateMode,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Routing traces, specialization matrices, and experts-per-image histograms.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Analytic vs counted multiply-add report for the configured model; writes flops.json.
    Flops {
        #[command(flatten)]
        common: Common,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let load = |common: &Common| {
        config::load_config(&common.config, common.seed, common.out.as_deref())
    };
    match &cli.cmd {
        Cmd::Train { common } => commands::cmd_train(&load(common)?),
        Cmd::Eval { common, checkpoint } => commands::cmd_eval(&load(common)?, checkpoint),
        Cmd::SweepCapacity { common, checkpoint } => {
            commands::cmd_sweep_capacity(&load(common)?, checkpoint)
        }
        Cmd::Ablate {
            common,
            mode,
            checkpoint,
        } => commands::cmd_ablate(&load(common)?, *mode, checkpoint.as_deref()),
        Cmd::Analyze { common, checkpoint } => commands::cmd_analyze(&load(common)?, checkpoint),
        Cmd::Flops { common } => commands::cmd_flops(&load(common)?),
    }
}

fn is_divergence(err: &anyhow::Error) -> bool {
    err.chain()
        .any(|cause| matches!(cause.downcast_ref::<vmoe::Error>(), Some(vmoe::Error::Diverged { .. })))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            if is_divergence(&err) {
                ExitCode::from(EXIT_DIVERGED)
            } else {
                ExitCode::from(EXIT_ERROR)
            }
        }
    }
}
