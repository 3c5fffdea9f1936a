//! `guap`: train target classifiers, synthesize universal perturbations and
//! evaluate them.
//!
//! Exit codes: 0 on success, 1 for usage or configuration errors, 2 when a
//! command fails at run time.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "guap", version, about = "Universal flow-plus-noise adversarial perturbations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML run configuration; defaults apply to every missing key.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Overrides the configured run tag.
    #[arg(long)]
    tag: Option<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a target classifier and save its checkpoint.
    TrainTarget {
        #[command(flatten)]
        common: Common,
    },
    /// Train a generator against a frozen target and save the perturbation.
    Attack {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Budget preset: v1, v2 or v3.
        #[arg(long)]
        preset: Option<String>,
        /// Overrides epsilon (after any preset).
        #[arg(long)]
        epsilon: Option<f64>,
        /// Overrides tau (after any preset).
        #[arg(long)]
        tau: Option<f64>,
    },
    /// Score a perturbation against a target on the held-out split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        perturbation: Option<PathBuf>,
    },
    /// Cross-model ASR matrix: each perturbation against each model.
    Transfer {
        #[command(flatten)]
        common: Common,
        #[arg(long = "checkpoint")]
        checkpoints: Vec<PathBuf>,
        #[arg(long = "perturbation")]
        perturbations: Vec<PathBuf>,
    },
    /// Held-out ASR over the configured (epsilon, tau) grid.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Held-out ASR as a function of the training-set size.
    SampleStudy {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Write clean, warped and final PNGs for the first held-out images.
    ExportImages {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        perturbation: Option<PathBuf>,
        #[arg(long)]
        count: Option<usize>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(commands::Failure::Config(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(commands::Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
