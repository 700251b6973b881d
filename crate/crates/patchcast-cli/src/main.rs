//! Command-line entry point for the patchcast pipeline.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Parser, Subcommand};

use config::ConfigMap;

#[derive(Parser)]
#[command(
    name = "patchcast",
    version,
    about = "Patch-based self-supervised pretraining for time series"
)]
struct Cli {
    /// Path to a key=value config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override or add a config key, e.g. --set task=pd. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,

    /// Shortcut for --set seed=N.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker thread budget (results are independent of this value).
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Self-supervised pretraining; writes weights and a loss log.
    Pretrain {
        /// Shortcut for --set task=... (pi, pi+cl, pd, zero-xu, zero-zero).
        #[arg(long)]
        task: Option<String>,
    },
    /// Probe-then-finetune a forecast head on pretrained weights.
    Finetune,
    /// Train encoder and forecast head from scratch.
    Supervised,
    /// Evaluate saved weights on a split; writes metrics only.
    Eval,
    /// Generate toy CSV datasets (mode=shift or mode=classtoy).
    Toygen,
    /// Run a packaged analysis experiment.
    Experiment {
        /// shift or classtoy
        mode: String,
    },
    /// Finite-difference check of every task and encoder combination.
    Gradcheck,
    /// Export per-patch embeddings as CSV.
    ExportEmbeddings,
}

fn run(cli: Cli) -> Result<()> {
    if cli.threads == 0 {
        bail!("--threads must be at least 1");
    }
    let mut sets = cli.sets.clone();
    if let Some(seed) = cli.seed {
        sets.push(format!("seed={seed}"));
    }
    if let Command::Pretrain { task: Some(task) } = &cli.command {
        sets.push(format!("task={task}"));
    }
    let cfg = ConfigMap::load(cli.config.as_deref(), &sets)?;
    match &cli.command {
        Command::Pretrain { .. } => commands::cmd_pretrain(&cfg),
        Command::Finetune => commands::cmd_finetune(&cfg),
        Command::Supervised => commands::cmd_supervised(&cfg),
        Command::Eval => commands::cmd_eval(&cfg),
        Command::Toygen => commands::cmd_toygen(&cfg),
        Command::Experiment { mode } => commands::cmd_experiment(mode, &cfg),
        Command::Gradcheck => commands::cmd_gradcheck(&cfg),
        Command::ExportEmbeddings => commands::cmd_export_embeddings(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
