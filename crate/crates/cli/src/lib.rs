//! Command-line front end for TimeFlow: experiment configs, checkpoints and the
//! `train / generate / condition / evaluate / ablate / inspect` verbs.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod files;

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use timeflow_core::samplers::Mode;

pub use checkpoint::Checkpoint;
pub use config::ExperimentConfig;
pub use error::{exit, CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "timeflow", version, about = "Flow-matching time-series generation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write checkpoint, loss curve and timing row.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override a config key, e.g. `--set train.steps=500`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Draw unconditional samples as long-format CSV.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long)]
        mode: Option<Mode>,
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Timing report to append to (default: next to the checkpoint).
        #[arg(long)]
        timing: Option<PathBuf>,
    },
    /// Impute or forecast windows of a reference CSV.
    Condition {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        /// `impute:<ratio>` or `forecast:<horizon>`.
        #[arg(long)]
        task: commands::Task,
        #[arg(long)]
        power: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        draws: usize,
        /// Window stride over the reference (default: the window length).
        #[arg(long)]
        stride: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        mse_out: Option<PathBuf>,
        #[arg(long)]
        timing: Option<PathBuf>,
    },
    /// Score synthetic against real windows.
    Evaluate {
        /// `sines:<windows>` or a CSV file.
        #[arg(long)]
        real: String,
        #[arg(long)]
        synth: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        metrics: Vec<String>,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 24)]
        window: usize,
        #[arg(long, default_value_t = 1)]
        stride: usize,
        /// Channels for `sines:` inputs.
        #[arg(long, default_value_t = 5)]
        features: usize,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        sigma_sweep: Vec<f64>,
        /// Sampler steps for the sweep.
        #[arg(long)]
        steps: Option<usize>,
        /// Training steps of the metric networks.
        #[arg(long)]
        metric_steps: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and score the ablation variants.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "full,no_ca,no_fd,no_encoder")]
        variants: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print checkpoint metadata.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train { config, overrides } => {
            let config = ExperimentConfig::load(&config, &overrides)?;
            let out = commands::train(&config)?;
            println!(
                "checkpoint {} (final loss {})",
                out.checkpoint.display(),
                out.final_loss.map_or("n/a".into(), |l| format!("{l:.6}"))
            );
        }
        Command::Generate {
            checkpoint,
            n,
            mode,
            sigma,
            steps,
            seed,
            out,
            timing,
        } => commands::generate(&commands::GenerateArgs {
            checkpoint,
            n,
            mode,
            sigma,
            steps,
            seed,
            out,
            timing,
        })?,
        Command::Condition {
            checkpoint,
            reference,
            task,
            power,
            steps,
            seed,
            draws,
            stride,
            out,
            mse_out,
            timing,
        } => commands::condition(&commands::ConditionArgs {
            checkpoint,
            reference,
            task,
            power,
            steps,
            seed,
            draws,
            stride,
            out,
            mse_out,
            timing,
        })?,
        Command::Evaluate {
            real,
            synth,
            metrics,
            repeats,
            seed,
            window,
            stride,
            features,
            checkpoint,
            sigma_sweep,
            steps,
            metric_steps,
            out,
        } => {
            let text = commands::evaluate(&commands::EvaluateArgs {
                real,
                synth,
                metrics,
                repeats,
                seed,
                window,
                stride,
                features,
                checkpoint,
                sigma_sweep,
                steps,
                metric_steps,
                out: out.clone(),
            })?;
            if out.is_none() {
                print!("{text}");
            }
        }
        Command::Ablate {
            config,
            overrides,
            variants,
            out,
        } => {
            let config = ExperimentConfig::load(&config, &overrides)?;
            print!("{}", commands::ablate(&config, &variants, out.as_deref())?);
        }
        Command::Inspect { checkpoint } => print!("{}", commands::inspect(&checkpoint)?),
    }
    Ok(())
}
