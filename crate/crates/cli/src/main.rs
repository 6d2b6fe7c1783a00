//! `fpm`: simulate, reconstruct, train, predict and evaluate from the shell.
//!
//! Exit codes: 0 success, 1 usage or config, 2 data or geometry, 3 numeric
//! failure.

mod commands;
mod config;
mod manifest;

use clap::{Parser, Subcommand};
use commands::TrainArgs;
use config::{Config, ConfigError};
use fpm_core::autodiff::AutodiffError;
use fpm_core::oracle::OracleError;
use fpm_core::trainer::TrainError;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "fpm",
    version,
    about = "Fourier ptychography simulation, reconstruction and cGAN phase prediction"
)]
struct Cli {
    /// Flat `section.key = value` config file; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Print the resolved configuration and exit.
    #[arg(long, global = true)]
    dump_config: bool,
    /// Worker cap for parallel stages (default: available cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Synthetic time series: stacks under OUT/stacks, ground truth under OUT/truth.
    Simulate {
        #[arg(long)]
        out: PathBuf,
    },
    /// Model-based phase reconstruction of each stack.
    Oracle {
        /// Stack directories, or directories containing them.
        #[arg(long = "stacks", required = true, num_args = 1..)]
        stacks: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Trains a generator/discriminator pair on labelled stacks.
    Train {
        #[arg(long = "stack", required = true)]
        stacks: Vec<PathBuf>,
        #[arg(long = "label", required = true)]
        labels: Vec<PathBuf>,
        #[arg(long)]
        val_stack: Option<PathBuf>,
        #[arg(long)]
        val_label: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tunes a checkpoint on new labelled stacks.
    Transfer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "stack", required = true)]
        stacks: Vec<PathBuf>,
        #[arg(long = "label", required = true)]
        labels: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Full-field phase prediction for each stack.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "stacks", required = true, num_args = 1..)]
        stacks: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Metrics CSV, MAE curve and Fourier-coverage plots.
    Evaluate {
        /// Predicted rasters or directories of them.
        #[arg(long, required = true, num_args = 1..)]
        pred: Vec<PathBuf>,
        /// Reference rasters or directories of them, paired in sorted order.
        #[arg(long, required = true, num_args = 1..)]
        truth: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Prediction and oracle throughput.
    Bench {
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<ConfigError>() || cause.is::<clap::Error>() {
            return 1;
        }
        let numeric = match cause.downcast_ref::<TrainError>() {
            Some(TrainError::NonFinite { .. }) => true,
            Some(TrainError::Autodiff(e)) => is_numeric(e),
            _ => false,
        } || cause
            .downcast_ref::<AutodiffError>()
            .is_some_and(is_numeric)
            || matches!(
                cause.downcast_ref::<OracleError>(),
                Some(OracleError::NonFinite(_))
            );
        if numeric {
            return 3;
        }
    }
    2
}

fn is_numeric(e: &AutodiffError) -> bool {
    matches!(
        e,
        AutodiffError::NonFinite { .. } | AutodiffError::NonFiniteGradient(_)
    )
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = cli.config.as_deref();
    if cli.dump_config {
        print!("{}", Config::load(cfg)?.dump());
        return Ok(());
    }
    let threads = cli
        .threads
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        })
        .max(1);
    let Some(command) = cli.command else {
        anyhow::bail!(ConfigError("no subcommand given (see --help)".into()));
    };
    match command {
        Command::Simulate { out } => commands::simulate(cfg, &out),
        Command::Oracle { stacks, out } => commands::oracle(cfg, &stacks, &out),
        Command::Train {
            stacks,
            labels,
            val_stack,
            val_label,
            out,
        } => commands::train_cmd(
            cfg,
            TrainArgs {
                stacks: &stacks,
                labels: &labels,
                val_stack: val_stack.as_deref(),
                val_label: val_label.as_deref(),
            },
            &out,
        ),
        Command::Transfer {
            checkpoint,
            stacks,
            labels,
            out,
        } => commands::transfer_cmd(cfg, &checkpoint, &stacks, &labels, &out),
        Command::Predict {
            checkpoint,
            stacks,
            out,
        } => commands::predict_cmd(cfg, &checkpoint, &stacks, threads, &out),
        Command::Evaluate { pred, truth, out } => commands::evaluate_cmd(cfg, &pred, &truth, &out),
        Command::Bench { out } => commands::bench_cmd(cfg, threads, &out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
