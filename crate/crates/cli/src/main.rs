use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nerveseg::error::Error;
use nerveseg::models::Arch;

mod commands;
mod config;

#[derive(Parser)]
#[command(name = "nerveseg", version, about = "Encoder-decoder segmentation of synthetic ultrasound images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset of image/mask PGM pairs.
    Gen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// HEIGHTxWIDTH
        #[arg(long, default_value = "64x64")]
        size: String,
        #[arg(long, default_value_t = 0.3)]
        p_empty: f64,
    },
    /// Train from a JSON run config; writes a checkpoint and metrics.csv.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Mean Dice of a checkpoint on a dataset directory.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
    /// Run-length encoded predictions for every image in a directory.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
    /// Per-layer parameter counts.
    Params {
        #[arg(long)]
        arch: Arch,
        /// Defaults to the width of the reference configuration.
        #[arg(long)]
        base_filters: Option<usize>,
        /// Exit nonzero unless the total equals this.
        #[arg(long)]
        expect: Option<usize>,
        /// Keep conv biases in front of batch norm.
        #[arg(long)]
        bias_under_bn: bool,
        /// Count batch-norm running mean and variance too.
        #[arg(long)]
        count_running_stats: bool,
        /// Feed the residual projection from the first conv instead of the block input.
        #[arg(long)]
        shortcut_tap: bool,
    },
    /// Finite-difference check of every differentiable op.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 5)]
        seeds: usize,
        /// Scale the backward of one named check by 1.5 (harness self-test).
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Gen { out, count, seed, size, p_empty } => commands::gen(&out, count, seed, &size, p_empty),
        Command::Train { config } => commands::train(&config),
        Command::Eval { checkpoint, data, threshold } => commands::eval(&checkpoint, &data, threshold),
        Command::Predict { checkpoint, data, out, threshold } => commands::predict(&checkpoint, &data, &out, threshold),
        Command::Params { arch, base_filters, expect, bias_under_bn, count_running_stats, shortcut_tap } => {
            commands::params(arch, base_filters, expect, bias_under_bn, count_running_stats, shortcut_tap)
        }
        Command::Gradcheck { seed, seeds, corrupt } => commands::gradcheck(seed, seeds, corrupt),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            eprintln!("error: usage: {}", first.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let detail = e.to_string();
            let detail = detail.split_once(": ").map_or(detail.as_str(), |(_, d)| d);
            eprintln!("error: {}: {}", e.category(), detail.replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
