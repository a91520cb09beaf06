//! `halt-diffusion`: train a desk-scale diffusion language model, sample
//! from it with early exit, and analyze the runs.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

mod artifacts;
mod commands;
mod config;

use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use commands::*;
use config::Usage;

#[derive(Parser, Debug)]
#[command(name = "halt-diffusion", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a denoiser (and optionally the AR reference scorer).
    Train(TrainArgs),
    /// Sample from a checkpoint, writing samples and one trace per sample.
    Generate(GenerateArgs),
    /// Replay traces under a grid of halting criteria.
    Sweep(SweepArgs),
    /// Per-step dynamics of a trace, or a noise-scale sweep.
    Analyze(AnalyzeArgs),
    /// Quality and diversity report over sample files.
    Eval(EvalArgs),
    /// Flatten a trace's per-step statistics to CSV.
    TraceToCsv(TraceToCsvArgs),
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Generate(a) => cmd_generate(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Analyze(a) => cmd_analyze(a),
        Command::Eval(a) => cmd_eval(a),
        Command::TraceToCsv(a) => cmd_trace_to_csv(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = halt_diffusion::util::thread_cap() {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("warning: could not size the thread pool: {e}");
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Usage>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
