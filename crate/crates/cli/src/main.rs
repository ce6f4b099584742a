//! `dists`: score, evaluate, train, synthesize, recover and augment.
//!
//! Exit codes: 0 success, 1 any other failure, 2 unreadable input,
//! 3 missing or incompatible weights, 4 optimization diverged.

mod commands;
mod common;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::commands::{AugmentArgs, EvalArgs, RecoverArgs, ScoreArgs, SynthArgs, TrainArgs};

#[derive(Parser)]
#[command(name = "dists", version, about = "Perceptual image distance from deep feature statistics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print D, d, PSNR and SSIM for one reference/distorted pair.
    Score(ScoreArgs),
    /// Correlate model scores with opinion scores over a manifest.
    Eval(EvalArgs),
    /// Learn α and β from a quality manifest and a texture manifest.
    Train(TrainArgs),
    /// Synthesize a texture by matching channel means.
    Synthesize(SynthArgs),
    /// Recover a reference by descending a full-reference measure.
    Recover(RecoverArgs),
    /// Write geometrically transformed references and an enlarged manifest.
    Augment(AugmentArgs),
}

fn configure_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("DISTS_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .map_err(|_| anyhow::anyhow!("DISTS_THREADS must be a positive integer, got `{v}`"))?;
        if n == 0 {
            anyhow::bail!("DISTS_THREADS must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let run = || -> anyhow::Result<()> {
        configure_threads()?;
        match cli.command {
            Command::Score(a) => commands::score(a),
            Command::Eval(a) => commands::eval(a),
            Command::Train(a) => commands::train(a),
            Command::Synthesize(a) => commands::synthesize(a),
            Command::Recover(a) => commands::recover(a),
            Command::Augment(a) => commands::augment(a),
        }
    };
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(common::exit_code(&e))
        }
    }
}
