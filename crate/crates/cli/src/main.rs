//! `doctr`: batch document rectification.
//!
//! Commands: `synth` (generate paired data), `train-geo` (segmenter plus
//! unwarper), `train-ill` (illumination corrector), `rectify` (run the
//! pipeline on one image), `evaluate` (metric reports).
//!
//! Exit codes: 0 success, 1 usage, 2 data/config error, 3 numeric failure.

mod config;
mod evaluate;
mod rectify;
mod synth;
mod train_geo;
mod train_ill;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use doctr_core::Error;

#[derive(Parser)]
#[command(name = "doctr", version, about = "Document image unwarping and illumination correction")]
struct Cli {
    /// Cap worker pools (default: DOCTR_THREADS or all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset of distorted pages with ground truth.
    Synth(synth::SynthArgs),
    /// Train the segmenter and the geometric unwarping transformer.
    TrainGeo(train_geo::TrainGeoArgs),
    /// Train the illumination correction transformer.
    TrainIll(train_ill::TrainIllArgs),
    /// Unwarp (and optionally illumination-correct) one document image.
    Rectify(rectify::RectifyArgs),
    /// Compute metrics for rectified images against ground truth.
    Evaluate(evaluate::EvaluateArgs),
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Numeric(_) | Error::Train(_) => 3,
        _ => 2,
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    let threads = cli
        .threads
        .or_else(|| {
            std::env::var("DOCTR_THREADS")
                .ok()
                .and_then(|v| v.parse().ok())
        })
        .filter(|&n| n > 0);
    if let Some(n) = threads {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let result = match cli.command {
        Command::Synth(args) => synth::run(args),
        Command::TrainGeo(args) => train_geo::run(args),
        Command::TrainIll(args) => train_ill::run(args),
        Command::Rectify(args) => rectify::run(args),
        Command::Evaluate(args) => evaluate::run(args),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}
