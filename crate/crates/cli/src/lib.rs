//! Command-line front end for the super-resolution toolkit: simulate
//! low-resolution acquisitions, reconstruct volumes, grid-search the
//! regularization weight, compare volumes, and aggregate result tables.

mod config;
mod evaluate;
mod reconstruct;
mod report;
mod simulate;
mod tune;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use srtune_core::Error;
use std::ffi::OsString;

#[derive(Parser)]
#[command(
    name = "srtune",
    version,
    about = "Multi-series MRI super-resolution: simulate, reconstruct, tune, evaluate, report"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate low-resolution series plus the ground-truth reference
    Simulate(simulate::SimulateArgs),
    /// Reconstruct a volume from a simulated data set at one weight
    Reconstruct(reconstruct::ReconstructArgs),
    /// Grid-search the regularization weight; writes CSV rows, a summary
    /// JSON, and a manifest
    Tune(tune::TuneArgs),
    /// Compare two volumes (PSNR, SSIM, and supporting numbers)
    Evaluate(evaluate::EvaluateArgs),
    /// Aggregate tuning CSVs into a default-vs-tuned comparison table
    /// with signed-rank p-values
    Report(report::ReportArgs),
}

/// Run the command line and return the process exit code:
/// 0 success, 1 usage error, 2 validation error, 3 runtime/divergence.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return 0;
        }
        Err(e) => {
            let _ = e.print();
            return 1;
        }
    };
    let result = match cli.command {
        Command::Simulate(a) => simulate::run(a),
        Command::Reconstruct(a) => reconstruct::run(a),
        Command::Tune(a) => tune::run(a),
        Command::Evaluate(a) => evaluate::run(a),
        Command::Report(a) => report::run(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Map an error to its exit code: solver divergence is a runtime failure
/// (3); everything else points at the inputs or configuration (2).
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Divergence(_) => 3,
        _ => 2,
    }
}
