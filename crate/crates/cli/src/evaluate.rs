//! `evaluate`: compare two volumes on a common grid.

use srtune_core::evaluation::compare_reconstructions;
use srtune_core::nifti::read_volume;
use srtune_core::Result;
use std::fs;
use std::path::PathBuf;

#[derive(Debug, clap::Args)]
pub struct EvaluateArgs {
    /// Reference volume (defines the foreground mask and data range)
    reference: PathBuf,
    /// Volume under test
    test: PathBuf,
    /// Compare over every voxel instead of the reference foreground
    #[arg(long)]
    no_mask: bool,
    /// Also write the metrics JSON to a file
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn run(args: EvaluateArgs) -> Result<()> {
    let reference = read_volume(&args.reference)?;
    let test = read_volume(&args.test)?;
    let report = if args.no_mask {
        let mask = vec![true; reference.data().len()];
        compare_reconstructions(&reference, &test, Some(&mask))?
    } else {
        compare_reconstructions(&reference, &test, None)?
    };
    // psnr_db serializes as null when infinite; psnr_infinite is the flag
    let json = serde_json::to_string_pretty(&report)?;
    println!("{json}");
    if let Some(path) = args.out {
        fs::write(path, json + "\n")?;
    }
    Ok(())
}
