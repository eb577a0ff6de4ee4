//! `reconstruct`: rebuild the acquisition operator of a simulated data
//! set and solve one (data, weight) reconstruction.

use crate::config::{write_manifest, RegArg};
use crate::simulate::{series_volume_geometry, SimulationMeta};
use serde::Serialize;
use srtune_core::acquisition::{stack_slices, LRSeries};
use srtune_core::forward::{build_operator, PSFSpec};
use srtune_core::nifti::{read_volume, write_volume};
use srtune_core::phantom::{hr_grid, SequenceParams};
use srtune_core::solvers::{convert_lambda, reconstruct, SolverConfig};
use srtune_core::tuner::GridSpec;
use srtune_core::{Error, Result};
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Debug, clap::Args)]
pub struct ReconstructArgs {
    /// Data-set directory produced by `simulate`
    #[arg(long)]
    input: PathBuf,
    /// Output volume path (NIfTI)
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = RegArg::Tv)]
    regularizer: RegArg,
    /// Regularization weight (defaults to the regularizer's standard
    /// default: 4/3 for tv, 0.01 for tikhonov)
    #[arg(long, conflicts_with = "lambda")]
    alpha: Option<f64>,
    /// Fidelity-weight convention: weight the data term by λ instead;
    /// converted as α = 1/λ
    #[arg(long)]
    lambda: Option<f64>,
    /// Reconstruction grid size (defaults to the simulated ground-truth
    /// size)
    #[arg(long)]
    size: Option<usize>,
    /// Iteration cap override
    #[arg(long)]
    iters: Option<usize>,
    /// Convergence tolerance override
    #[arg(long)]
    tol: Option<f64>,
}

/// Load a simulated data set back into series form, checking that each
/// volume still matches its recorded geometry.
pub(crate) fn load_series(dir: &Path, meta: &SimulationMeta) -> Result<Vec<LRSeries>> {
    let mut series = Vec::with_capacity(meta.series.len());
    for sm in &meta.series {
        let vol = read_volume(&dir.join(&sm.file))?;
        let expected = [sm.geometry.nu, sm.geometry.nv, sm.geometry.n_slices];
        if vol.geometry.dims != expected {
            return Err(Error::ShapeMismatch(format!(
                "{}: volume is {:?} but the metadata records {:?}",
                sm.file, vol.geometry.dims, expected
            )));
        }
        let recorded = series_volume_geometry(&sm.geometry)?;
        if !vol.geometry.approx_eq(&recorded, 1e-4) {
            return Err(Error::BadGeometry(format!(
                "{}: volume grid disagrees with the recorded series geometry",
                sm.file
            )));
        }
        let pps = sm.geometry.pixels_per_slice();
        let slices: Vec<Vec<f64>> = (0..sm.geometry.n_slices)
            .map(|k| vol.data()[k * pps..(k + 1) * pps].to_vec())
            .collect();
        series.push(LRSeries::from_parts(
            sm.orientation,
            sm.series_index,
            sm.geometry.clone(),
            slices,
            sm.motion.clone(),
            sm.corrupted.clone(),
        )?);
    }
    Ok(series)
}

pub(crate) fn read_meta(dir: &Path) -> Result<SimulationMeta> {
    let text = fs::read_to_string(dir.join("simulation.json"))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn run(args: ReconstructArgs) -> Result<()> {
    let meta = read_meta(&args.input)?;
    let seq = SequenceParams::defaults_for_field(meta.field_strength)?;
    let series = load_series(&args.input, &meta)?;

    let size = args.size.unwrap_or(meta.hr_dim);
    let target = hr_grid(size, &seq)?;
    let psf = PSFSpec::from_sequence(&seq);
    let op = build_operator(&series, &target, psf, None)?;
    let y = stack_slices(&series);

    let kind = args.regularizer.kind();
    let alpha = match (args.alpha, args.lambda) {
        (Some(a), _) => a,
        (None, Some(l)) => convert_lambda(l)?,
        (None, None) => GridSpec::for_regularizer(kind).default_alpha,
    };
    let mut cfg = SolverConfig::for_kind(kind, alpha);
    if let Some(n) = args.iters {
        cfg.max_iters = n;
    }
    if let Some(t) = args.tol {
        cfg.tol = t;
    }

    let report = reconstruct(&op, &y, kind, &cfg)?;
    write_volume(&report.x, &args.out)?;

    #[derive(Serialize)]
    struct ReconManifest<'a> {
        regularizer: &'a str,
        alpha: f64,
        max_iters: usize,
        tol: f64,
        grid_size: usize,
        simulation_seed: u64,
    }
    let manifest_path = PathBuf::from(format!("{}.manifest.json", args.out.display()));
    write_manifest(
        &manifest_path,
        "reconstruct",
        &ReconManifest {
            regularizer: kind.as_str(),
            alpha,
            max_iters: cfg.max_iters,
            tol: cfg.tol,
            grid_size: size,
            simulation_seed: meta.seed,
        },
    )?;

    #[derive(Serialize)]
    struct Outcome<'a> {
        regularizer: &'a str,
        alpha: f64,
        iterations: usize,
        converged: bool,
        objective: f64,
        output: String,
    }
    let outcome = Outcome {
        regularizer: kind.as_str(),
        alpha,
        iterations: report.iterations,
        converged: report.converged,
        objective: report.objective,
        output: args.out.display().to_string(),
    };
    println!("{}", serde_json::to_string_pretty(&outcome)?);
    Ok(())
}
