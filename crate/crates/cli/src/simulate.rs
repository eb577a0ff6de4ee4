//! `simulate`: generate a phantom, render it, and emit motion-corrupted
//! low-resolution series plus the ground-truth reference volume.

use crate::config::{fmt_compact, write_manifest, MotionArg};
use serde::{Deserialize, Serialize};
use srtune_core::acquisition::{simulate_lr_series, MotionLevel, SeriesGeometry};
use srtune_core::nifti::write_volume;
use srtune_core::phantom::{generate_phantom, hr_grid, reference_hr, SequenceParams, TissueTable};
use srtune_core::{Error, Orientation, Result, RigidTransform, Volume3D, VolumeGeometry};
use std::fs;
use std::path::PathBuf;

#[derive(Debug, clap::Args)]
pub struct SimulateArgs {
    /// Output directory (created if missing)
    #[arg(long)]
    out: PathBuf,
    /// Main field strength in tesla (1.5 or 3)
    #[arg(long, default_value_t = 1.5)]
    field: f64,
    /// Total number of series, dealt round-robin over
    /// axial/coronal/sagittal
    #[arg(long, default_value_t = 3)]
    series: usize,
    /// Gestational age in weeks
    #[arg(long, default_value_t = 30.0)]
    ga: f64,
    /// Ground-truth grid size (voxels per axis, isotropic)
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Inter-slice motion amplitude
    #[arg(long, value_enum, default_value_t = MotionArg::Little)]
    motion: MotionArg,
    /// Disable k-space noise
    #[arg(long)]
    noiseless: bool,
    /// Root random seed
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

/// Sidecar metadata describing a simulated data set; `reconstruct` reads
/// this to rebuild the acquisition operator.
#[derive(Debug, Serialize, Deserialize)]
pub(crate) struct SimulationMeta {
    pub field_strength: f64,
    pub ga_weeks: f64,
    pub hr_dim: usize,
    pub motion: MotionLevel,
    pub noiseless: bool,
    pub seed: u64,
    pub series: Vec<SeriesMeta>,
}

#[derive(Debug, Serialize, Deserialize)]
pub(crate) struct SeriesMeta {
    /// NIfTI file name, relative to the data-set directory.
    pub file: String,
    pub orientation: Orientation,
    /// Index among same-orientation series (drives the field-of-view
    /// shift).
    pub series_index: usize,
    pub geometry: SeriesGeometry,
    /// Per-slice rigid motion (identity on clean slices).
    pub motion: Vec<RigidTransform>,
    pub corrupted: Vec<bool>,
}

/// The volume grid equivalent to a slice-stack geometry: u, v, then the
/// slice normal.
pub(crate) fn series_volume_geometry(g: &SeriesGeometry) -> Result<VolumeGeometry> {
    VolumeGeometry::new(
        [g.nu, g.nv, g.n_slices],
        [g.in_plane_mm, g.in_plane_mm, g.slice_spacing_mm],
        g.origin,
        [g.u_dir, g.v_dir, g.normal],
    )
}

pub fn run(args: SimulateArgs) -> Result<()> {
    if args.series == 0 {
        return Err(Error::InvalidParameter("need at least one series".into()));
    }
    let mut seq = SequenceParams::defaults_for_field(args.field)?;
    if args.noiseless {
        seq.noise_sd = 0.0;
    }
    let grid = hr_grid(args.size, &seq)?;
    let labels = generate_phantom(args.ga, &grid, args.seed)?;
    let table = TissueTable::builtin(args.field)?;
    let reference = reference_hr(&labels, &table, &seq)?;

    fs::create_dir_all(&args.out)?;
    write_volume(&reference, &args.out.join("reference.nii"))?;

    let motion_cfg = args.motion.level().config();
    let mut series_meta = Vec::with_capacity(args.series);
    for i in 0..args.series {
        let orientation = Orientation::ALL[i % 3];
        let series_index = i / 3;
        let s =
            simulate_lr_series(&reference, orientation, &seq, &motion_cfg, series_index, args.seed)?;
        let file = format!("series_{i:02}_{orientation}{series_index}.nii");
        let geom = series_volume_geometry(&s.geometry)?;
        let data: Vec<f64> = s.slices.iter().flatten().copied().collect();
        write_volume(&Volume3D::new(geom, data)?, &args.out.join(&file))?;
        series_meta.push(SeriesMeta {
            file,
            orientation,
            series_index,
            geometry: s.geometry,
            motion: s.motion,
            corrupted: s.corrupted,
        });
    }

    let meta = SimulationMeta {
        field_strength: args.field,
        ga_weeks: args.ga,
        hr_dim: args.size,
        motion: args.motion.level(),
        noiseless: args.noiseless,
        seed: args.seed,
        series: series_meta,
    };
    fs::write(args.out.join("simulation.json"), serde_json::to_string_pretty(&meta)? + "\n")?;

    #[derive(Serialize)]
    struct SimManifest {
        field_strength: f64,
        n_series: usize,
        ga_weeks: f64,
        hr_dim: usize,
        motion: MotionLevel,
        noiseless: bool,
        seed: u64,
    }
    write_manifest(
        &args.out.join("manifest.json"),
        "simulate",
        &SimManifest {
            field_strength: args.field,
            n_series: args.series,
            ga_weeks: args.ga,
            hr_dim: args.size,
            motion: args.motion.level(),
            noiseless: args.noiseless,
            seed: args.seed,
        },
    )?;
    println!(
        "wrote reference + {} series ({}T, GA {} weeks) to {}",
        args.series,
        fmt_compact(args.field),
        fmt_compact(args.ga),
        args.out.display()
    );
    Ok(())
}
