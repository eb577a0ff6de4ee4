//! Synthetic multi-tissue brain phantom and T2-weighted signal rendering.
//!
//! The phantom is a procedural nested-ellipsoid model of the fetal brain
//! parameterized by gestational age (GA, weeks): an outer CSF envelope, a
//! cortical gray-matter shell whose surface undulation ("folding")
//! deepens with GA, white matter, bilateral deep gray nuclei, and
//! bilateral ventricles. Head size grows monotonically with GA. Labels
//! render to signal with the steady-state spin-echo law
//! `S = PD · exp(-TE/T2) · (1 - exp(-TR/T1))`.

use crate::error::{Error, Result};
use crate::geometry::{snap_f32, Volume3D, VolumeGeometry};
use crate::seeds::stream_rng;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Tissue label codes used by the phantom.
pub mod labels {
    pub const BACKGROUND: u8 = 0;
    pub const CSF: u8 = 1;
    pub const CORTICAL_GM: u8 = 2;
    pub const WM: u8 = 3;
    pub const DEEP_GM: u8 = 4;
    pub const VENTRICLE: u8 = 5;
}

/// Supported gestational-age range in weeks.
pub const GA_RANGE: (f64, f64) = (21.0, 38.0);

/// Coarsest voxel pitch (mm) that still resolves the thinnest phantom
/// structures (cortical shell, ventricle width).
pub const MAX_VOXEL_MM: f64 = 1.2;

/// A labeled voxel grid.
#[derive(Debug, Clone)]
pub struct LabelVolume {
    pub geometry: VolumeGeometry,
    labels: Vec<u8>,
}

impl LabelVolume {
    pub fn new(geometry: VolumeGeometry, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != geometry.n_voxels() {
            return Err(Error::ShapeMismatch(format!(
                "geometry holds {} voxels, labels has {}",
                geometry.n_voxels(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l > labels::VENTRICLE) {
            return Err(Error::InvalidParameter(format!("unknown tissue label {bad}")));
        }
        Ok(Self { geometry, labels })
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, k: usize) -> u8 {
        self.labels[self.geometry.index(i, j, k)]
    }
}

/// Relaxation and density parameters of one tissue class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TissueProperties {
    pub label: u8,
    pub name: String,
    pub t1_ms: f64,
    pub t2_ms: f64,
    pub pd: f64,
}

/// Tissue parameters for one field strength.
#[derive(Debug, Clone)]
pub struct TissueTable {
    pub field_strength: f64,
    by_label: BTreeMap<u8, TissueProperties>,
}

impl TissueTable {
    pub fn new(field_strength: f64, tissues: Vec<TissueProperties>) -> Result<Self> {
        if tissues.is_empty() {
            return Err(Error::TissueTable("empty tissue table".into()));
        }
        let mut by_label = BTreeMap::new();
        for t in tissues {
            if !(t.t1_ms > 0.0 && t.t2_ms > 0.0 && t.t1_ms > t.t2_ms) {
                return Err(Error::TissueTable(format!(
                    "tissue '{}' needs T1 > T2 > 0, got T1={} T2={}",
                    t.name, t.t1_ms, t.t2_ms
                )));
            }
            if !(t.pd > 0.0 && t.pd <= 1.0) {
                return Err(Error::TissueTable(format!(
                    "tissue '{}' needs 0 < PD <= 1, got {}",
                    t.name, t.pd
                )));
            }
            if t.label == labels::BACKGROUND {
                return Err(Error::TissueTable("label 0 is reserved for background".into()));
            }
            if by_label.insert(t.label, t).is_some() {
                return Err(Error::TissueTable("duplicate tissue label".into()));
            }
        }
        Ok(Self { field_strength, by_label })
    }

    /// Built-in table for 1.5 T or 3 T.
    ///
    /// The shipped values are a contrast design, not literature
    /// relaxometry: they are chosen so the rendered signal spans roughly
    /// [0, 0.75] with fluid brightest. The acquisition noise levels are
    /// absolute, so the image scale determines the effective SNR; only
    /// the orderings (fluid > gray > white, T2 likewise) are contractual.
    pub fn builtin(field_strength: f64) -> Result<Self> {
        Self::from_json_str(include_str!("../data/tissues.json"), field_strength)
    }

    /// Parse a table keyed by field strength ("1.5T", "3T") from JSON.
    pub fn from_json_str(json: &str, field_strength: f64) -> Result<Self> {
        let all: BTreeMap<String, Vec<TissueProperties>> = serde_json::from_str(json)?;
        let key = field_key(field_strength)?;
        let tissues = all
            .get(key)
            .ok_or_else(|| Error::TissueTable(format!("no entry for field strength {key}")))?;
        Self::new(field_strength, tissues.clone())
    }

    pub fn load(path: &std::path::Path, field_strength: f64) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?, field_strength)
    }

    pub fn get(&self, label: u8) -> Option<&TissueProperties> {
        self.by_label.get(&label)
    }

    /// Check that every non-background label used in `vol` has an entry.
    pub fn validate_labels(&self, vol: &LabelVolume) -> Result<()> {
        let mut seen = [false; 256];
        for &l in vol.labels() {
            seen[l as usize] = true;
        }
        for (l, &s) in seen.iter().enumerate().skip(1) {
            if s && !self.by_label.contains_key(&(l as u8)) {
                return Err(Error::TissueTable(format!("label {l} has no tissue entry")));
            }
        }
        Ok(())
    }
}

fn field_key(field_strength: f64) -> Result<&'static str> {
    match (field_strength * 10.0).round() as i64 {
        15 => Ok("1.5T"),
        30 => Ok("3T"),
        _ => Err(Error::InvalidParameter(format!(
            "unsupported field strength {field_strength} T (use 1.5 or 3.0)"
        ))),
    }
}

/// Acquisition parameters of one T2-weighted multi-slice protocol.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SequenceParams {
    pub field_strength: f64,
    pub tr_ms: f64,
    pub te_ms: f64,
    /// In-plane pixel pitch of the low-resolution series (mm); also the
    /// isotropic pitch of the reconstruction target.
    pub in_plane_mm: f64,
    /// Excited slice width, the FWHM of the through-plane profile (mm).
    pub slice_thickness_mm: f64,
    /// Distance between adjacent slice centers (mm).
    pub slice_spacing_mm: f64,
    /// Per-component Gaussian noise level in image units.
    pub noise_sd: f64,
    /// Shift of the field of view along the slice normal between
    /// consecutive same-orientation series (mm).
    pub fov_shift_mm: f64,
}

impl SequenceParams {
    /// Protocol defaults for the two supported field strengths.
    pub fn defaults_for_field(field_strength: f64) -> Result<Self> {
        match field_key(field_strength)? {
            "1.5T" => Ok(Self {
                field_strength: 1.5,
                tr_ms: 1200.0,
                te_ms: 90.0,
                in_plane_mm: 1.1,
                slice_thickness_mm: 3.0,
                slice_spacing_mm: 3.0,
                noise_sd: 0.15,
                fov_shift_mm: 1.6,
            }),
            _ => Ok(Self {
                field_strength: 3.0,
                tr_ms: 1100.0,
                te_ms: 101.0,
                in_plane_mm: 0.5,
                slice_thickness_mm: 3.0,
                slice_spacing_mm: 3.0,
                noise_sd: 0.0025,
                fov_shift_mm: 1.6,
            }),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let pos = [
            ("tr_ms", self.tr_ms),
            ("te_ms", self.te_ms),
            ("in_plane_mm", self.in_plane_mm),
            ("slice_thickness_mm", self.slice_thickness_mm),
            ("slice_spacing_mm", self.slice_spacing_mm),
        ];
        for (name, v) in pos {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidParameter(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.noise_sd >= 0.0) || !(self.fov_shift_mm >= 0.0) {
            return Err(Error::InvalidParameter(
                "noise_sd and fov_shift_mm must be non-negative".into(),
            ));
        }
        field_key(self.field_strength)?;
        Ok(())
    }
}

/// Brain ellipsoid semi-axes (mm) at a gestational age.
pub(crate) fn brain_semi_axes(ga_weeks: f64) -> [f64; 3] {
    let ax = 18.0 + 8.0 * (ga_weeks - GA_RANGE.0) / (GA_RANGE.1 - GA_RANGE.0);
    [ax, 0.82 * ax, 0.76 * ax]
}

/// Relative depth of the cortical surface undulation; grows with GA to
/// mimic progressing folding.
pub fn gyrification_amplitude(ga_weeks: f64) -> f64 {
    0.03 + 0.05 * (ga_weeks - GA_RANGE.0) / (GA_RANGE.1 - GA_RANGE.0)
}

/// One plane-wave component of the cortical surface perturbation.
struct Wave {
    dir: [f64; 3],
    omega: f64,
    phase: f64,
    coef: f64,
}

fn perturbation_waves(seed: u64) -> Vec<Wave> {
    let mut rng = stream_rng(seed, &[0x7068]);
    let mut waves = Vec::with_capacity(6);
    let mut total = 0.0;
    for _ in 0..6 {
        // random direction from a cube sample, rejected near zero
        let mut d;
        loop {
            d = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]) as f64;
            if n > 0.05 {
                let inv = 1.0 / n.sqrt();
                d = [d[0] * inv, d[1] * inv, d[2] * inv];
                break;
            }
        }
        let omega = rng.gen_range(3.0..7.0);
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
        let coef: f64 = sign * rng.gen_range(0.5..1.0);
        total += coef.abs();
        waves.push(Wave { dir: d, omega, phase, coef });
    }
    for w in &mut waves {
        w.coef /= total; // sum of |coef| = 1 so the field stays in [-1, 1]
    }
    waves
}

#[inline]
fn perturbation(waves: &[Wave], u: &[f64; 3]) -> f64 {
    waves
        .iter()
        .map(|w| w.coef * (w.omega * (u[0] * w.dir[0] + u[1] * w.dir[1] + u[2] * w.dir[2]) + w.phase).cos())
        .sum()
}

/// Normalized radii of the tissue interfaces (fractions of the outer
/// envelope).
const R_CORTEX_OUTER: f64 = 0.90;
const R_CORTEX_INNER: f64 = 0.78;

/// Bilateral interior structures in normalized ellipsoid coordinates:
/// (center, semi-axes) with the x component mirrored for the second side.
const VENTRICLE_C: [f64; 3] = [0.18, -0.05, 0.08];
const VENTRICLE_S: [f64; 3] = [0.10, 0.30, 0.12];
const DEEP_GM_C: [f64; 3] = [0.16, 0.10, -0.04];
const DEEP_GM_S: [f64; 3] = [0.11, 0.14, 0.13];

#[inline]
fn in_ellipsoid(q: &[f64; 3], c: &[f64; 3], s: &[f64; 3], mirror_x: bool) -> bool {
    let cx = if mirror_x { -c[0] } else { c[0] };
    let dx = (q[0] - cx) / s[0];
    let dy = (q[1] - c[1]) / s[1];
    let dz = (q[2] - c[2]) / s[2];
    dx * dx + dy * dy + dz * dz <= 1.0
}

/// Generate the tissue label volume for a gestational age on `grid`.
///
/// Deterministic in `(ga_weeks, grid, seed)`. Fails when the GA is out of
/// range or the grid is too coarse/small to hold the anatomy.
pub fn generate_phantom(ga_weeks: f64, grid: &VolumeGeometry, seed: u64) -> Result<LabelVolume> {
    if !(GA_RANGE.0..=GA_RANGE.1).contains(&ga_weeks) {
        return Err(Error::InvalidParameter(format!(
            "gestational age {ga_weeks} outside supported range {GA_RANGE:?}"
        )));
    }
    let semi = brain_semi_axes(ga_weeks);
    let max_voxel = grid.voxel.iter().cloned().fold(0.0, f64::max);
    if max_voxel > MAX_VOXEL_MM {
        return Err(Error::Resolution(format!(
            "voxel pitch {max_voxel} mm too coarse for the cortical shell (max {MAX_VOXEL_MM} mm)"
        )));
    }
    for a in 0..3 {
        let need = 2.0 * semi[a] + 2.0 * grid.voxel[a];
        if grid.extent(a) < need {
            return Err(Error::Resolution(format!(
                "grid extent {:.1} mm on axis {a} cannot hold the {need:.1} mm head at GA {ga_weeks}",
                grid.extent(a)
            )));
        }
    }

    let waves = perturbation_waves(seed);
    let amp = gyrification_amplitude(ga_weeks);
    let center = grid.center_world();
    let [nx, ny, _] = grid.dims;

    let mut out = vec![0u8; grid.n_voxels()];
    out.par_chunks_mut(nx * ny).enumerate().for_each(|(k, slab)| {
        for j in 0..ny {
            for i in 0..nx {
                let p = grid.voxel_to_world([i as f64, j as f64, k as f64]);
                let q = [
                    (p[0] - center[0]) / semi[0],
                    (p[1] - center[1]) / semi[1],
                    (p[2] - center[2]) / semi[2],
                ];
                let rho = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2]).sqrt();
                let label = if rho > 1.0 {
                    labels::BACKGROUND
                } else {
                    let u = if rho > 1e-9 {
                        [q[0] / rho, q[1] / rho, q[2] / rho]
                    } else {
                        [1.0, 0.0, 0.0]
                    };
                    let bump = 1.0 + amp * perturbation(&waves, &u);
                    if rho > R_CORTEX_OUTER * bump {
                        labels::CSF
                    } else if rho > R_CORTEX_INNER * bump {
                        labels::CORTICAL_GM
                    } else if in_ellipsoid(&q, &VENTRICLE_C, &VENTRICLE_S, false)
                        || in_ellipsoid(&q, &VENTRICLE_C, &VENTRICLE_S, true)
                    {
                        labels::VENTRICLE
                    } else if in_ellipsoid(&q, &DEEP_GM_C, &DEEP_GM_S, false)
                        || in_ellipsoid(&q, &DEEP_GM_C, &DEEP_GM_S, true)
                    {
                        labels::DEEP_GM
                    } else {
                        labels::WM
                    }
                };
                slab[i + nx * j] = label;
            }
        }
    });
    LabelVolume::new(grid.clone(), out)
}

/// Render a label volume to T2-weighted signal:
/// `S = PD · exp(-TE/T2) · (1 - exp(-TR/T1))`, background 0.
pub fn render_signal(labels_vol: &LabelVolume, table: &TissueTable, seq: &SequenceParams) -> Result<Volume3D> {
    seq.validate()?;
    table.validate_labels(labels_vol)?;
    // signal per label, precomputed
    let mut lut = [0.0f64; 256];
    for (&label, t) in &table.by_label {
        lut[label as usize] =
            t.pd * (-seq.te_ms / t.t2_ms).exp() * (1.0 - (-seq.tr_ms / t.t1_ms).exp());
    }
    let data: Vec<f64> = labels_vol.labels().iter().map(|&l| lut[l as usize]).collect();
    Volume3D::new(labels_vol.geometry.clone(), data)
}

/// The high-resolution reference volume: the phantom rendered on its own
/// grid. The reconstruction target grid equals this grid, so no
/// resampling is involved.
pub fn reference_hr(labels_vol: &LabelVolume, table: &TissueTable, seq: &SequenceParams) -> Result<Volume3D> {
    render_signal(labels_vol, table, seq)
}

/// Isotropic axis-aligned reconstruction grid with pitch equal to the
/// sequence in-plane resolution, centered at the world origin.
pub fn hr_grid(n: usize, seq: &SequenceParams) -> Result<VolumeGeometry> {
    let v = snap_f32(seq.in_plane_mm);
    VolumeGeometry::axis_aligned_centered([n, n, n], [v, v, v])
}
