//! Simulation of low-resolution multi-slice acquisitions.
//!
//! A series is a stack of thick slices in one cardinal orientation. The
//! stack is centered on the high-resolution volume; consecutive series of
//! the same orientation are shifted along the slice normal by the
//! protocol's FOV shift. Each slice carries a rigid motion state: a small
//! random fraction of slices is "corrupted" with a random rigid
//! perturbation, the rest stay at identity. Slice data comes from the
//! forward operator and receives complex Gaussian noise in k-space, after
//! which the magnitude is kept.

use crate::error::{Error, Result};
use crate::forward::{build_operator, PSFSpec};
use crate::geometry::{Orientation, RigidTransform, Volume3D, VolumeGeometry};
use crate::seeds::{derive_seed, stream_rng};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

/// Seed-derivation namespaces for the acquisition substreams.
const TAG_MOTION: u64 = 1;
const TAG_NOISE: u64 = 2;

/// Placement of a slice stack in world space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesGeometry {
    pub nu: usize,
    pub nv: usize,
    pub n_slices: usize,
    /// In-plane pixel pitch (mm) along both `u_dir` and `v_dir`.
    pub in_plane_mm: f64,
    /// Distance between adjacent slice centers (mm).
    pub slice_spacing_mm: f64,
    /// Excited slice width (through-plane FWHM, mm).
    pub slice_thickness_mm: f64,
    /// World center of pixel (0,0) of slice 0.
    pub origin: [f64; 3],
    pub u_dir: [f64; 3],
    pub v_dir: [f64; 3],
    pub normal: [f64; 3],
}

impl SeriesGeometry {
    /// Stack covering `hr`, centered on it, shifted along the normal by
    /// `series_index * fov_shift`. Slice count defaults to
    /// `ceil(extent / spacing)` and can be overridden.
    pub fn covering(
        hr: &VolumeGeometry,
        orientation: Orientation,
        seq: &crate::phantom::SequenceParams,
        series_index: usize,
        n_slices_override: Option<usize>,
    ) -> Result<Self> {
        seq.validate()?;
        let (ua, va) = orientation.in_plane_axes();
        let na = orientation.normal_axis();
        let dp = seq.in_plane_mm;
        let ds = seq.slice_spacing_mm;

        // guarded ceiling: an exact multiple must not round up to an
        // extra sample because of rounding in the quotient (grid sizes
        // are stored at f32 precision, so allow ~1e-7 relative slack)
        let count = |extent: f64, pitch: f64| {
            let q = extent / pitch;
            (q - q.abs() * 1e-6 - 1e-9).ceil() as usize
        };
        let nu = count(hr.extent(ua), dp);
        let nv = count(hr.extent(va), dp);
        let n_slices = match n_slices_override {
            Some(n) => {
                if n == 0 {
                    return Err(Error::BadGeometry("series needs at least one slice".into()));
                }
                if (n as f64 - 1.0) * ds > hr.extent(na) {
                    return Err(Error::BadGeometry(format!(
                        "slice stack ({n} slices at {ds} mm) extends past the {:.1} mm volume",
                        hr.extent(na)
                    )));
                }
                n
            }
            None => count(hr.extent(na), ds),
        };
        if nu == 0 || nv == 0 || n_slices == 0 {
            return Err(Error::BadGeometry("degenerate slice grid".into()));
        }

        let center = hr.center_world();
        let u_dir = hr.axes[ua];
        let v_dir = hr.axes[va];
        let normal = hr.axes[na];
        let shift = series_index as f64 * seq.fov_shift_mm;
        let mut origin = [0.0; 3];
        for r in 0..3 {
            origin[r] = center[r] - 0.5 * (nu as f64 - 1.0) * dp * u_dir[r]
                - 0.5 * (nv as f64 - 1.0) * dp * v_dir[r]
                - 0.5 * (n_slices as f64 - 1.0) * ds * normal[r]
                + shift * normal[r];
        }
        Ok(Self {
            nu,
            nv,
            n_slices,
            in_plane_mm: dp,
            slice_spacing_mm: ds,
            slice_thickness_mm: seq.slice_thickness_mm,
            origin,
            u_dir,
            v_dir,
            normal,
        })
    }

    /// World center of pixel `(i, j)` in slice `k` (nominal grid, before
    /// any motion).
    pub fn pixel_world(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        let mut p = self.origin;
        for r in 0..3 {
            p[r] += i as f64 * self.in_plane_mm * self.u_dir[r]
                + j as f64 * self.in_plane_mm * self.v_dir[r]
                + k as f64 * self.slice_spacing_mm * self.normal[r];
        }
        p
    }

    pub fn pixels_per_slice(&self) -> usize {
        self.nu * self.nv
    }

    pub fn n_rows(&self) -> usize {
        self.pixels_per_slice() * self.n_slices
    }
}

/// Amplitude preset for inter-slice motion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MotionLevel {
    None,
    Little,
    Moderate,
}

impl MotionLevel {
    pub fn config(self) -> MotionConfig {
        match self {
            MotionLevel::None => MotionConfig {
                corrupted_fraction: 0.0,
                max_translation_mm: 0.0,
                max_rotation_deg: 0.0,
            },
            MotionLevel::Little => MotionConfig {
                corrupted_fraction: 0.05,
                max_translation_mm: 1.0,
                max_rotation_deg: 2.0,
            },
            MotionLevel::Moderate => MotionConfig {
                corrupted_fraction: 0.10,
                max_translation_mm: 2.0,
                max_rotation_deg: 4.0,
            },
        }
    }
}

/// Per-slice rigid motion model: each slice is corrupted independently
/// with probability `corrupted_fraction`; corrupted slices draw uniform
/// translations and rotations within the given bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionConfig {
    pub corrupted_fraction: f64,
    pub max_translation_mm: f64,
    pub max_rotation_deg: f64,
}

impl MotionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.corrupted_fraction) {
            return Err(Error::InvalidParameter(format!(
                "corrupted_fraction must be in [0,1], got {}",
                self.corrupted_fraction
            )));
        }
        if self.max_translation_mm < 0.0 || self.max_rotation_deg < 0.0 {
            return Err(Error::InvalidParameter("motion bounds must be non-negative".into()));
        }
        Ok(())
    }
}

/// Draw per-slice motion states. Clean slices stay exactly at identity;
/// corrupted slices get uniform draws in
/// `[-max_translation, +max_translation]` per axis and likewise for the
/// rotation angles. Deterministic in `(cfg, n_slices, seed)`.
pub fn sample_motion(
    cfg: &MotionConfig,
    n_slices: usize,
    seed: u64,
) -> Result<(Vec<RigidTransform>, Vec<bool>)> {
    cfg.validate()?;
    let mut rng = stream_rng(seed, &[TAG_MOTION]);
    let mut transforms = Vec::with_capacity(n_slices);
    let mut corrupted = Vec::with_capacity(n_slices);
    for _ in 0..n_slices {
        let hit = rng.gen_bool(cfg.corrupted_fraction);
        corrupted.push(hit);
        if hit && (cfg.max_translation_mm > 0.0 || cfg.max_rotation_deg > 0.0) {
            let t = cfg.max_translation_mm;
            let r = cfg.max_rotation_deg;
            let tr = [
                if t > 0.0 { rng.gen_range(-t..t) } else { 0.0 },
                if t > 0.0 { rng.gen_range(-t..t) } else { 0.0 },
                if t > 0.0 { rng.gen_range(-t..t) } else { 0.0 },
            ];
            let rot = [
                if r > 0.0 { rng.gen_range(-r..r) } else { 0.0 },
                if r > 0.0 { rng.gen_range(-r..r) } else { 0.0 },
                if r > 0.0 { rng.gen_range(-r..r) } else { 0.0 },
            ];
            transforms.push(RigidTransform::new(rot, tr));
        } else {
            transforms.push(RigidTransform::identity());
        }
    }
    Ok((transforms, corrupted))
}

/// One simulated (or loaded) low-resolution series.
#[derive(Debug, Clone)]
pub struct LRSeries {
    pub orientation: Orientation,
    pub series_index: usize,
    pub geometry: SeriesGeometry,
    /// One `nu*nv` image per slice, u fastest.
    pub slices: Vec<Vec<f64>>,
    pub motion: Vec<RigidTransform>,
    pub corrupted: Vec<bool>,
}

impl LRSeries {
    /// Assemble a series from parts, checking all size and consistency
    /// invariants (clean slices must carry identity motion).
    pub fn from_parts(
        orientation: Orientation,
        series_index: usize,
        geometry: SeriesGeometry,
        slices: Vec<Vec<f64>>,
        motion: Vec<RigidTransform>,
        corrupted: Vec<bool>,
    ) -> Result<Self> {
        if slices.len() != geometry.n_slices
            || motion.len() != geometry.n_slices
            || corrupted.len() != geometry.n_slices
        {
            return Err(Error::ShapeMismatch(format!(
                "series with {} slices got {} images, {} motion states, {} flags",
                geometry.n_slices,
                slices.len(),
                motion.len(),
                corrupted.len()
            )));
        }
        for (k, s) in slices.iter().enumerate() {
            if s.len() != geometry.pixels_per_slice() {
                return Err(Error::ShapeMismatch(format!(
                    "slice {k} has {} pixels, expected {}",
                    s.len(),
                    geometry.pixels_per_slice()
                )));
            }
            if !s.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite(format!("slice {k} contains NaN/inf")));
            }
        }
        for k in 0..geometry.n_slices {
            if !corrupted[k] && !motion[k].is_identity() {
                return Err(Error::InvalidParameter(format!(
                    "slice {k} is flagged clean but carries non-identity motion"
                )));
            }
        }
        Ok(Self { orientation, series_index, geometry, slices, motion, corrupted })
    }

    /// Geometry-only series with zeroed slice data (to build an operator
    /// before data exists).
    pub fn shell(
        orientation: Orientation,
        series_index: usize,
        geometry: SeriesGeometry,
        motion: Vec<RigidTransform>,
        corrupted: Vec<bool>,
    ) -> Result<Self> {
        let slices = vec![vec![0.0; geometry.pixels_per_slice()]; geometry.n_slices];
        Self::from_parts(orientation, series_index, geometry, slices, motion, corrupted)
    }

    pub fn n_rows(&self) -> usize {
        self.geometry.n_rows()
    }
}

/// Stack series data in operator row order (series, then slice, then
/// pixels u-fastest).
pub fn stack_slices(series: &[LRSeries]) -> Vec<f64> {
    let total: usize = series.iter().map(|s| s.n_rows()).sum();
    let mut out = Vec::with_capacity(total);
    for s in series {
        for sl in &s.slices {
            out.extend_from_slice(sl);
        }
    }
    out
}

/// Add complex Gaussian noise in k-space and return the magnitude image.
///
/// The per-component standard deviation in k-space is `sd * sqrt(N)`
/// (unnormalized forward FFT), so the resulting image-domain noise has
/// per-component standard deviation `sd`. With `sd == 0` the input's
/// magnitude is returned unchanged (no FFT round trip).
pub fn add_kspace_noise(slice: &[f64], nu: usize, nv: usize, sd: f64, seed: u64) -> Result<Vec<f64>> {
    if slice.len() != nu * nv {
        return Err(Error::ShapeMismatch(format!(
            "slice has {} pixels, expected {}x{}",
            slice.len(),
            nu,
            nv
        )));
    }
    if !(sd >= 0.0) || !sd.is_finite() {
        return Err(Error::InvalidParameter(format!("noise sd must be >= 0, got {sd}")));
    }
    if sd == 0.0 {
        return Ok(slice.iter().map(|v| v.abs()).collect());
    }

    let n = nu * nv;
    let mut field: Vec<Complex<f64>> = slice.iter().map(|&v| Complex::new(v, 0.0)).collect();

    let mut planner = FftPlanner::<f64>::new();
    let fft_u = planner.plan_fft_forward(nu);
    let fft_v = planner.plan_fft_forward(nv);
    let ifft_u = planner.plan_fft_inverse(nu);
    let ifft_v = planner.plan_fft_inverse(nv);

    // forward 2-D FFT: rows (u), then columns (v)
    for row in field.chunks_exact_mut(nu) {
        fft_u.process(row);
    }
    let mut col = vec![Complex::new(0.0, 0.0); nv];
    for i in 0..nu {
        for j in 0..nv {
            col[j] = field[i + nu * j];
        }
        fft_v.process(&mut col);
        for j in 0..nv {
            field[i + nu * j] = col[j];
        }
    }

    // complex Gaussian noise, scaled so the image-domain per-component
    // deviation equals sd
    let mut rng = stream_rng(seed, &[TAG_NOISE]);
    let normal = Normal::new(0.0, sd * (n as f64).sqrt()).map_err(|e| {
        Error::InvalidParameter(format!("bad noise parameters: {e}"))
    })?;
    for z in &mut field {
        let re: f64 = normal.sample(&mut rng);
        let im: f64 = normal.sample(&mut rng);
        *z += Complex::new(re, im);
    }

    // inverse 2-D FFT with 1/N scaling, then magnitude
    for row in field.chunks_exact_mut(nu) {
        ifft_u.process(row);
    }
    for i in 0..nu {
        for j in 0..nv {
            col[j] = field[i + nu * j];
        }
        ifft_v.process(&mut col);
        for j in 0..nv {
            field[i + nu * j] = col[j];
        }
    }
    let scale = 1.0 / n as f64;
    Ok(field.iter().map(|z| (z * scale).norm()).collect())
}

/// Simulation knobs beyond the standard protocol.
#[derive(Debug, Clone, Copy, Default)]
pub struct SimulateOptions {
    /// Override the automatic slice count.
    pub n_slices: Option<usize>,
    /// Override the sequence-derived PSF (e.g. a near-delta profile for
    /// geometric tests).
    pub psf: Option<PSFSpec>,
}

/// Simulate one low-resolution series from a high-resolution volume.
///
/// Motion and noise streams are derived from
/// `(seed, orientation, series_index)` and the slice index, so any subset
/// of series can be regenerated independently and bit-identically.
pub fn simulate_lr_series(
    hr: &Volume3D,
    orientation: Orientation,
    seq: &crate::phantom::SequenceParams,
    motion_cfg: &MotionConfig,
    series_index: usize,
    seed: u64,
) -> Result<LRSeries> {
    simulate_lr_series_with(hr, orientation, seq, motion_cfg, series_index, seed, SimulateOptions::default())
}

/// [`simulate_lr_series`] with overrides.
pub fn simulate_lr_series_with(
    hr: &Volume3D,
    orientation: Orientation,
    seq: &crate::phantom::SequenceParams,
    motion_cfg: &MotionConfig,
    series_index: usize,
    seed: u64,
    opts: SimulateOptions,
) -> Result<LRSeries> {
    let geometry = SeriesGeometry::covering(&hr.geometry, orientation, seq, series_index, opts.n_slices)?;
    let motion_seed = derive_seed(seed, &[TAG_MOTION, orientation.tag(), series_index as u64]);
    let (motion, corrupted) = sample_motion(motion_cfg, geometry.n_slices, motion_seed)?;

    let shell = LRSeries::shell(orientation, series_index, geometry.clone(), motion, corrupted)?;
    let psf = opts.psf.unwrap_or_else(|| PSFSpec::from_sequence(seq));
    let op = build_operator(std::slice::from_ref(&shell), &hr.geometry, psf, None)?;
    let clean = op.apply(hr)?;

    let pps = geometry.pixels_per_slice();
    let mut slices = Vec::with_capacity(geometry.n_slices);
    for k in 0..geometry.n_slices {
        let raw = &clean[k * pps..(k + 1) * pps];
        let noise_seed = derive_seed(
            seed,
            &[TAG_NOISE, orientation.tag(), series_index as u64, k as u64],
        );
        slices.push(add_kspace_noise(raw, geometry.nu, geometry.nv, seq.noise_sd, noise_seed)?);
    }

    let LRSeries { motion, corrupted, .. } = shell;
    LRSeries::from_parts(orientation, series_index, geometry, slices, motion, corrupted)
}

/// Simulate `per_orientation` series for each of the three cardinal
/// orientations (axial first, then coronal, then sagittal).
pub fn simulate_series_set(
    hr: &Volume3D,
    seq: &crate::phantom::SequenceParams,
    motion_cfg: &MotionConfig,
    per_orientation: usize,
    seed: u64,
) -> Result<Vec<LRSeries>> {
    let mut all = Vec::with_capacity(3 * per_orientation);
    for orientation in Orientation::ALL {
        for idx in 0..per_orientation {
            all.push(simulate_lr_series(hr, orientation, seq, motion_cfg, idx, seed)?);
        }
    }
    Ok(all)
}
