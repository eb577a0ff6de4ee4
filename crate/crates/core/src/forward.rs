//! The discrete acquisition operator H and its exact adjoint.
//!
//! H maps a high-resolution volume to stacked low-resolution slice data:
//! for every slice pixel, a separable Gaussian point-spread function is
//! sampled at high-resolution pitch in the slice frame (in-plane FWHM =
//! pixel pitch, through-plane FWHM = slice thickness), each tap is pushed
//! through the slice's rigid motion, and the volume is read by trilinear
//! interpolation with zero padding outside the grid. PSF weights are
//! normalized per axis; rows are never renormalized, so boundary pixels
//! that reach past the volume see less mass.
//!
//! All of this is precomputed at build time into one sparse (CSR) block
//! per slice. The adjoint scatters exactly the same weights, which makes
//! `<Hx, y> == <x, Hᵀy>` hold to floating-point rounding by construction.

use crate::acquisition::{sample_motion, LRSeries, MotionConfig};
use crate::error::{Error, Result};
use crate::geometry::{RigidTransform, Volume3D, VolumeGeometry};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::sync::OnceLock;

/// Seed-stream namespace for registration-error perturbations.
const TAG_MOTION_ERROR: u64 = 5;

/// Relative weight below which accumulated taps of a row are dropped.
/// Keeps ~99.5% of the row mass while shrinking the stored operator.
const PRUNE_REL: f64 = 1e-3;

/// Fixed number of scatter partitions in the adjoint. Chunk-internal
/// order is sequential and partials are combined in index order, so the
/// result is bit-identical for any thread count.
const ADJOINT_CHUNKS: usize = 8;

/// Point-spread function of one acquired slice pixel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PSFSpec {
    pub kind: PSFKind,
    /// FWHM (mm) along the slice axes (u, v, normal).
    pub fwhm_mm: [f64; 3],
    /// Taps are kept within `truncation` standard deviations.
    pub truncation: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PSFKind {
    /// Separable Gaussian profile.
    Gaussian,
}

impl PSFSpec {
    /// Protocol PSF: in-plane FWHM equal to the pixel pitch, through-plane
    /// FWHM equal to the slice thickness.
    pub fn from_sequence(seq: &crate::phantom::SequenceParams) -> Self {
        Self {
            kind: PSFKind::Gaussian,
            fwhm_mm: [seq.in_plane_mm, seq.in_plane_mm, seq.slice_thickness_mm],
            truncation: 3.0,
        }
    }

    /// Practically a delta function: a single tap, pure trilinear
    /// sampling. Useful for geometric tests.
    pub fn near_delta() -> Self {
        Self { kind: PSFKind::Gaussian, fwhm_mm: [1e-9; 3], truncation: 3.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.fwhm_mm.iter().any(|&f| !(f > 0.0) || !f.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "PSF FWHM must be positive, got {:?}",
                self.fwhm_mm
            )));
        }
        if !(self.truncation > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "PSF truncation must be positive, got {}",
                self.truncation
            )));
        }
        Ok(())
    }

    fn sigmas(&self) -> [f64; 3] {
        const FWHM_TO_SIGMA: f64 = 2.354820045030949; // 2 sqrt(2 ln 2)
        self.fwhm_mm.map(|f| f / FWHM_TO_SIGMA)
    }
}

/// Geometry, motion, and bookkeeping of one slice inside the operator.
#[derive(Debug, Clone)]
pub struct SliceDescriptor {
    /// Position of the parent series in the list passed to `build_operator`.
    pub series: usize,
    /// The parent series' own acquisition index.
    pub series_index: usize,
    pub slice_index: usize,
    pub motion: RigidTransform,
    /// World center of pixel (0,0) of this slice.
    pub origin: [f64; 3],
    pub u_dir: [f64; 3],
    pub v_dir: [f64; 3],
    pub normal: [f64; 3],
    pub nu: usize,
    pub nv: usize,
    pub in_plane_mm: f64,
    pub psf: PSFSpec,
    /// First row of this slice in the stacked data vector.
    pub row_offset: usize,
}

/// One sparse row block (all pixels of one slice).
struct CsrBlock {
    row_ptr: Vec<u32>,
    cols: Vec<u32>,
    weights: Vec<f32>,
}

/// Precomputed sparse acquisition operator.
pub struct ForwardOperator {
    target: VolumeGeometry,
    psf: PSFSpec,
    descriptors: Vec<SliceDescriptor>,
    blocks: Vec<CsrBlock>,
    n_rows: usize,
    norm_cache: OnceLock<f64>,
}

impl ForwardOperator {
    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.target.n_voxels()
    }

    pub fn target(&self) -> &VolumeGeometry {
        &self.target
    }

    pub fn psf(&self) -> &PSFSpec {
        &self.psf
    }

    pub fn descriptors(&self) -> &[SliceDescriptor] {
        &self.descriptors
    }

    /// Rows belonging to slice `d` (index into `descriptors`).
    pub fn slice_rows(&self, d: usize) -> std::ops::Range<usize> {
        let desc = &self.descriptors[d];
        desc.row_offset..desc.row_offset + desc.nu * desc.nv
    }

    /// Total stored non-zeros (diagnostics).
    pub fn nnz(&self) -> usize {
        self.blocks.iter().map(|b| b.cols.len()).sum()
    }

    /// Apply H to a volume on the target grid.
    pub fn apply(&self, x: &Volume3D) -> Result<Vec<f64>> {
        if x.geometry.dims != self.target.dims {
            return Err(Error::ShapeMismatch(format!(
                "operator target is {:?}, volume is {:?}",
                self.target.dims, x.geometry.dims
            )));
        }
        if !x.geometry.approx_eq(&self.target, 1e-6) {
            return Err(Error::BadGeometry(
                "volume geometry differs from the operator target grid".into(),
            ));
        }
        let mut out = vec![0.0; self.n_rows];
        self.apply_raw(x.data(), &mut out);
        Ok(out)
    }

    /// Apply Hᵀ to stacked slice data, producing a target-grid volume.
    pub fn apply_adjoint(&self, y: &[f64]) -> Result<Volume3D> {
        if y.len() != self.n_rows {
            return Err(Error::ShapeMismatch(format!(
                "operator has {} rows, data has {}",
                self.n_rows,
                y.len()
            )));
        }
        let mut out = vec![0.0; self.n_cols()];
        self.adjoint_raw(y, &mut out);
        Ok(Volume3D::from_raw(self.target.clone(), out))
    }

    /// CSR forward pass; rows of different slices run in parallel.
    pub(crate) fn apply_raw(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.n_cols());
        debug_assert_eq!(out.len(), self.n_rows);
        // split the output into per-slice chunks
        let mut parts: Vec<&mut [f64]> = Vec::with_capacity(self.blocks.len());
        let mut rest = out;
        for b in &self.blocks {
            let n = b.row_ptr.len() - 1;
            let (head, tail) = rest.split_at_mut(n);
            parts.push(head);
            rest = tail;
        }
        self.blocks.par_iter().zip(parts).for_each(|(block, rows)| {
            for (r, slot) in rows.iter_mut().enumerate() {
                let lo = block.row_ptr[r] as usize;
                let hi = block.row_ptr[r + 1] as usize;
                let mut acc = 0.0f64;
                for idx in lo..hi {
                    acc += block.weights[idx] as f64 * x[block.cols[idx] as usize];
                }
                *slot = acc;
            }
        });
    }

    /// CSR adjoint (scatter) pass, deterministic under any thread count.
    pub(crate) fn adjoint_raw(&self, y: &[f64], out: &mut [f64]) {
        debug_assert_eq!(y.len(), self.n_rows);
        debug_assert_eq!(out.len(), self.n_cols());
        let n_blocks = self.blocks.len();
        let chunk = n_blocks.div_ceil(ADJOINT_CHUNKS).max(1);
        let n_cols = self.n_cols();
        let partials: Vec<Vec<f64>> = self
            .blocks
            .par_chunks(chunk)
            .enumerate()
            .map(|(ci, blocks)| {
                let mut acc = vec![0.0f64; n_cols];
                for (bi, block) in blocks.iter().enumerate() {
                    let desc = &self.descriptors[ci * chunk + bi];
                    let rows = block.row_ptr.len() - 1;
                    for r in 0..rows {
                        let val = y[desc.row_offset + r];
                        if val == 0.0 {
                            continue;
                        }
                        let lo = block.row_ptr[r] as usize;
                        let hi = block.row_ptr[r + 1] as usize;
                        for idx in lo..hi {
                            acc[block.cols[idx] as usize] += block.weights[idx] as f64 * val;
                        }
                    }
                }
                acc
            })
            .collect();
        out.fill(0.0);
        for p in partials {
            for (o, v) in out.iter_mut().zip(p) {
                *o += v;
            }
        }
    }

    /// Largest singular value of H, estimated by power iteration on HᵀH
    /// with a fixed seed; cached after the first call.
    pub fn operator_norm(&self) -> f64 {
        *self.norm_cache.get_or_init(|| self.power_iteration(30, 0x5eed))
    }

    fn power_iteration(&self, iters: usize, seed: u64) -> f64 {
        use rand::Rng;
        let n = self.n_cols();
        let mut rng = crate::seeds::stream_rng(seed, &[0x9090]);
        let mut v: Vec<f64> = (0..n).map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 }).collect();
        normalize(&mut v);
        let mut w = vec![0.0; self.n_rows];
        let mut est = 0.0;
        for _ in 0..iters {
            self.apply_raw(&v, &mut w);
            est = norm2(&w);
            let mut next = vec![0.0; n];
            self.adjoint_raw(&w, &mut next);
            let nn = norm2(&next);
            if nn == 0.0 {
                return 0.0;
            }
            for x in &mut next {
                *x /= nn;
            }
            v = next;
        }
        est
    }
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn normalize(v: &mut [f64]) {
    let n = norm2(v);
    if n > 0.0 {
        for x in v {
            *x /= n;
        }
    }
}

/// Normalized Gaussian taps at pitch `h` for one axis.
fn axis_taps(sigma: f64, truncation: f64, h: f64) -> Vec<(i64, f64)> {
    let k = ((truncation * sigma) / h).floor() as i64;
    let mut taps = Vec::with_capacity((2 * k + 1) as usize);
    let mut sum = 0.0;
    for t in -k..=k {
        let d = t as f64 * h;
        let w = (-d * d / (2.0 * sigma * sigma)).exp();
        sum += w;
        taps.push((t, w));
    }
    for (_, w) in &mut taps {
        *w /= sum;
    }
    taps
}

/// Random perturbation of the per-slice transforms used when building
/// the operator, emulating the residual error of a slice-to-volume
/// registration step.
#[derive(Debug, Clone, Copy)]
pub struct MotionError {
    pub config: MotionConfig,
    pub seed: u64,
}

/// Build the sparse acquisition operator for a set of series over a
/// target grid. With `motion_error`, each slice's ground-truth transform
/// is composed with a random perturbation drawn from the given
/// configuration; without it the simulator's transforms are used exactly.
pub fn build_operator(
    series: &[LRSeries],
    target: &VolumeGeometry,
    psf: PSFSpec,
    motion_error: Option<&MotionError>,
) -> Result<ForwardOperator> {
    psf.validate()?;
    if series.is_empty() {
        return Err(Error::InvalidParameter("no series given".into()));
    }
    if target.n_voxels() > u32::MAX as usize {
        return Err(Error::InvalidParameter("target grid too large for 32-bit indexing".into()));
    }

    // flatten to per-slice descriptors with cumulative row offsets
    let mut descriptors = Vec::new();
    let mut row_offset = 0usize;
    for (s_pos, s) in series.iter().enumerate() {
        let g = &s.geometry;
        let perturbation = match motion_error {
            Some(me) => {
                let seed = crate::seeds::derive_seed(me.seed, &[TAG_MOTION_ERROR, s_pos as u64]);
                let (transforms, _) = sample_motion(&me.config, g.n_slices, seed)?;
                Some(transforms)
            }
            None => None,
        };
        for k in 0..g.n_slices {
            let mut origin = g.origin;
            for r in 0..3 {
                origin[r] += k as f64 * g.slice_spacing_mm * g.normal[r];
            }
            descriptors.push(SliceDescriptor {
                series: s_pos,
                series_index: s.series_index,
                slice_index: k,
                motion: match &perturbation {
                    Some(p) => p[k].compose(&s.motion[k]),
                    None => s.motion[k],
                },
                origin,
                u_dir: g.u_dir,
                v_dir: g.v_dir,
                normal: g.normal,
                nu: g.nu,
                nv: g.nv,
                in_plane_mm: g.in_plane_mm,
                psf,
                row_offset,
            });
            row_offset += g.nu * g.nv;
        }
    }

    let blocks: Vec<CsrBlock> = descriptors
        .par_iter()
        .map(|desc| build_slice_block(desc, target))
        .collect();

    Ok(ForwardOperator {
        target: target.clone(),
        psf,
        descriptors,
        blocks,
        n_rows: row_offset,
        norm_cache: OnceLock::new(),
    })
}

/// Precompute the sparse rows of one slice.
fn build_slice_block(desc: &SliceDescriptor, target: &VolumeGeometry) -> CsrBlock {
    let [nx, ny, nz] = target.dims;
    // tap pitch: the finest target pitch
    let h = target.voxel.iter().cloned().fold(f64::INFINITY, f64::min);
    let sig = desc.psf.sigmas();
    let taps_u = axis_taps(sig[0], desc.psf.truncation, h);
    let taps_v = axis_taps(sig[1], desc.psf.truncation, h);
    let taps_n = axis_taps(sig[2], desc.psf.truncation, h);

    // affine world -> continuous voxel coordinates of the target
    // vox[a] = axes[a] . (p - origin) / voxel[a]
    let mut vmat = [[0.0f64; 3]; 3];
    for a in 0..3 {
        for r in 0..3 {
            vmat[a][r] = target.axes[a][r] / target.voxel[a];
        }
    }
    let rot = desc.motion.matrix();
    let trans = desc.motion.translation_mm;

    let mul_dir = |d: &[f64; 3], scale: f64| -> [f64; 3] {
        // vmat . (rot . (scale * d))
        let rd = [
            scale * (rot[0][0] * d[0] + rot[0][1] * d[1] + rot[0][2] * d[2]),
            scale * (rot[1][0] * d[0] + rot[1][1] * d[1] + rot[1][2] * d[2]),
            scale * (rot[2][0] * d[0] + rot[2][1] * d[1] + rot[2][2] * d[2]),
        ];
        [
            vmat[0][0] * rd[0] + vmat[0][1] * rd[1] + vmat[0][2] * rd[2],
            vmat[1][0] * rd[0] + vmat[1][1] * rd[1] + vmat[1][2] * rd[2],
            vmat[2][0] * rd[0] + vmat[2][1] * rd[1] + vmat[2][2] * rd[2],
        ]
    };

    // pixel steps and tap steps in voxel coordinates
    let step_u = mul_dir(&desc.u_dir, desc.in_plane_mm);
    let step_v = mul_dir(&desc.v_dir, desc.in_plane_mm);
    let tap_u = mul_dir(&desc.u_dir, h);
    let tap_v = mul_dir(&desc.v_dir, h);
    let tap_n = mul_dir(&desc.normal, h);

    // voxel coordinates of moved pixel (0,0):
    // vmat . (rot . origin + trans - target.origin)
    let p0 = crate::geometry::apply_affine(&rot, &trans, desc.origin);
    let rel = [p0[0] - target.origin[0], p0[1] - target.origin[1], p0[2] - target.origin[2]];
    let base00 = [
        vmat[0][0] * rel[0] + vmat[0][1] * rel[1] + vmat[0][2] * rel[2],
        vmat[1][0] * rel[0] + vmat[1][1] * rel[1] + vmat[1][2] * rel[2],
        vmat[2][0] * rel[0] + vmat[2][1] * rel[1] + vmat[2][2] * rel[2],
    ];

    // patch half-extent per axis (constant over the slice)
    let ku = (taps_u.len() as i64 - 1) / 2;
    let kv = (taps_v.len() as i64 - 1) / 2;
    let kn = (taps_n.len() as i64 - 1) / 2;
    let mut ext = [0.0f64; 3];
    for r in 0..3 {
        ext[r] = ku as f64 * tap_u[r].abs() + kv as f64 * tap_v[r].abs() + kn as f64 * tap_n[r].abs();
    }
    // patch spans the tap box plus trilinear corners: indices run from
    // floor(base - ext) - 1 to floor(base + ext) + 1 inclusive
    let pdim = [
        (2.0 * ext[0]).ceil() as usize + 4,
        (2.0 * ext[1]).ceil() as usize + 4,
        (2.0 * ext[2]).ceil() as usize + 4,
    ];
    let mut patch = vec![0.0f64; pdim[0] * pdim[1] * pdim[2]];

    let n_pixels = desc.nu * desc.nv;
    let mut row_ptr = Vec::with_capacity(n_pixels + 1);
    let mut cols = Vec::new();
    let mut weights = Vec::new();
    row_ptr.push(0u32);

    for j in 0..desc.nv {
        for i in 0..desc.nu {
            let base = [
                base00[0] + i as f64 * step_u[0] + j as f64 * step_v[0],
                base00[1] + i as f64 * step_u[1] + j as f64 * step_v[1],
                base00[2] + i as f64 * step_u[2] + j as f64 * step_v[2],
            ];
            // patch origin: lowest voxel index any corner can touch
            let lo = [
                (base[0] - ext[0]).floor() as i64 - 1,
                (base[1] - ext[1]).floor() as i64 - 1,
                (base[2] - ext[2]).floor() as i64 - 1,
            ];
            patch.fill(0.0);
            let mut wmax = 0.0f64;

            for &(tn, wn) in &taps_n {
                for &(tv, wv) in &taps_v {
                    let wvn = wv * wn;
                    for &(tu, wu) in &taps_u {
                        let w = wu * wvn;
                        let pos = [
                            base[0] + tu as f64 * tap_u[0] + tv as f64 * tap_v[0] + tn as f64 * tap_n[0],
                            base[1] + tu as f64 * tap_u[1] + tv as f64 * tap_v[1] + tn as f64 * tap_n[1],
                            base[2] + tu as f64 * tap_u[2] + tv as f64 * tap_v[2] + tn as f64 * tap_n[2],
                        ];
                        let fx = pos[0].floor();
                        let fy = pos[1].floor();
                        let fz = pos[2].floor();
                        let wx1 = pos[0] - fx;
                        let wy1 = pos[1] - fy;
                        let wz1 = pos[2] - fz;
                        let li = (fx as i64 - lo[0]) as usize;
                        let lj = (fy as i64 - lo[1]) as usize;
                        let lk = (fz as i64 - lo[2]) as usize;
                        debug_assert!(li + 1 < pdim[0] && lj + 1 < pdim[1] && lk + 1 < pdim[2]);
                        let s = li + pdim[0] * (lj + pdim[1] * lk);
                        let sx = 1;
                        let sy = pdim[0];
                        let sz = pdim[0] * pdim[1];
                        patch[s] += w * (1.0 - wx1) * (1.0 - wy1) * (1.0 - wz1);
                        patch[s + sx] += w * wx1 * (1.0 - wy1) * (1.0 - wz1);
                        patch[s + sy] += w * (1.0 - wx1) * wy1 * (1.0 - wz1);
                        patch[s + sx + sy] += w * wx1 * wy1 * (1.0 - wz1);
                        patch[s + sz] += w * (1.0 - wx1) * (1.0 - wy1) * wz1;
                        patch[s + sx + sz] += w * wx1 * (1.0 - wy1) * wz1;
                        patch[s + sy + sz] += w * (1.0 - wx1) * wy1 * wz1;
                        patch[s + sx + sy + sz] += w * wx1 * wy1 * wz1;
                        wmax = wmax.max(w);
                    }
                }
            }

            // emit entries above the pruning threshold, in ascending
            // voxel-index order, dropping out-of-grid corners
            let thr = PRUNE_REL * wmax;
            for lk in 0..pdim[2] {
                let gz = lo[2] + lk as i64;
                if gz < 0 || gz >= nz as i64 {
                    continue;
                }
                for lj in 0..pdim[1] {
                    let gy = lo[1] + lj as i64;
                    if gy < 0 || gy >= ny as i64 {
                        continue;
                    }
                    let prow = pdim[0] * (lj + pdim[1] * lk);
                    let grow = nx * (gy as usize + ny * gz as usize);
                    for li in 0..pdim[0] {
                        let w = patch[prow + li];
                        if w <= thr {
                            continue;
                        }
                        let gx = lo[0] + li as i64;
                        if gx < 0 || gx >= nx as i64 {
                            continue;
                        }
                        cols.push((gx as usize + grow) as u32);
                        weights.push(w as f32);
                    }
                }
            }
            row_ptr.push(cols.len() as u32);
        }
    }

    CsrBlock { row_ptr, cols, weights }
}
