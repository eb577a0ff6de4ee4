//! Volumes in world coordinates, rigid transforms, and resampling.
//!
//! Conventions used everywhere in this crate:
//! * Voxel data is a flat `Vec<f64>` with x fastest: `i + nx*(j + ny*k)`.
//! * A voxel's world position is the center of the voxel; index `(0,0,0)`
//!   sits exactly at `origin`.
//! * `axes[a]` is the world-space unit direction of voxel axis `a`; the
//!   three directions are orthonormal.
//! * Rigid transforms rotate with intrinsic Z-Y-X Euler angles in degrees
//!   and translate in millimeters.

use crate::error::{Error, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Allowed deviation from exact orthonormality of the axes. Loose enough
/// for direction cosines that survived a float32 header, tight enough to
/// reject sheared or scaled axes.
const ORTHO_TOL: f64 = 1e-6;

/// Round through f32 so a value survives a float32 file header bit-exactly.
pub(crate) fn snap_f32(x: f64) -> f64 {
    x as f32 as f64
}

/// Cardinal slice orientations of a low-resolution series.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Orientation {
    /// Slice normal along z.
    Axial,
    /// Slice normal along y.
    Coronal,
    /// Slice normal along x.
    Sagittal,
}

impl Orientation {
    pub const ALL: [Orientation; 3] = [Orientation::Axial, Orientation::Coronal, Orientation::Sagittal];

    /// Volume axis index the slice normal runs along.
    pub fn normal_axis(self) -> usize {
        match self {
            Orientation::Axial => 2,
            Orientation::Coronal => 1,
            Orientation::Sagittal => 0,
        }
    }

    /// The two in-plane volume axis indices (row, column directions).
    pub fn in_plane_axes(self) -> (usize, usize) {
        match self {
            Orientation::Axial => (0, 1),
            Orientation::Coronal => (0, 2),
            Orientation::Sagittal => (1, 2),
        }
    }

    /// Small stable integer used for RNG stream derivation.
    pub fn tag(self) -> u64 {
        match self {
            Orientation::Axial => 0,
            Orientation::Coronal => 1,
            Orientation::Sagittal => 2,
        }
    }
}

impl std::fmt::Display for Orientation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Orientation::Axial => "axial",
            Orientation::Coronal => "coronal",
            Orientation::Sagittal => "sagittal",
        };
        f.write_str(s)
    }
}

/// Placement of a regular voxel grid in world space (millimeters).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeGeometry {
    /// Grid size per axis.
    pub dims: [usize; 3],
    /// Voxel pitch per axis in mm, strictly positive.
    pub voxel: [f64; 3],
    /// World position of the center of voxel (0,0,0).
    pub origin: [f64; 3],
    /// `axes[a]` = world direction of voxel axis `a`; orthonormal set.
    pub axes: [[f64; 3]; 3],
}

impl VolumeGeometry {
    pub fn new(
        dims: [usize; 3],
        voxel: [f64; 3],
        origin: [f64; 3],
        axes: [[f64; 3]; 3],
    ) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::BadGeometry(format!("empty grid {dims:?}")));
        }
        if voxel.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::BadGeometry(format!("non-positive voxel size {voxel:?}")));
        }
        if origin.iter().any(|v| !v.is_finite()) {
            return Err(Error::BadGeometry("non-finite origin".into()));
        }
        for a in 0..3 {
            for b in a..3 {
                let dot = dot3(&axes[a], &axes[b]);
                let want = if a == b { 1.0 } else { 0.0 };
                if (dot - want).abs() > ORTHO_TOL {
                    return Err(Error::BadGeometry(format!(
                        "axes not orthonormal: <a{a},a{b}> = {dot}"
                    )));
                }
            }
        }
        Ok(Self { dims, voxel, origin, axes })
    }

    /// Axis-aligned grid whose center sits at the world origin. All
    /// geometry components are rounded through f32 so the grid survives a
    /// float32 file header exactly.
    pub fn axis_aligned_centered(dims: [usize; 3], voxel: [f64; 3]) -> Result<Self> {
        let voxel = [snap_f32(voxel[0]), snap_f32(voxel[1]), snap_f32(voxel[2])];
        let mut origin = [0.0; 3];
        for a in 0..3 {
            origin[a] = snap_f32(-0.5 * (dims[a] as f64 - 1.0) * voxel[a]);
        }
        Self::new(dims, voxel, origin, IDENTITY_AXES)
    }

    pub fn n_voxels(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    /// Flat index with x fastest.
    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    /// Physical size of the grid along axis `a` (whole-voxel extent).
    pub fn extent(&self, a: usize) -> f64 {
        self.dims[a] as f64 * self.voxel[a]
    }

    /// World position of the grid center.
    pub fn center_world(&self) -> [f64; 3] {
        let mut c = self.origin;
        for a in 0..3 {
            let s = 0.5 * (self.dims[a] as f64 - 1.0) * self.voxel[a];
            for r in 0..3 {
                c[r] += s * self.axes[a][r];
            }
        }
        c
    }

    /// World position of (possibly fractional) voxel coordinates.
    pub fn voxel_to_world(&self, v: [f64; 3]) -> [f64; 3] {
        let mut p = self.origin;
        for a in 0..3 {
            let s = v[a] * self.voxel[a];
            for r in 0..3 {
                p[r] += s * self.axes[a][r];
            }
        }
        p
    }

    /// Continuous voxel coordinates of a world point.
    pub fn world_to_voxel(&self, p: [f64; 3]) -> [f64; 3] {
        let d = [p[0] - self.origin[0], p[1] - self.origin[1], p[2] - self.origin[2]];
        let mut v = [0.0; 3];
        for a in 0..3 {
            v[a] = dot3(&self.axes[a], &d) / self.voxel[a];
        }
        v
    }

    pub fn is_isotropic(&self, tol: f64) -> bool {
        (self.voxel[0] - self.voxel[1]).abs() <= tol && (self.voxel[0] - self.voxel[2]).abs() <= tol
    }

    /// Component-wise comparison; `tol` is in mm for origin/voxel and is
    /// reused unitless for the direction cosines.
    pub fn approx_eq(&self, other: &Self, tol: f64) -> bool {
        if self.dims != other.dims {
            return false;
        }
        for a in 0..3 {
            if (self.voxel[a] - other.voxel[a]).abs() > tol {
                return false;
            }
            if (self.origin[a] - other.origin[a]).abs() > tol {
                return false;
            }
            for r in 0..3 {
                if (self.axes[a][r] - other.axes[a][r]).abs() > tol {
                    return false;
                }
            }
        }
        true
    }
}

pub const IDENTITY_AXES: [[f64; 3]; 3] = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

#[inline]
fn dot3(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Rigid world-space motion: intrinsic Z-Y-X Euler rotation (degrees)
/// followed by translation (mm). `apply` computes `R p + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    /// Rotation angles in degrees about (x, y, z); applied as Rz·Ry·Rx.
    pub rotation_deg: [f64; 3],
    /// Translation in mm, applied after rotation.
    pub translation_mm: [f64; 3],
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self { rotation_deg: [0.0; 3], translation_mm: [0.0; 3] }
    }

    pub fn new(rotation_deg: [f64; 3], translation_mm: [f64; 3]) -> Self {
        Self { rotation_deg, translation_mm }
    }

    pub fn is_identity(&self) -> bool {
        self.rotation_deg == [0.0; 3] && self.translation_mm == [0.0; 3]
    }

    /// Rotation matrix R = Rz(ez) · Ry(ey) · Rx(ex), row-major.
    pub fn matrix(&self) -> [[f64; 3]; 3] {
        let [ex, ey, ez] = self.rotation_deg.map(f64::to_radians);
        let (sx, cx) = ex.sin_cos();
        let (sy, cy) = ey.sin_cos();
        let (sz, cz) = ez.sin_cos();
        [
            [cz * cy, cz * sy * sx - sz * cx, cz * sy * cx + sz * sx],
            [sz * cy, sz * sy * sx + cz * cx, sz * sy * cx - cz * sx],
            [-sy, cy * sx, cy * cx],
        ]
    }

    /// Recover Z-Y-X Euler angles (degrees) from a rotation matrix.
    fn angles_from_matrix(m: &[[f64; 3]; 3]) -> [f64; 3] {
        let sy = (-m[2][0]).clamp(-1.0, 1.0);
        if sy.abs() > 1.0 - 1e-12 {
            // Gimbal lock: x and z rotations act about the same axis;
            // put everything into z.
            let ey = sy.asin();
            let ez = (-m[0][1]).atan2(m[1][1]);
            return [0.0, ey.to_degrees(), ez.to_degrees()];
        }
        let ey = sy.asin();
        let ez = m[1][0].atan2(m[0][0]);
        let ex = m[2][1].atan2(m[2][2]);
        [ex.to_degrees(), ey.to_degrees(), ez.to_degrees()]
    }

    #[inline]
    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let m = self.matrix();
        apply_affine(&m, &self.translation_mm, p)
    }

    /// The transform T⁻¹ with T⁻¹(T(p)) = p.
    pub fn inverse(&self) -> Self {
        let m = self.matrix();
        let mt = transpose(&m);
        let t = self.translation_mm;
        let ti = [
            -(mt[0][0] * t[0] + mt[0][1] * t[1] + mt[0][2] * t[2]),
            -(mt[1][0] * t[0] + mt[1][1] * t[1] + mt[1][2] * t[2]),
            -(mt[2][0] * t[0] + mt[2][1] * t[1] + mt[2][2] * t[2]),
        ];
        Self { rotation_deg: Self::angles_from_matrix(&mt), translation_mm: ti }
    }

    /// Composition `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Self) -> Self {
        let ma = self.matrix();
        let mb = other.matrix();
        let mut m = [[0.0; 3]; 3];
        for r in 0..3 {
            for c in 0..3 {
                m[r][c] = ma[r][0] * mb[0][c] + ma[r][1] * mb[1][c] + ma[r][2] * mb[2][c];
            }
        }
        let t = apply_affine(&ma, &self.translation_mm, other.translation_mm);
        Self { rotation_deg: Self::angles_from_matrix(&m), translation_mm: t }
    }
}

#[inline]
pub(crate) fn apply_affine(m: &[[f64; 3]; 3], t: &[f64; 3], p: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * p[0] + m[0][1] * p[1] + m[0][2] * p[2] + t[0],
        m[1][0] * p[0] + m[1][1] * p[1] + m[1][2] * p[2] + t[1],
        m[2][0] * p[0] + m[2][1] * p[1] + m[2][2] * p[2] + t[2],
    ]
}

fn transpose(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut t = [[0.0; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            t[r][c] = m[c][r];
        }
    }
    t
}

/// A scalar image on a regular grid placed in world space.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    pub geometry: VolumeGeometry,
    data: Vec<f64>,
}

impl Volume3D {
    /// Build a volume, checking length and finiteness.
    pub fn new(geometry: VolumeGeometry, data: Vec<f64>) -> Result<Self> {
        if data.len() != geometry.n_voxels() {
            return Err(Error::ShapeMismatch(format!(
                "geometry holds {} voxels, data has {}",
                geometry.n_voxels(),
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("volume intensities must be finite".into()));
        }
        Ok(Self { geometry, data })
    }

    /// Internal constructor for data known finite by construction.
    pub(crate) fn from_raw(geometry: VolumeGeometry, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), geometry.n_voxels());
        Self { geometry, data }
    }

    pub fn zeros(geometry: VolumeGeometry) -> Self {
        let n = geometry.n_voxels();
        Self { geometry, data: vec![0.0; n] }
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.geometry.index(i, j, k)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, v: f64) {
        let idx = self.geometry.index(i, j, k);
        self.data[idx] = v;
    }

    /// Trilinear interpolation at continuous voxel coordinates; points
    /// outside the grid contribute zero (zero padding).
    pub fn sample_voxel(&self, v: [f64; 3]) -> f64 {
        sample_trilinear(&self.data, &self.geometry.dims, v)
    }

    /// Trilinear interpolation at a world point.
    pub fn sample_world(&self, p: [f64; 3]) -> f64 {
        self.sample_voxel(self.geometry.world_to_voxel(p))
    }

    /// Resample onto `target`: `out(v) = self(T(p_v))` with `p_v` the world
    /// position of target voxel `v`. Values pulled from outside `self` are
    /// zero.
    pub fn resample(&self, transform: &RigidTransform, target: &VolumeGeometry) -> Volume3D {
        let [nx, ny, _nz] = target.dims;
        let m = transform.matrix();
        let t = transform.translation_mm;
        let mut out = vec![0.0; target.n_voxels()];
        out.par_chunks_mut(nx * ny).enumerate().for_each(|(k, slab)| {
            for j in 0..ny {
                for i in 0..nx {
                    let p = target.voxel_to_world([i as f64, j as f64, k as f64]);
                    let q = apply_affine(&m, &t, p);
                    slab[i + nx * j] = self.sample_world(q);
                }
            }
        });
        Volume3D::from_raw(target.clone(), out)
    }
}

/// Trilinear interpolation on a flat x-fastest array with zero padding.
#[inline]
pub(crate) fn sample_trilinear(data: &[f64], dims: &[usize; 3], v: [f64; 3]) -> f64 {
    let [nx, ny, nz] = *dims;
    let fx = v[0].floor();
    let fy = v[1].floor();
    let fz = v[2].floor();
    let i0 = fx as i64;
    let j0 = fy as i64;
    let k0 = fz as i64;
    let wx = v[0] - fx;
    let wy = v[1] - fy;
    let wz = v[2] - fz;
    let mut acc = 0.0;
    for dk in 0..2i64 {
        let k = k0 + dk;
        if k < 0 || k >= nz as i64 {
            continue;
        }
        let wk = if dk == 0 { 1.0 - wz } else { wz };
        for dj in 0..2i64 {
            let j = j0 + dj;
            if j < 0 || j >= ny as i64 {
                continue;
            }
            let wj = if dj == 0 { 1.0 - wy } else { wy };
            for di in 0..2i64 {
                let i = i0 + di;
                if i < 0 || i >= nx as i64 {
                    continue;
                }
                let wi = if di == 0 { 1.0 - wx } else { wx };
                acc += wi * wj * wk * data[i as usize + nx * (j as usize + ny * k as usize)];
            }
        }
    }
    acc
}

/// Euclidean inner product of two volumes on the same grid.
pub fn inner_product(a: &Volume3D, b: &Volume3D) -> Result<f64> {
    if a.geometry.dims != b.geometry.dims {
        return Err(Error::ShapeMismatch(format!(
            "inner product needs matching grids, got {:?} and {:?}",
            a.geometry.dims, b.geometry.dims
        )));
    }
    Ok(dot(a.data(), b.data()))
}

/// Plain serial dot product (deterministic).
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
