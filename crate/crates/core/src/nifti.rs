//! Minimal single-file NIfTI-1 reader/writer.
//!
//! Supported subset: little-endian `.nii` files (magic `n+1\0`), data
//! types float32, float64, and int16, orientation via the sform affine.
//! Files are written with float64 samples by default and an sform-coded
//! affine; `scl_slope`/`scl_inter` are honored on read. Byte-swapped
//! (big-endian) and gzip-compressed files are detected and rejected with
//! a distinct error rather than misread.

use crate::error::{Error, Result};
use crate::geometry::{Volume3D, VolumeGeometry};
use std::fs;
use std::io::Write as _;
use std::path::Path;

const HEADER_SIZE: usize = 348;
/// Data offset for single-file NIfTI-1: header + 4-byte extension flag.
const VOX_OFFSET: usize = 352;
const MAGIC: &[u8; 4] = b"n+1\0";

/// Sample encodings this module can read and write.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NiftiDataType {
    I16,
    F32,
    F64,
}

impl NiftiDataType {
    fn code(self) -> i16 {
        match self {
            NiftiDataType::I16 => 4,
            NiftiDataType::F32 => 16,
            NiftiDataType::F64 => 64,
        }
    }

    fn bitpix(self) -> i16 {
        match self {
            NiftiDataType::I16 => 16,
            NiftiDataType::F32 => 32,
            NiftiDataType::F64 => 64,
        }
    }

    fn bytes(self) -> usize {
        self.bitpix() as usize / 8
    }

    fn from_code(code: i16) -> Result<Self> {
        match code {
            4 => Ok(NiftiDataType::I16),
            16 => Ok(NiftiDataType::F32),
            64 => Ok(NiftiDataType::F64),
            other => Err(Error::NiftiUnsupportedDatatype(other)),
        }
    }
}

// -- little-endian field helpers ---------------------------------------

fn put_i16(buf: &mut [u8], off: usize, v: i16) {
    buf[off..off + 2].copy_from_slice(&v.to_le_bytes());
}

fn put_i32(buf: &mut [u8], off: usize, v: i32) {
    buf[off..off + 4].copy_from_slice(&v.to_le_bytes());
}

fn put_f32(buf: &mut [u8], off: usize, v: f32) {
    buf[off..off + 4].copy_from_slice(&v.to_le_bytes());
}

fn get_i16(buf: &[u8], off: usize) -> i16 {
    i16::from_le_bytes([buf[off], buf[off + 1]])
}

fn get_i32(buf: &[u8], off: usize) -> i32 {
    i32::from_le_bytes([buf[off], buf[off + 1], buf[off + 2], buf[off + 3]])
}

fn get_f32(buf: &[u8], off: usize) -> f32 {
    f32::from_le_bytes([buf[off], buf[off + 1], buf[off + 2], buf[off + 3]])
}

// -- writing ------------------------------------------------------------

fn encode_header(geom: &VolumeGeometry, dtype: NiftiDataType) -> Result<[u8; HEADER_SIZE]> {
    let [nx, ny, nz] = geom.dims;
    if nx > i16::MAX as usize || ny > i16::MAX as usize || nz > i16::MAX as usize {
        return Err(Error::InvalidParameter(format!(
            "grid {nx}x{ny}x{nz} exceeds the format's 16-bit dimension fields"
        )));
    }
    let mut h = [0u8; HEADER_SIZE];
    put_i32(&mut h, 0, HEADER_SIZE as i32);
    h[38] = b'r'; // "regular" flag, conventional
    // dim[8]
    put_i16(&mut h, 40, 3);
    put_i16(&mut h, 42, nx as i16);
    put_i16(&mut h, 44, ny as i16);
    put_i16(&mut h, 46, nz as i16);
    for d in 4..8 {
        put_i16(&mut h, 40 + 2 * d, 1);
    }
    put_i16(&mut h, 70, dtype.code());
    put_i16(&mut h, 72, dtype.bitpix());
    // pixdim[0] is the qform handedness factor; keep +1 by convention
    put_f32(&mut h, 76, 1.0);
    for a in 0..3 {
        put_f32(&mut h, 80 + 4 * a, geom.voxel[a] as f32);
    }
    put_f32(&mut h, 108, VOX_OFFSET as f32);
    put_f32(&mut h, 112, 1.0); // scl_slope
    put_f32(&mut h, 116, 0.0); // scl_inter
    h[123] = 2; // xyzt_units: millimetres
    let descrip = b"srtune volume";
    h[148..148 + descrip.len()].copy_from_slice(descrip);
    put_i16(&mut h, 252, 0); // qform_code: unused
    put_i16(&mut h, 254, 1); // sform_code: scanner anatomical
    // srow_r[c] = axes[c][r] * voxel[c]; column 3 is the origin
    for r in 0..3 {
        let off = 280 + 16 * r;
        for a in 0..3 {
            put_f32(&mut h, off + 4 * a, (geom.axes[a][r] * geom.voxel[a]) as f32);
        }
        put_f32(&mut h, off + 12, geom.origin[r] as f32);
    }
    h[344..348].copy_from_slice(MAGIC);
    Ok(h)
}

/// Write a volume with the given sample type. Samples are cast from the
/// in-memory float64 representation; int16 output is not supported.
pub fn write_volume_as(volume: &Volume3D, path: &Path, dtype: NiftiDataType) -> Result<()> {
    if dtype == NiftiDataType::I16 {
        return Err(Error::InvalidParameter(
            "writing int16 samples is not supported (read-only encoding)".into(),
        ));
    }
    let header = encode_header(&volume.geometry, dtype)?;
    let file = fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    w.write_all(&header)?;
    w.write_all(&[0u8; 4])?; // no header extensions
    match dtype {
        NiftiDataType::F64 => {
            for v in volume.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        NiftiDataType::F32 => {
            for v in volume.data() {
                w.write_all(&(*v as f32).to_le_bytes())?;
            }
        }
        NiftiDataType::I16 => unreachable!(),
    }
    w.flush()?;
    Ok(())
}

/// Write a volume with float64 samples.
pub fn write_volume(volume: &Volume3D, path: &Path) -> Result<()> {
    write_volume_as(volume, path, NiftiDataType::F64)
}

// -- reading ------------------------------------------------------------

/// Read a single-file NIfTI-1 volume. `scl_slope`/`scl_inter` are
/// applied; the grid is taken from the sform affine when present, else
/// from `pixdim` with an origin at zero.
pub fn read_volume(path: &Path) -> Result<Volume3D> {
    let bytes = fs::read(path)?;
    if bytes.len() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b {
        // gzip container
        return Err(Error::NiftiUnsupportedEncoding);
    }
    if bytes.len() < HEADER_SIZE {
        return Err(Error::NiftiTruncated { expected: HEADER_SIZE, found: bytes.len() });
    }
    let sizeof_hdr = get_i32(&bytes, 0);
    if sizeof_hdr == (HEADER_SIZE as i32).swap_bytes() {
        // big-endian file
        return Err(Error::NiftiUnsupportedEncoding);
    }
    if sizeof_hdr != HEADER_SIZE as i32 || &bytes[344..348] != MAGIC {
        return Err(Error::NiftiBadMagic);
    }
    let dtype = NiftiDataType::from_code(get_i16(&bytes, 70))?;

    let ndim = get_i16(&bytes, 40);
    if !(1..=7).contains(&ndim) {
        return Err(Error::BadGeometry(format!("invalid dimension count {ndim}")));
    }
    let mut dims = [1usize; 3];
    for a in 0..3usize {
        if (a as i16) < ndim {
            let d = get_i16(&bytes, 42 + 2 * a);
            if d < 1 {
                return Err(Error::BadGeometry(format!("non-positive extent {d} on axis {a}")));
            }
            dims[a] = d as usize;
        }
    }
    // trailing dimensions must be absent or singleton (no time series)
    for d in 3..ndim as usize {
        let v = get_i16(&bytes, 42 + 2 * d);
        if v > 1 {
            return Err(Error::BadGeometry(format!(
                "{}-dimensional image (axis {d} has extent {v}); only 3-D volumes are supported",
                ndim
            )));
        }
    }

    let geom = decode_geometry(&bytes, dims)?;

    let n = dims[0] * dims[1] * dims[2];
    let vox_offset = get_f32(&bytes, 108);
    if !vox_offset.is_finite() || vox_offset < HEADER_SIZE as f32 {
        return Err(Error::BadGeometry(format!("invalid data offset {vox_offset}")));
    }
    let start = vox_offset as usize;
    let needed = start + n * dtype.bytes();
    if bytes.len() < needed {
        return Err(Error::NiftiTruncated { expected: needed, found: bytes.len() });
    }

    let slope_raw = get_f32(&bytes, 112) as f64;
    let inter = get_f32(&bytes, 116) as f64;
    // slope 0 conventionally means "no scaling stored"
    let slope = if slope_raw == 0.0 { 1.0 } else { slope_raw };
    let inter = if slope_raw == 0.0 { 0.0 } else { inter };

    let raw = &bytes[start..needed];
    let data: Vec<f64> = match dtype {
        NiftiDataType::F64 => raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()) * slope + inter)
            .collect(),
        NiftiDataType::F32 => raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64 * slope + inter)
            .collect(),
        NiftiDataType::I16 => raw
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 * slope + inter)
            .collect(),
    };
    Volume3D::new(geom, data)
}

fn decode_geometry(bytes: &[u8], dims: [usize; 3]) -> Result<VolumeGeometry> {
    let sform_code = get_i16(bytes, 254);
    if sform_code > 0 {
        // columns of the sform are the scaled voxel axes
        let mut cols = [[0.0f64; 3]; 3]; // cols[a][r]
        let mut origin = [0.0f64; 3];
        for r in 0..3 {
            let off = 280 + 16 * r;
            for a in 0..3 {
                cols[a][r] = get_f32(bytes, off + 4 * a) as f64;
            }
            origin[r] = get_f32(bytes, off + 12) as f64;
        }
        let mut voxel = [0.0f64; 3];
        let mut axes = [[0.0f64; 3]; 3];
        for a in 0..3 {
            let norm = (cols[a][0] * cols[a][0] + cols[a][1] * cols[a][1] + cols[a][2] * cols[a][2])
                .sqrt();
            if norm == 0.0 {
                return Err(Error::BadGeometry(format!("sform column {a} is zero")));
            }
            voxel[a] = norm;
            for r in 0..3 {
                axes[a][r] = cols[a][r] / norm;
            }
        }
        VolumeGeometry::new(dims, voxel, origin, axes)
    } else {
        // fall back to voxel sizes only (axis-aligned, origin at zero)
        let mut voxel = [0.0f64; 3];
        for a in 0..3 {
            let p = get_f32(bytes, 80 + 4 * a) as f64;
            if !(p > 0.0) || !p.is_finite() {
                return Err(Error::BadGeometry(format!("invalid voxel size {p} on axis {a}")));
            }
            voxel[a] = p;
        }
        VolumeGeometry::new(dims, voxel, [0.0; 3], crate::geometry::IDENTITY_AXES)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::snap_f32;
    use rand::Rng;
    use rand::SeedableRng;

    fn tmpdir() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    fn random_volume(dims: [usize; 3], voxel: [f64; 3], seed: u64) -> Volume3D {
        let geom = VolumeGeometry::axis_aligned_centered(dims, voxel).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..geom.n_voxels()).map(|_| rng.gen_range(-2.0..2.0)).collect();
        Volume3D::new(geom, data).unwrap()
    }

    #[test]
    fn test_round_trip_f64_bit_identical() {
        let dir = tmpdir();
        let path = dir.path().join("vol.nii");
        let vol = random_volume([8, 8, 8], [1.0, 1.0, 1.0], 1);
        write_volume(&vol, &path).unwrap();
        let back = read_volume(&path).unwrap();
        assert_eq!(vol.data(), back.data());
        assert!(vol.geometry.approx_eq(&back.geometry, 1e-6));
    }

    #[test]
    fn test_round_trip_f32_bit_identical() {
        let dir = tmpdir();
        let path = dir.path().join("vol32.nii");
        // samples chosen on the f32 lattice so the cast is lossless
        let geom = VolumeGeometry::axis_aligned_centered([8, 8, 8], [1.0; 3]).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let data: Vec<f64> =
            (0..geom.n_voxels()).map(|_| rng.gen_range(-2.0f32..2.0) as f64).collect();
        let vol = Volume3D::new(geom, data).unwrap();
        write_volume_as(&vol, &path, NiftiDataType::F32).unwrap();
        let back = read_volume(&path).unwrap();
        assert_eq!(vol.data(), back.data());
    }

    #[test]
    fn test_header_prefix_and_magic() {
        let dir = tmpdir();
        let path = dir.path().join("hdr.nii");
        write_volume(&random_volume([4, 4, 4], [1.0; 3], 3), &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[0..4], &348i32.to_le_bytes());
        assert_eq!(&bytes[344..348], b"n+1\0");
        assert_eq!(get_i16(&bytes, 70), 64); // float64 code
        assert_eq!(get_f32(&bytes, 108), 352.0); // data offset
        assert_eq!(bytes.len(), 352 + 64 * 8);
    }

    #[test]
    fn test_anisotropic_affine_recovered() {
        let dir = tmpdir();
        let path = dir.path().join("aniso.nii");
        let vol = random_volume([6, 5, 4], [1.1, 1.1, 3.0], 4);
        write_volume(&vol, &path).unwrap();
        let back = read_volume(&path).unwrap();
        for a in 0..3 {
            assert!(
                (back.geometry.voxel[a] - vol.geometry.voxel[a]).abs() < 1e-6,
                "axis {a}: {} vs {}",
                back.geometry.voxel[a],
                vol.geometry.voxel[a]
            );
            assert!((back.geometry.origin[a] - vol.geometry.origin[a]).abs() < 1e-6);
        }
    }

    #[test]
    fn test_rotated_axes_round_trip() {
        // a grid whose axes are a (f32-snapped) rotation matrix
        let rot = crate::geometry::RigidTransform::new([20.0, -10.0, 35.0], [0.0; 3]).matrix();
        let mut axes = [[0.0f64; 3]; 3];
        for a in 0..3 {
            for r in 0..3 {
                axes[a][r] = snap_f32(rot[r][a]);
            }
        }
        let geom = VolumeGeometry::new(
            [5, 4, 3],
            [snap_f32(1.1), snap_f32(1.1), 3.0],
            [snap_f32(-4.3), 2.5, 0.0],
            axes,
        )
        .unwrap();
        let data: Vec<f64> = (0..60).map(|i| i as f64 * 0.25).collect();
        let vol = Volume3D::new(geom, data).unwrap();
        let dir = tmpdir();
        let path = dir.path().join("rot.nii");
        write_volume(&vol, &path).unwrap();
        let back = read_volume(&path).unwrap();
        assert_eq!(vol.data(), back.data());
        assert!(vol.geometry.approx_eq(&back.geometry, 1e-6));
    }

    #[test]
    fn test_int16_with_scaling() {
        // hand-build an int16 file with scl_slope 0.5, scl_inter 10
        let geom = VolumeGeometry::axis_aligned_centered([2, 2, 1], [1.0; 3]).unwrap();
        let header = encode_header(&geom, NiftiDataType::F64).unwrap();
        let mut bytes = header.to_vec();
        put_i16(&mut bytes, 70, 4); // int16 code
        put_i16(&mut bytes, 72, 16);
        put_f32(&mut bytes, 112, 0.5);
        put_f32(&mut bytes, 116, 10.0);
        bytes.extend_from_slice(&[0u8; 4]);
        for raw in [-4i16, 0, 7, 100] {
            bytes.extend_from_slice(&raw.to_le_bytes());
        }
        let dir = tmpdir();
        let path = dir.path().join("i16.nii");
        fs::write(&path, &bytes).unwrap();
        let vol = read_volume(&path).unwrap();
        assert_eq!(vol.data(), &[8.0, 10.0, 13.5, 60.0]);
    }

    #[test]
    fn test_slope_zero_means_unscaled() {
        let geom = VolumeGeometry::axis_aligned_centered([2, 1, 1], [1.0; 3]).unwrap();
        let header = encode_header(&geom, NiftiDataType::F64).unwrap();
        let mut bytes = header.to_vec();
        put_f32(&mut bytes, 112, 0.0);
        put_f32(&mut bytes, 116, 99.0); // must be ignored
        bytes.extend_from_slice(&[0u8; 4]);
        for v in [1.5f64, -2.25] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let dir = tmpdir();
        let path = dir.path().join("noslope.nii");
        fs::write(&path, &bytes).unwrap();
        let vol = read_volume(&path).unwrap();
        assert_eq!(vol.data(), &[1.5, -2.25]);
    }

    #[test]
    fn test_error_cases_are_distinct() {
        let dir = tmpdir();
        let vol = random_volume([4, 4, 4], [1.0; 3], 5);
        let good = dir.path().join("good.nii");
        write_volume(&vol, &good).unwrap();
        let bytes = fs::read(&good).unwrap();

        // truncated header
        let p = dir.path().join("short.nii");
        fs::write(&p, &bytes[..100]).unwrap();
        assert!(matches!(
            read_volume(&p),
            Err(Error::NiftiTruncated { expected: 348, found: 100 })
        ));

        // truncated data
        let p = dir.path().join("cut.nii");
        fs::write(&p, &bytes[..bytes.len() - 10]).unwrap();
        match read_volume(&p) {
            Err(Error::NiftiTruncated { expected, found }) => {
                assert_eq!(expected, bytes.len());
                assert_eq!(found, bytes.len() - 10);
            }
            other => panic!("expected truncation error, got {other:?}"),
        }

        // corrupted magic
        let mut bad = bytes.clone();
        bad[344] = b'x';
        let p = dir.path().join("magic.nii");
        fs::write(&p, &bad).unwrap();
        assert!(matches!(read_volume(&p), Err(Error::NiftiBadMagic)));

        // unsupported sample type (int32 = code 8)
        let mut bad = bytes.clone();
        put_i16(&mut bad, 70, 8);
        let p = dir.path().join("dtype.nii");
        fs::write(&p, &bad).unwrap();
        assert!(matches!(read_volume(&p), Err(Error::NiftiUnsupportedDatatype(8))));

        // byte-swapped (big-endian) header
        let mut bad = bytes.clone();
        bad[0..4].copy_from_slice(&348i32.to_be_bytes());
        let p = dir.path().join("swapped.nii");
        fs::write(&p, &bad).unwrap();
        assert!(matches!(read_volume(&p), Err(Error::NiftiUnsupportedEncoding)));

        // gzip container
        let p = dir.path().join("gz.nii.gz");
        fs::write(&p, [0x1f, 0x8b, 0x08, 0x00]).unwrap();
        assert!(matches!(read_volume(&p), Err(Error::NiftiUnsupportedEncoding)));

        // writing int16 is rejected
        assert!(matches!(
            write_volume_as(&vol, &dir.path().join("w16.nii"), NiftiDataType::I16),
            Err(Error::InvalidParameter(_))
        ));
    }

    #[test]
    fn test_pixdim_fallback_when_no_sform() {
        let geom = VolumeGeometry::axis_aligned_centered([3, 3, 3], [1.0; 3]).unwrap();
        let header = encode_header(&geom, NiftiDataType::F64).unwrap();
        let mut bytes = header.to_vec();
        put_i16(&mut bytes, 254, 0); // drop the sform
        put_f32(&mut bytes, 80, 2.0);
        put_f32(&mut bytes, 84, 2.0);
        put_f32(&mut bytes, 88, 4.0);
        bytes.extend_from_slice(&[0u8; 4]);
        for i in 0..27 {
            bytes.extend_from_slice(&(i as f64).to_le_bytes());
        }
        let dir = tmpdir();
        let path = dir.path().join("pixdim.nii");
        fs::write(&path, &bytes).unwrap();
        let vol = read_volume(&path).unwrap();
        assert_eq!(vol.geometry.voxel, [2.0, 2.0, 4.0]);
        assert_eq!(vol.geometry.origin, [0.0, 0.0, 0.0]);
    }
}
