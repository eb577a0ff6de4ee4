//! Image-quality metrics against a known ground truth.
//!
//! PSNR and a 3-D SSIM (Gaussian window 11, sigma 1.5, K1 = 0.01,
//! K2 = 0.03), both evaluated over a foreground mask: the dilated nonzero
//! support of the reference. The data range is the reference maximum
//! inside the mask.

use crate::error::{Error, Result};
use crate::geometry::Volume3D;
use serde::{Deserialize, Serialize};

/// Rounds of 6-neighborhood dilation applied to the reference support for
/// the default evaluation mask.
pub const DEFAULT_MASK_DILATION: usize = 3;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// Quality of a reconstruction relative to the reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Peak signal-to-noise ratio in dB; `f64::INFINITY` when `mse == 0`.
    pub psnr_db: f64,
    /// Mean SSIM over the mask, in [-1, 1].
    pub ssim: f64,
    /// Mean squared error over the mask.
    pub mse: f64,
    /// Reference maximum inside the mask (the PSNR/SSIM data range).
    pub data_range: f64,
    /// Number of voxels in the mask.
    pub n_mask: usize,
    /// True when the test volume matches the reference exactly on the mask.
    pub psnr_infinite: bool,
}

/// Nonzero support of `reference`, grown by `dilate` rounds of
/// 6-neighborhood dilation.
pub fn foreground_mask(reference: &Volume3D, dilate: usize) -> Vec<bool> {
    let [nx, ny, nz] = reference.geometry.dims;
    let mut mask: Vec<bool> = reference.data().iter().map(|&v| v != 0.0).collect();
    let mut next = mask.clone();
    for _ in 0..dilate {
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    let idx = i + nx * (j + ny * k);
                    if mask[idx] {
                        next[idx] = true;
                        continue;
                    }
                    let mut on = false;
                    if i > 0 {
                        on |= mask[idx - 1];
                    }
                    if i + 1 < nx {
                        on |= mask[idx + 1];
                    }
                    if j > 0 {
                        on |= mask[idx - nx];
                    }
                    if j + 1 < ny {
                        on |= mask[idx + nx];
                    }
                    if k > 0 {
                        on |= mask[idx - nx * ny];
                    }
                    if k + 1 < nz {
                        on |= mask[idx + nx * ny];
                    }
                    next[idx] = on;
                }
            }
        }
        std::mem::swap(&mut mask, &mut next);
        next.copy_from_slice(&mask);
    }
    mask
}

fn check_same_grid(reference: &Volume3D, test: &Volume3D) -> Result<()> {
    if reference.geometry.dims != test.geometry.dims {
        return Err(Error::ShapeMismatch(format!(
            "metric inputs differ in grid: {:?} vs {:?}",
            reference.geometry.dims, test.geometry.dims
        )));
    }
    Ok(())
}

fn masked_stats(reference: &Volume3D, test: &Volume3D, mask: &[bool]) -> Result<(f64, f64, usize)> {
    let mut mse = 0.0;
    let mut peak = f64::NEG_INFINITY;
    let mut n = 0usize;
    for ((&r, &t), &m) in reference.data().iter().zip(test.data()).zip(mask) {
        if m {
            let d = r - t;
            mse += d * d;
            peak = peak.max(r);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::InvalidParameter("evaluation mask is empty".into()));
    }
    if peak <= 0.0 {
        return Err(Error::InvalidParameter(
            "reference has no positive intensity inside the mask".into(),
        ));
    }
    Ok((mse / n as f64, peak, n))
}

/// PSNR in dB over `mask`; infinite when the volumes agree exactly there.
pub fn psnr(reference: &Volume3D, test: &Volume3D, mask: &[bool]) -> Result<f64> {
    check_same_grid(reference, test)?;
    let (mse, peak, _) = masked_stats(reference, test, mask)?;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// Normalized Gaussian window taps.
fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as i64;
    let mut w = [0.0; SSIM_WINDOW];
    let mut sum = 0.0;
    for (i, wi) in w.iter_mut().enumerate() {
        let d = (i as i64 - half) as f64;
        *wi = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *wi;
    }
    for wi in &mut w {
        *wi /= sum;
    }
    w
}

/// One separable Gaussian pass along `axis` with replicate padding.
fn blur_axis(src: &[f64], dst: &mut [f64], dims: &[usize; 3], axis: usize, w: &[f64; SSIM_WINDOW]) {
    let [nx, ny, nz] = *dims;
    let half = (SSIM_WINDOW / 2) as i64;
    let (n_axis, stride) = match axis {
        0 => (nx, 1usize),
        1 => (ny, nx),
        _ => (nz, nx * ny),
    };
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let pos = [i, j, k][axis] as i64;
                let base = i + nx * (j + ny * k);
                let line_origin = base - [i, j, k][axis] * stride;
                let mut acc = 0.0;
                for (t, &wt) in w.iter().enumerate() {
                    let q = (pos + t as i64 - half).clamp(0, n_axis as i64 - 1) as usize;
                    acc += wt * src[line_origin + q * stride];
                }
                dst[base] = acc;
            }
        }
    }
}

fn gaussian_blur(src: &[f64], dims: &[usize; 3], w: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let mut a = src.to_vec();
    let mut b = vec![0.0; src.len()];
    blur_axis(&a, &mut b, dims, 0, w);
    blur_axis(&b, &mut a, dims, 1, w);
    blur_axis(&a, &mut b, dims, 2, w);
    b
}

/// Mean SSIM between `reference` and `test` over `mask`.
pub fn ssim(reference: &Volume3D, test: &Volume3D, mask: &[bool]) -> Result<f64> {
    check_same_grid(reference, test)?;
    let (_, peak, _) = masked_stats(reference, test, mask)?;
    let dims = reference.geometry.dims;
    let x = reference.data();
    let y = test.data();
    let w = gaussian_window();

    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();

    let mu_x = gaussian_blur(x, &dims, &w);
    let mu_y = gaussian_blur(y, &dims, &w);
    let e_xx = gaussian_blur(&xx, &dims, &w);
    let e_yy = gaussian_blur(&yy, &dims, &w);
    let e_xy = gaussian_blur(&xy, &dims, &w);

    let c1 = (SSIM_K1 * peak) * (SSIM_K1 * peak);
    let c2 = (SSIM_K2 * peak) * (SSIM_K2 * peak);

    let mut sum = 0.0;
    let mut n = 0usize;
    for idx in 0..x.len() {
        if !mask[idx] {
            continue;
        }
        let mx = mu_x[idx];
        let my = mu_y[idx];
        let var_x = e_xx[idx] - mx * mx;
        let var_y = e_yy[idx] - my * my;
        let cov = e_xy[idx] - mx * my;
        let num = (2.0 * mx * my + c1) * (2.0 * cov + c2);
        let den = (mx * mx + my * my + c1) * (var_x + var_y + c2);
        sum += num / den;
        n += 1;
    }
    Ok(sum / n as f64)
}

/// Full metric report over the default mask (dilated reference support) or
/// a caller-supplied one.
pub fn compare_reconstructions(
    reference: &Volume3D,
    test: &Volume3D,
    mask: Option<&[bool]>,
) -> Result<MetricReport> {
    check_same_grid(reference, test)?;
    let owned;
    let mask = match mask {
        Some(m) => {
            if m.len() != reference.data().len() {
                return Err(Error::ShapeMismatch("mask length differs from volume".into()));
            }
            m
        }
        None => {
            owned = foreground_mask(reference, DEFAULT_MASK_DILATION);
            &owned
        }
    };
    let (mse, peak, n_mask) = masked_stats(reference, test, mask)?;
    let psnr_infinite = mse == 0.0;
    let psnr_db = if psnr_infinite { f64::INFINITY } else { 10.0 * (peak * peak / mse).log10() };
    let ssim_val = ssim(reference, test, mask)?;
    Ok(MetricReport { psnr_db, ssim: ssim_val, mse, data_range: peak, n_mask, psnr_infinite })
}
