//! Image-quality metrics.
//!
//! LPIPS is not provided: it needs a pretrained perceptual network, which
//! this crate does not ship.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::ImageBuffer;

/// Reported when two images are identical (MSE of zero).
pub const PSNR_CAP: f64 = 99.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub psnr: f64,
    pub ssim: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub validation_accuracy: Option<f64>,
}

fn same_dims(a: &ImageBuffer, b: &ImageBuffer) -> Result<()> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::Contract(format!(
            "image sizes differ: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(())
}

/// PSNR over RGB for [0,1] images, capped at [`PSNR_CAP`].
///
/// With a mask, only pixels whose mask value exceeds 0.5 count. Values are
/// used as given; quantize first to compare what would be written to disk.
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer, mask: Option<&[f64]>) -> Result<f64> {
    same_dims(a, b)?;
    let n = a.pixel_count();
    if let Some(m) = mask {
        if m.len() != n {
            return Err(Error::Contract(format!("mask has {} entries for {n} pixels", m.len())));
        }
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for p in 0..n {
        if mask.is_some_and(|m| m[p] <= 0.5) {
            continue;
        }
        let (x, y) = (a.rgb(p), b.rgb(p));
        sum += (0..3).map(|c| (x[c] - y[c]).powi(2)).sum::<f64>();
        count += 3;
    }
    if count == 0 {
        return Err(Error::Contract("mask selects no pixels".into()));
    }
    Ok(psnr_from_mse(sum / count as f64))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (-10.0 * mse.log10()).min(PSNR_CAP)
    }
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let r = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let x = i as f64 - r;
        *v = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

// Separable "valid" filtering of a w x h plane.
fn filter_valid(plane: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w + 1 - SSIM_WINDOW;
    let oh = h + 1 - SSIM_WINDOW;
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean windowed SSIM (11x11 Gaussian, sigma 1.5) averaged over RGB.
pub fn ssim(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    same_dims(a, b)?;
    let (w, h) = (a.width as usize, a.height as usize);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::Contract(format!("SSIM needs at least 11x11 pixels, got {w}x{h}")));
    }
    let k = gaussian_window();
    let mut total = 0.0;
    for c in 0..3 {
        let x: Vec<f64> = (0..w * h).map(|p| a.rgb(p)[c]).collect();
        let y: Vec<f64> = (0..w * h).map(|p| b.rgb(p)[c]).collect();
        let prod = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(p, q)| p * q).collect::<Vec<_>>();
        let mx = filter_valid(&x, w, h, &k);
        let my = filter_valid(&y, w, h, &k);
        let mxx = filter_valid(&prod(&x, &x), w, h, &k);
        let myy = filter_valid(&prod(&y, &y), w, h, &k);
        let mxy = filter_valid(&prod(&x, &y), w, h, &k);
        let mut sum = 0.0;
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = mxx[i] - ux * ux;
            let vy = myy[i] - uy * uy;
            let cov = mxy[i] - ux * uy;
            sum += ((2.0 * ux * uy + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2));
        }
        total += sum / mx.len() as f64;
    }
    Ok(total / 3.0)
}

/// Few-view PSNR as a percentage of the whole-field fit PSNR.
pub fn validation_accuracy(val_psnr: f64, whole_psnr: f64) -> Result<f64> {
    if !(whole_psnr > 0.0) {
        return Err(Error::Contract(format!(
            "whole-field PSNR must be positive, got {whole_psnr}"
        )));
    }
    Ok(100.0 * val_psnr / whole_psnr)
}
