//! Image quality metrics.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Reported in place of infinity for identical images.
pub const PSNR_CAP: f64 = 99.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            expected: b.shape().to_vec(),
            actual: a.shape().to_vec(),
        });
    }
    Ok(())
}

/// Peak value used when none is given: 1 for images in `[0, 1]`, the largest
/// complex magnitude for 2-channel images.
pub fn default_data_range(x: &Tensor) -> f64 {
    match x.image_dims() {
        Ok((2, h, w)) => {
            let d = x.data();
            let n = h * w;
            (0..n).map(|i| d[i].hypot(d[n + i])).fold(0.0, f64::max).max(f64::MIN_POSITIVE)
        }
        _ => 1.0,
    }
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape(a, b)?;
    let n = a.numel().max(1) as f64;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n)
}

/// `10 log10(range² / MSE)`, capped at [`PSNR_CAP`].
pub fn psnr(estimate: &Tensor, reference: &Tensor, data_range: f64) -> Result<f64> {
    if !(data_range > 0.0) {
        return Err(Error::invalid(format!("data range must be positive, got {data_range}")));
    }
    let m = mse(estimate, reference)?;
    if m == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (data_range * data_range / m).log10()).min(PSNR_CAP))
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable filtering over all fully contained windows.
fn filter_valid(img: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (ho, wo) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * wo];
    for r in 0..h {
        for c in 0..wo {
            rows[r * wo + c] = (0..k).map(|j| g[j] * img[r * w + c + j]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for r in 0..ho {
        for c in 0..wo {
            out[r * wo + c] = (0..k).map(|j| g[j] * rows[(r + j) * wo + c]).sum();
        }
    }
    out
}

/// Mean SSIM with an 11×11 Gaussian window (σ = 1.5), averaged over
/// channels. Only windows lying fully inside the image contribute.
pub fn ssim(estimate: &Tensor, reference: &Tensor, data_range: f64) -> Result<f64> {
    same_shape(estimate, reference)?;
    if !(data_range > 0.0) {
        return Err(Error::invalid(format!("data range must be positive, got {data_range}")));
    }
    let (c, h, w) = reference.image_dims()?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let g = gaussian_window();
    let c1 = (SSIM_K1 * data_range).powi(2);
    let c2 = (SSIM_K2 * data_range).powi(2);
    let plane = h * w;
    let mut total = 0.0;
    for ch in 0..c {
        let x = &estimate.data()[ch * plane..(ch + 1) * plane];
        let y = &reference.data()[ch * plane..(ch + 1) * plane];
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
        let mx = filter_valid(x, h, w, &g);
        let my = filter_valid(y, h, w, &g);
        let sxx = filter_valid(&xx, h, w, &g);
        let syy = filter_valid(&yy, h, w, &g);
        let sxy = filter_valid(&xy, h, w, &g);
        let n = mx.len() as f64;
        let mut sum = 0.0;
        for i in 0..mx.len() {
            let (a, b) = (mx[i], my[i]);
            let vx = sxx[i] - a * a;
            let vy = syy[i] - b * b;
            let cov = sxy[i] - a * b;
            sum += ((2.0 * a * b + c1) * (2.0 * cov + c2)) / ((a * a + b * b + c1) * (vx + vy + c2));
        }
        total += sum / n;
    }
    Ok(total / c as f64)
}
