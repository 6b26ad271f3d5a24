use std::sync::Arc;

use rand_distr::{Distribution, StandardNormal};

use super::resample::{Resample1d, Separable};
use super::{validate_image_shape, LinearOperator, OperatorHandle};
use crate::error::{Error, Result};
use crate::rng::rng_from_seed;
use crate::tensor::Tensor;

/// Square, odd-sized, nonnegative kernel summing to one.
#[derive(Clone, Debug, PartialEq)]
pub struct BlurKernel {
    size: usize,
    data: Vec<f64>,
}

impl BlurKernel {
    /// Validates and normalizes `data` (row-major `size x size`).
    pub fn new(size: usize, data: Vec<f64>) -> Result<Self> {
        if size % 2 == 0 || size == 0 {
            return Err(Error::invalid(format!("kernel size {size} must be odd")));
        }
        if data.len() != size * size {
            return Err(Error::ShapeMismatch {
                expected: vec![size, size],
                actual: vec![data.len()],
            });
        }
        if data.iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::invalid("kernel entries must be finite and nonnegative"));
        }
        let total: f64 = data.iter().sum();
        if total <= 0.0 {
            return Err(Error::invalid("kernel has zero mass"));
        }
        Ok(BlurKernel {
            size,
            data: data.into_iter().map(|v| v / total).collect(),
        })
    }

    pub fn delta(size: usize) -> Result<Self> {
        let mut data = vec![0.0; size * size];
        if size % 2 == 1 {
            data[size * size / 2] = 1.0;
        }
        Self::new(size, data)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.size, self.size], self.data.clone()).expect("kernel shape")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.shape() {
            [a, b] if a == b => Self::new(*a, t.data().to_vec()),
            s => Err(Error::InvalidShape(s.to_vec())),
        }
    }

    /// Area-resampled kernel for a grid coarser by `factor`; the result
    /// keeps an odd size of `2 * floor(size / factor / 2) + 1`.
    pub fn downscaled(&self, factor: usize) -> Result<Self> {
        if factor <= 1 {
            return Ok(self.clone());
        }
        let f = factor as f64;
        let k = self.size;
        let ks = 2 * ((k / factor) / 2) + 1;
        let c = (k as f64 - 1.0) / 2.0;
        let cs = (ks as f64 - 1.0) / 2.0;
        // weights[p][q]: share of fine pixel p falling into coarse cell q
        let share = |p: usize| -> Vec<(usize, f64)> {
            let lo = p as f64 - c - 0.5;
            let hi = lo + 1.0;
            let mut out = Vec::new();
            for q in 0..ks {
                let clo = (q as f64 - cs - 0.5) * f;
                let chi = (q as f64 - cs + 0.5) * f;
                let (clo, chi) = (
                    if q == 0 { f64::NEG_INFINITY } else { clo },
                    if q == ks - 1 { f64::INFINITY } else { chi },
                );
                let overlap = hi.min(chi) - lo.max(clo);
                if overlap > 0.0 {
                    out.push((q, overlap));
                }
            }
            out
        };
        let shares: Vec<Vec<(usize, f64)>> = (0..k).map(share).collect();
        let mut data = vec![0.0; ks * ks];
        for py in 0..k {
            for px in 0..k {
                let v = self.data[py * k + px];
                if v == 0.0 {
                    continue;
                }
                for &(qy, wy) in &shares[py] {
                    for &(qx, wx) in &shares[px] {
                        data[qy * ks + qx] += v * wy * wx;
                    }
                }
            }
        }
        Self::new(ks, data)
    }
}

/// Isotropic Gaussian sampled on a `size x size` grid and normalized.
pub fn make_gaussian_kernel(sigma_blur: f64, size: usize) -> Result<BlurKernel> {
    if !(sigma_blur > 0.0) {
        return Err(Error::invalid("sigma_blur must be positive"));
    }
    let c = (size as f64 - 1.0) / 2.0;
    let data = (0..size * size)
        .map(|i| {
            let (y, x) = ((i / size) as f64 - c, (i % size) as f64 - c);
            (-(x * x + y * y) / (2.0 * sigma_blur * sigma_blur)).exp()
        })
        .collect();
    BlurKernel::new(size, data)
}

const TRAJECTORY_KNOTS: usize = 100;
const TRAJECTORY_SAMPLES: usize = 1000;

/// Random motion-blur kernel: a 2-D Gaussian-process trajectory with RBF
/// covariance (length scale `length_scale`, amplitude `amplitude`) over
/// `t in [0, 1]`, rasterized by bilinear splatting of 1000 points.
///
/// The process is drawn exactly at 100 knots and interpolated linearly to
/// the splatting points. Offsets are measured in quarters of the kernel
/// width and the trajectory is centred on its mean.
pub fn make_motion_kernel(length_scale: f64, amplitude: f64, size: usize, seed: u64) -> Result<BlurKernel> {
    if size % 2 == 0 {
        return Err(Error::invalid("kernel size must be odd"));
    }
    if !(length_scale > 0.0) || amplitude < 0.0 {
        return Err(Error::invalid("length scale must be positive and amplitude nonnegative"));
    }
    let n = TRAJECTORY_KNOTS;
    let knots: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
    let var = amplitude * amplitude;
    let mut cov = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let d = knots[i] - knots[j];
            cov[i * n + j] = var * (-d * d / (2.0 * length_scale * length_scale)).exp();
        }
        cov[i * n + i] += 1e-6 * var.max(f64::MIN_POSITIVE);
    }
    let chol = cholesky_psd(&cov, n);
    let mut rng = rng_from_seed(seed);
    let mut path = [vec![0.0; n], vec![0.0; n]];
    for axis in &mut path {
        let z: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        for i in 0..n {
            axis[i] = (0..=i).map(|j| chol[i * n + j] * z[j]).sum();
        }
    }
    let scale = (size as f64 - 1.0) / 4.0;
    let half = (size as f64 - 1.0) / 2.0;
    let sample = |axis: &[f64], t: f64| -> f64 {
        let pos = t * (n - 1) as f64;
        let i = (pos.floor() as usize).min(n - 2);
        let frac = pos - i as f64;
        axis[i] * (1.0 - frac) + axis[i + 1] * frac
    };
    let pts: Vec<(f64, f64)> = (0..TRAJECTORY_SAMPLES)
        .map(|i| {
            let t = i as f64 / (TRAJECTORY_SAMPLES - 1) as f64;
            (sample(&path[0], t) * scale, sample(&path[1], t) * scale)
        })
        .collect();
    let mean_x = pts.iter().map(|p| p.0).sum::<f64>() / pts.len() as f64;
    let mean_y = pts.iter().map(|p| p.1).sum::<f64>() / pts.len() as f64;
    let mut data = vec![0.0; size * size];
    for (px, py) in pts {
        let x = (px - mean_x + half).clamp(0.0, size as f64 - 1.0);
        let y = (py - mean_y + half).clamp(0.0, size as f64 - 1.0);
        let (x0, y0) = (x.floor() as usize, y.floor() as usize);
        let (fx, fy) = (x - x0 as f64, y - y0 as f64);
        let x1 = (x0 + 1).min(size - 1);
        let y1 = (y0 + 1).min(size - 1);
        data[y0 * size + x0] += (1.0 - fx) * (1.0 - fy);
        data[y0 * size + x1] += fx * (1.0 - fy);
        data[y1 * size + x0] += (1.0 - fx) * fy;
        data[y1 * size + x1] += fx * fy;
    }
    BlurKernel::new(size, data)
}

/// Lower Cholesky factor of a symmetric PSD matrix; nonpositive pivots are
/// treated as zero (rank-deficient directions).
fn cholesky_psd(a: &[f64], n: usize) -> Vec<f64> {
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= l[j * n + k] * l[j * n + k];
        }
        let ljj = if d > 0.0 { d.sqrt() } else { 0.0 };
        l[j * n + j] = ljj;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = if ljj > 0.0 { s / ljj } else { 0.0 };
        }
    }
    l
}

/// Per-channel valid cross-correlation with a blur kernel (no padding).
#[derive(Debug)]
pub struct BlurOperator {
    kernel: Arc<BlurKernel>,
    shape: [usize; 3],
}

impl BlurOperator {
    pub fn kernel(&self) -> &BlurKernel {
        &self.kernel
    }
}

pub fn make_blur(kernel: &BlurKernel, image_shape: &[usize]) -> Result<OperatorHandle> {
    validate_image_shape(image_shape)?;
    let k = kernel.size();
    if k > 1 && (k >= image_shape[1] || k >= image_shape[2]) {
        return Err(Error::invalid(format!(
            "kernel of size {k} does not fit image {image_shape:?}"
        )));
    }
    Ok(OperatorHandle::new(BlurOperator {
        kernel: Arc::new(kernel.clone()),
        shape: [image_shape[0], image_shape[1], image_shape[2]],
    }))
}

impl LinearOperator for BlurOperator {
    fn kind(&self) -> &'static str {
        "blur"
    }
    fn domain_shape(&self) -> Vec<usize> {
        self.shape.to_vec()
    }
    fn range_shape(&self) -> Vec<usize> {
        let k = self.kernel.size();
        vec![self.shape[0], self.shape[1] - k + 1, self.shape[2] - k + 1]
    }
    fn apply(&self, x: &[f64], out: &mut [f64]) {
        let [c, h, w] = self.shape;
        let k = self.kernel.size();
        let (ho, wo) = (h - k + 1, w - k + 1);
        let kd = self.kernel.data();
        for ch in 0..c {
            let src = &x[ch * h * w..(ch + 1) * h * w];
            let dst = &mut out[ch * ho * wo..(ch + 1) * ho * wo];
            for a in 0..k {
                for b in 0..k {
                    let kv = kd[a * k + b];
                    if kv == 0.0 {
                        continue;
                    }
                    for y in 0..ho {
                        let s = &src[(y + a) * w + b..(y + a) * w + b + wo];
                        let d = &mut dst[y * wo..(y + 1) * wo];
                        for (dv, sv) in d.iter_mut().zip(s) {
                            *dv += kv * sv;
                        }
                    }
                }
            }
        }
    }
    fn adjoint(&self, yv: &[f64], out: &mut [f64]) {
        let [c, h, w] = self.shape;
        let k = self.kernel.size();
        let (ho, wo) = (h - k + 1, w - k + 1);
        let kd = self.kernel.data();
        for ch in 0..c {
            let src = &yv[ch * ho * wo..(ch + 1) * ho * wo];
            let dst = &mut out[ch * h * w..(ch + 1) * h * w];
            for a in 0..k {
                for b in 0..k {
                    let kv = kd[a * k + b];
                    if kv == 0.0 {
                        continue;
                    }
                    for y in 0..ho {
                        let s = &src[y * wo..(y + 1) * wo];
                        let d = &mut dst[(y + a) * w + b..(y + a) * w + b + wo];
                        for (dv, sv) in d.iter_mut().zip(s) {
                            *dv += kv * sv;
                        }
                    }
                }
            }
        }
    }
    fn coarse_fast_path(&self, factor: usize) -> Option<Result<(OperatorHandle, OperatorHandle)>> {
        let [c, h, w] = self.shape;
        if h % factor != 0 || w % factor != 0 {
            return None;
        }
        let coarse_kernel = match self.kernel.downscaled(factor) {
            Ok(k) => k,
            Err(e) => return Some(Err(e)),
        };
        let (hc, wc) = (h / factor, w / factor);
        let ks = coarse_kernel.size();
        if ks > 1 && (ks >= hc || ks >= wc) {
            return None;
        }
        Some((|| {
            let coarse = make_blur(&coarse_kernel, &[c, hc, wc])?;
            let k = self.kernel.size();
            let rows = valid_grid_restriction(h - k + 1, k, hc - ks + 1, ks, factor);
            let cols = valid_grid_restriction(w - k + 1, k, wc - ks + 1, ks, factor);
            let restrict = OperatorHandle::new(Separable::new(c, rows, cols)?);
            Ok((coarse, restrict))
        })())
    }
}

/// Averages fine valid-blur outputs over the image block that each coarse
/// valid output sits on.
fn valid_grid_restriction(fine_len: usize, k: usize, coarse_len: usize, ks: usize, factor: usize) -> Resample1d {
    let off_fine = (k - 1) / 2;
    let off_coarse = (ks - 1) / 2;
    let rows = (0..coarse_len)
        .map(|j| {
            let p = j + off_coarse;
            let lo = (p * factor) as isize - off_fine as isize;
            let hi = ((p + 1) * factor) as isize - off_fine as isize;
            let idx: Vec<usize> = (lo.max(0)..hi.min(fine_len as isize)).map(|i| i as usize).collect();
            let wgt = 1.0 / idx.len().max(1) as f64;
            idx.into_iter().map(|i| (i, wgt)).collect()
        })
        .collect();
    Resample1d::from_rows(fine_len, rows)
}
