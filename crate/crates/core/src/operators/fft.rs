//! Orthonormal 2-D discrete Fourier transforms on `(2, H, W)` complex images.
//!
//! Channel 0 holds the real part and channel 1 the imaginary part. Both
//! directions are scaled by `1/sqrt(H W)`, so the transform is unitary.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type C64 = Complex<f64>;

/// Planned 2-D transform for a fixed `H x W` grid.
#[derive(Clone)]
pub struct Fft2 {
    height: usize,
    width: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

impl fmt::Debug for Fft2 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Fft2({}x{})", self.height, self.width)
    }
}

impl Fft2 {
    pub fn new(height: usize, width: usize) -> Self {
        let mut planner = FftPlanner::new();
        Fft2 {
            height,
            width,
            row_fwd: planner.plan_fft_forward(width),
            row_inv: planner.plan_fft_inverse(width),
            col_fwd: planner.plan_fft_forward(height),
            col_inv: planner.plan_fft_inverse(height),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// In-place orthonormal transform of a row-major `H x W` buffer.
    pub fn process(&self, buf: &mut [C64], inverse: bool) {
        let (h, w) = (self.height, self.width);
        debug_assert_eq!(buf.len(), h * w);
        let (row, col) = if inverse {
            (&self.row_inv, &self.col_inv)
        } else {
            (&self.row_fwd, &self.col_fwd)
        };
        row.process(buf);
        let mut column = vec![C64::new(0.0, 0.0); h];
        for x in 0..w {
            for y in 0..h {
                column[y] = buf[y * w + x];
            }
            col.process(&mut column);
            for y in 0..h {
                buf[y * w + x] = column[y];
            }
        }
        let s = 1.0 / ((h * w) as f64).sqrt();
        buf.iter_mut().for_each(|v| *v *= s);
    }
}

pub(crate) fn to_complex(re: &[f64], im: &[f64]) -> Vec<C64> {
    re.iter().zip(im).map(|(&r, &i)| C64::new(r, i)).collect()
}

pub(crate) fn split_complex(buf: &[C64], re: &mut [f64], im: &mut [f64]) {
    for ((c, r), i) in buf.iter().zip(re.iter_mut()).zip(im.iter_mut()) {
        *r = c.re;
        *i = c.im;
    }
}

fn complex_dims(x: &Tensor) -> Result<(usize, usize)> {
    let (c, h, w) = x.image_dims()?;
    if c != 2 {
        return Err(Error::UnsupportedChannels(c));
    }
    Ok((h, w))
}

fn transform(x: &Tensor, inverse: bool) -> Result<Tensor> {
    let (h, w) = complex_dims(x)?;
    let plane = h * w;
    let mut buf = to_complex(&x.data()[..plane], &x.data()[plane..]);
    Fft2::new(h, w).process(&mut buf, inverse);
    let mut out = vec![0.0; 2 * plane];
    let (re, im) = out.split_at_mut(plane);
    split_complex(&buf, re, im);
    Tensor::new(vec![2, h, w], out)
}

/// Forward orthonormal DFT of a `(2, H, W)` complex image.
pub fn dft2(x: &Tensor) -> Result<Tensor> {
    transform(x, false)
}

/// Inverse orthonormal DFT of a `(2, H, W)` complex image.
pub fn idft2(x: &Tensor) -> Result<Tensor> {
    transform(x, true)
}

/// Direct evaluation of the separable DFT sums, `O(HW(H+W))`. Reference
/// path for checking the planned transform; works for any extents.
pub fn dft2_reference(x: &Tensor, inverse: bool) -> Result<Tensor> {
    let (h, w) = complex_dims(x)?;
    let plane = h * w;
    let input = to_complex(&x.data()[..plane], &x.data()[plane..]);
    let sign = if inverse { 1.0 } else { -1.0 };
    let dft_1d = |n: usize| -> Vec<C64> {
        (0..n * n)
            .map(|i| {
                let (k, j) = (i / n, i % n);
                let ang = sign * 2.0 * PI * ((k * j) % n) as f64 / n as f64;
                C64::new(ang.cos(), ang.sin())
            })
            .collect()
    };
    let fw = dft_1d(w);
    let fh = dft_1d(h);
    let mut rows = vec![C64::new(0.0, 0.0); plane];
    for y in 0..h {
        for k in 0..w {
            let mut acc = C64::new(0.0, 0.0);
            for j in 0..w {
                acc += fw[k * w + j] * input[y * w + j];
            }
            rows[y * w + k] = acc;
        }
    }
    let mut out = vec![C64::new(0.0, 0.0); plane];
    for x_ in 0..w {
        for k in 0..h {
            let mut acc = C64::new(0.0, 0.0);
            for j in 0..h {
                acc += fh[k * h + j] * rows[j * w + x_];
            }
            out[k * w + x_] = acc;
        }
    }
    let s = 1.0 / (plane as f64).sqrt();
    out.iter_mut().for_each(|v| *v *= s);
    let mut data = vec![0.0; 2 * plane];
    let (re, im) = data.split_at_mut(plane);
    split_complex(&out, re, im);
    Tensor::new(vec![2, h, w], data)
}
