//! Parallel-beam Radon transform, pixel-driven.
//!
//! Each pixel centre is projected onto the detector axis at every angle and
//! its value split linearly between the two nearest detector bins. Every
//! pixel therefore deposits its full mass at every angle, and the adjoint is
//! the literal transpose of the splatting.

use std::f64::consts::PI;

use super::{validate_image_shape, LinearOperator, OperatorHandle};
use crate::error::{Error, Result};

#[derive(Debug)]
pub struct Radon {
    channels: usize,
    size: usize,
    detectors: usize,
    angles: Vec<(f64, f64)>,
}

impl Radon {
    pub fn num_angles(&self) -> usize {
        self.angles.len()
    }

    pub fn num_detectors(&self) -> usize {
        self.detectors
    }

    /// Lower bin index and weight of the lower bin for pixel `(r, c)`.
    #[inline]
    fn bin(&self, cos: f64, sin: f64, r: usize, c: usize) -> (usize, f64) {
        let half = (self.size as f64 - 1.0) / 2.0;
        let x = c as f64 - half;
        let y = half - r as f64;
        let u = x * cos + y * sin + (self.detectors as f64 - 1.0) / 2.0;
        let lo = u.floor();
        let frac = u - lo;
        let lo = lo as usize;
        if lo + 1 >= self.detectors {
            (self.detectors - 2, 0.0)
        } else {
            (lo, 1.0 - frac)
        }
    }
}

/// Detector count `ceil(sqrt(2) H)` and `num_angles` angles uniform in `[0, pi)`.
pub fn make_ct_radon(num_angles: usize, image_shape: &[usize]) -> Result<OperatorHandle> {
    validate_image_shape(image_shape)?;
    if num_angles < 1 {
        return Err(Error::invalid("at least one projection angle required"));
    }
    let (c, h, w) = (image_shape[0], image_shape[1], image_shape[2]);
    if h != w {
        return Err(Error::invalid(format!("Radon transform needs a square image, got {h}x{w}")));
    }
    let detectors = ((2f64.sqrt() * h as f64).ceil() as usize).max(2);
    let angles = (0..num_angles)
        .map(|a| {
            let t = PI * a as f64 / num_angles as f64;
            (t.cos(), t.sin())
        })
        .collect();
    Ok(OperatorHandle::new(Radon {
        channels: c,
        size: h,
        detectors,
        angles,
    }))
}

impl LinearOperator for Radon {
    fn kind(&self) -> &'static str {
        "ct"
    }
    fn domain_shape(&self) -> Vec<usize> {
        vec![self.channels, self.size, self.size]
    }
    fn range_shape(&self) -> Vec<usize> {
        vec![self.channels, self.angles.len(), self.detectors]
    }
    fn apply(&self, x: &[f64], out: &mut [f64]) {
        let n = self.size;
        let d = self.detectors;
        for ch in 0..self.channels {
            let img = &x[ch * n * n..(ch + 1) * n * n];
            for (a, &(cos, sin)) in self.angles.iter().enumerate() {
                let row = &mut out[(ch * self.angles.len() + a) * d..(ch * self.angles.len() + a + 1) * d];
                for r in 0..n {
                    for c in 0..n {
                        let v = img[r * n + c];
                        let (lo, wt) = self.bin(cos, sin, r, c);
                        row[lo] += wt * v;
                        row[lo + 1] += (1.0 - wt) * v;
                    }
                }
            }
        }
    }
    fn adjoint(&self, y: &[f64], out: &mut [f64]) {
        let n = self.size;
        let d = self.detectors;
        for ch in 0..self.channels {
            let img = &mut out[ch * n * n..(ch + 1) * n * n];
            for (a, &(cos, sin)) in self.angles.iter().enumerate() {
                let row = &y[(ch * self.angles.len() + a) * d..(ch * self.angles.len() + a + 1) * d];
                for r in 0..n {
                    for c in 0..n {
                        let (lo, wt) = self.bin(cos, sin, r, c);
                        img[r * n + c] += wt * row[lo] + (1.0 - wt) * row[lo + 1];
                    }
                }
            }
        }
    }
}
