//! RGGB Bayer mosaic: one colour band kept per pixel.

use super::{validate_image_shape, LinearOperator, OperatorHandle};
use crate::error::{Error, Result};

#[derive(Debug)]
pub struct Demosaic {
    height: usize,
    width: usize,
}

impl Demosaic {
    /// Channel sampled at `(r, c)`: R on even/even, B on odd/odd, G elsewhere.
    pub fn band(r: usize, c: usize) -> usize {
        match (r % 2, c % 2) {
            (0, 0) => 0,
            (1, 1) => 2,
            _ => 1,
        }
    }
}

pub fn make_demosaic(image_shape: &[usize]) -> Result<OperatorHandle> {
    validate_image_shape(image_shape)?;
    if image_shape[0] != 3 {
        return Err(Error::UnsupportedChannels(image_shape[0]));
    }
    let (h, w) = (image_shape[1], image_shape[2]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::invalid(format!("Bayer pattern needs even extents, got {h}x{w}")));
    }
    Ok(OperatorHandle::new(Demosaic { height: h, width: w }))
}

impl LinearOperator for Demosaic {
    fn kind(&self) -> &'static str {
        "demosaic"
    }
    fn domain_shape(&self) -> Vec<usize> {
        vec![3, self.height, self.width]
    }
    fn range_shape(&self) -> Vec<usize> {
        vec![1, self.height, self.width]
    }
    fn apply(&self, x: &[f64], out: &mut [f64]) {
        let plane = self.height * self.width;
        for r in 0..self.height {
            for c in 0..self.width {
                let p = r * self.width + c;
                out[p] = x[Self::band(r, c) * plane + p];
            }
        }
    }
    fn adjoint(&self, y: &[f64], out: &mut [f64]) {
        let plane = self.height * self.width;
        for r in 0..self.height {
            for c in 0..self.width {
                let p = r * self.width + c;
                out[Self::band(r, c) * plane + p] = y[p];
            }
        }
    }
}
