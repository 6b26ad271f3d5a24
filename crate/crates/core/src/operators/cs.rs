//! Compressed sensing: random sign flips, orthonormal 2-D DST-II per
//! channel, then a subset of coefficients.

use std::collections::HashSet;
use std::sync::Arc;

use rand::seq::index::sample;
use rand::Rng as _;

use super::dst::{dst2_matrix, dst2_plane};
use super::{validate_image_shape, LinearOperator, OperatorHandle};
use crate::error::{Error, Result};
use crate::rng::rng_from_seed;
use crate::tensor::Tensor;

#[derive(Debug)]
pub struct CompressedSensing {
    shape: [usize; 3],
    signs: Arc<Vec<f64>>,
    keep: Arc<Vec<usize>>,
    sh: Vec<f64>,
    sw: Vec<f64>,
}

impl CompressedSensing {
    pub fn keep_indices(&self) -> &[usize] {
        &self.keep
    }
}

/// `keep` indexes the flat `C x H x W` coefficient array.
pub fn make_compressed_sensing(sign_mask: &Tensor, keep: &[usize], image_shape: &[usize]) -> Result<OperatorHandle> {
    validate_image_shape(image_shape)?;
    let n: usize = image_shape.iter().product();
    if sign_mask.numel() != n {
        return Err(Error::ShapeMismatch {
            expected: image_shape.to_vec(),
            actual: sign_mask.shape().to_vec(),
        });
    }
    if sign_mask.data().iter().any(|&v| v != 1.0 && v != -1.0) {
        return Err(Error::invalid("sign mask entries must be +1 or -1"));
    }
    if keep.is_empty() {
        return Err(Error::invalid("no coefficients kept"));
    }
    let mut seen = HashSet::with_capacity(keep.len());
    for &k in keep {
        if k >= n {
            return Err(Error::invalid(format!("coefficient index {k} out of range {n}")));
        }
        if !seen.insert(k) {
            return Err(Error::invalid(format!("duplicate coefficient index {k}")));
        }
    }
    Ok(OperatorHandle::new(CompressedSensing {
        shape: [image_shape[0], image_shape[1], image_shape[2]],
        signs: Arc::new(sign_mask.data().to_vec()),
        keep: Arc::new(keep.to_vec()),
        sh: dst2_matrix(image_shape[1]),
        sw: dst2_matrix(image_shape[2]),
    }))
}

/// Random signs and `n / factor` sorted random coefficients.
pub fn random_compressed_sensing(image_shape: &[usize], factor: usize, seed: u64) -> Result<OperatorHandle> {
    validate_image_shape(image_shape)?;
    if factor == 0 {
        return Err(Error::invalid("subsampling factor must be positive"));
    }
    let n: usize = image_shape.iter().product();
    let m = (n / factor).max(1);
    let mut rng = rng_from_seed(seed);
    let signs = Tensor::from_fn(image_shape.to_vec(), |_| if rng.random::<bool>() { 1.0 } else { -1.0 });
    let mut keep = sample(&mut rng, n, m).into_vec();
    keep.sort_unstable();
    make_compressed_sensing(&signs, &keep, image_shape)
}

impl LinearOperator for CompressedSensing {
    fn kind(&self) -> &'static str {
        "compressed_sensing"
    }
    fn domain_shape(&self) -> Vec<usize> {
        self.shape.to_vec()
    }
    fn range_shape(&self) -> Vec<usize> {
        vec![self.keep.len()]
    }
    fn apply(&self, x: &[f64], out: &mut [f64]) {
        let [c, h, w] = self.shape;
        let plane = h * w;
        let mut coeffs = Vec::with_capacity(c * plane);
        for ch in 0..c {
            let signed: Vec<f64> = (0..plane).map(|i| x[ch * plane + i] * self.signs[ch * plane + i]).collect();
            coeffs.extend(dst2_plane(&signed, h, w, &self.sh, &self.sw, false));
        }
        for (o, &k) in out.iter_mut().zip(self.keep.iter()) {
            *o = coeffs[k];
        }
    }
    fn adjoint(&self, y: &[f64], out: &mut [f64]) {
        let [c, h, w] = self.shape;
        let plane = h * w;
        let mut coeffs = vec![0.0; c * plane];
        for (&v, &k) in y.iter().zip(self.keep.iter()) {
            coeffs[k] = v;
        }
        for ch in 0..c {
            let img = dst2_plane(&coeffs[ch * plane..(ch + 1) * plane], h, w, &self.sh, &self.sw, true);
            for (i, v) in img.into_iter().enumerate() {
                out[ch * plane + i] = v * self.signs[ch * plane + i];
            }
        }
    }
}
