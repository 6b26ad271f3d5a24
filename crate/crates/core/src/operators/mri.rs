//! Cartesian MRI: masked orthonormal Fourier sampling, single and multi-coil.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::seq::index::sample;

use super::fft::{split_complex, to_complex, Fft2, C64};
use super::{LinearOperator, OperatorHandle};
use crate::error::{Error, Result};
use crate::rng::rng_from_seed;
use crate::tensor::Tensor;

/// Fraction of k-space columns around DC that are always sampled.
pub const CENTER_FRACTION: f64 = 0.08;

/// Binary `(H, W)` column mask with `W / acceleration` lines: the central
/// block plus uniformly random lines, laid out in unshifted FFT order.
pub fn cartesian_mask(acceleration: usize, height: usize, width: usize, seed: u64) -> Result<Tensor> {
    if acceleration == 0 || height == 0 || width == 0 {
        return Err(Error::invalid("acceleration and extents must be positive"));
    }
    let target = (width as f64 / acceleration as f64).round().max(1.0) as usize;
    let center = ((width as f64 * CENTER_FRACTION).round() as usize).clamp(1, target);
    let lo = width / 2 - center / 2;
    // centred coordinates: DC sits at width / 2
    let mut lines = vec![false; width];
    lines[lo..lo + center].iter_mut().for_each(|v| *v = true);
    let rest: Vec<usize> = (0..width).filter(|&i| !lines[i]).collect();
    let mut rng = rng_from_seed(seed);
    for k in sample(&mut rng, rest.len(), target - center) {
        lines[rest[k]] = true;
    }
    // ifftshift: centred index i goes to (i - width / 2) mod width
    let mut data = vec![0.0; height * width];
    for (i, &on) in lines.iter().enumerate() {
        if on {
            let col = (i + width - width / 2) % width;
            for r in 0..height {
                data[r * width + col] = 1.0;
            }
        }
    }
    Tensor::new(vec![height, width], data)
}

fn check_mask(mask: &Tensor, h: usize, w: usize) -> Result<Vec<f64>> {
    if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::invalid("MRI mask must be binary"));
    }
    match mask.numel() {
        n if n == h * w => Ok(mask.data().to_vec()),
        n if n == w => Ok((0..h * w).map(|i| mask.data()[i % w]).collect()),
        n => Err(Error::ShapeMismatch {
            expected: vec![h, w],
            actual: vec![n],
        }),
    }
}

fn complex_image_dims(shape: &[usize]) -> Result<(usize, usize)> {
    super::validate_image_shape(shape)?;
    if shape[0] != 2 {
        return Err(Error::UnsupportedChannels(shape[0]));
    }
    Ok((shape[1], shape[2]))
}

/// `y = diag(m) F x` on a `(2, H, W)` real/imaginary image.
#[derive(Debug)]
pub struct MriOperator {
    mask: Arc<Vec<f64>>,
    fft: Fft2,
}

impl MriOperator {
    pub fn mask(&self) -> &[f64] {
        &self.mask
    }
}

pub fn make_mri(mask: &Tensor, image_shape: &[usize]) -> Result<OperatorHandle> {
    let (h, w) = complex_image_dims(image_shape)?;
    Ok(OperatorHandle::new(MriOperator {
        mask: Arc::new(check_mask(mask, h, w)?),
        fft: Fft2::new(h, w),
    }))
}

impl LinearOperator for MriOperator {
    fn kind(&self) -> &'static str {
        "mri"
    }
    fn domain_shape(&self) -> Vec<usize> {
        vec![2, self.fft.height(), self.fft.width()]
    }
    fn range_shape(&self) -> Vec<usize> {
        self.domain_shape()
    }
    fn apply(&self, x: &[f64], out: &mut [f64]) {
        let plane = self.mask.len();
        let mut buf = to_complex(&x[..plane], &x[plane..]);
        self.fft.process(&mut buf, false);
        buf.iter_mut().zip(self.mask.iter()).for_each(|(v, &m)| *v *= m);
        let (re, im) = out.split_at_mut(plane);
        split_complex(&buf, re, im);
    }
    fn adjoint(&self, y: &[f64], out: &mut [f64]) {
        let plane = self.mask.len();
        let mut buf = to_complex(&y[..plane], &y[plane..]);
        buf.iter_mut().zip(self.mask.iter()).for_each(|(v, &m)| *v *= m);
        self.fft.process(&mut buf, true);
        let (re, im) = out.split_at_mut(plane);
        split_complex(&buf, re, im);
    }
}

/// Stacked coil measurements `y_l = diag(m) F diag(s_l) x`, range `(2L, H, W)`.
#[derive(Debug)]
pub struct MultiCoilMri {
    mask: Arc<Vec<f64>>,
    maps: Arc<Vec<Vec<C64>>>,
    fft: Fft2,
}

impl MultiCoilMri {
    pub fn num_coils(&self) -> usize {
        self.maps.len()
    }
}

/// `smaps` are `(2, H, W)` complex maps; they must satisfy
/// `sum_l |s_l|^2 == 1` at every pixel.
pub fn make_multicoil_mri(mask: &Tensor, smaps: &[Tensor], image_shape: &[usize]) -> Result<OperatorHandle> {
    let (h, w) = complex_image_dims(image_shape)?;
    if smaps.is_empty() {
        return Err(Error::invalid("at least one sensitivity map required"));
    }
    let plane = h * w;
    let mut maps = Vec::with_capacity(smaps.len());
    for s in smaps {
        if s.numel() != 2 * plane {
            return Err(Error::ShapeMismatch {
                expected: vec![2, h, w],
                actual: s.shape().to_vec(),
            });
        }
        maps.push(to_complex(&s.data()[..plane], &s.data()[plane..]));
    }
    for p in 0..plane {
        let total: f64 = maps.iter().map(|m| m[p].norm_sqr()).sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::invalid(format!(
                "sensitivity maps not normalized at pixel {p}: sum |s|^2 = {total}"
            )));
        }
    }
    Ok(OperatorHandle::new(MultiCoilMri {
        mask: Arc::new(check_mask(mask, h, w)?),
        maps: Arc::new(maps),
        fft: Fft2::new(h, w),
    }))
}

impl LinearOperator for MultiCoilMri {
    fn kind(&self) -> &'static str {
        "multicoil_mri"
    }
    fn domain_shape(&self) -> Vec<usize> {
        vec![2, self.fft.height(), self.fft.width()]
    }
    fn range_shape(&self) -> Vec<usize> {
        vec![2 * self.maps.len(), self.fft.height(), self.fft.width()]
    }
    fn apply(&self, x: &[f64], out: &mut [f64]) {
        let plane = self.mask.len();
        let img = to_complex(&x[..plane], &x[plane..]);
        for (l, map) in self.maps.iter().enumerate() {
            let mut buf: Vec<C64> = img.iter().zip(map).map(|(a, s)| a * s).collect();
            self.fft.process(&mut buf, false);
            buf.iter_mut().zip(self.mask.iter()).for_each(|(v, &m)| *v *= m);
            let (re, im) = out[2 * l * plane..2 * (l + 1) * plane].split_at_mut(plane);
            split_complex(&buf, re, im);
        }
    }
    fn adjoint(&self, y: &[f64], out: &mut [f64]) {
        let plane = self.mask.len();
        let mut acc = vec![C64::new(0.0, 0.0); plane];
        for (l, map) in self.maps.iter().enumerate() {
            let coil = &y[2 * l * plane..2 * (l + 1) * plane];
            let mut buf = to_complex(&coil[..plane], &coil[plane..]);
            buf.iter_mut().zip(self.mask.iter()).for_each(|(v, &m)| *v *= m);
            self.fft.process(&mut buf, true);
            for ((a, b), s) in acc.iter_mut().zip(&buf).zip(map) {
                *a += b * s.conj();
            }
        }
        let (re, im) = out.split_at_mut(plane);
        split_complex(&acc, re, im);
    }
}

/// `L` Gaussian bumps centred at equiangular points on a circle, each with
/// a smooth phase ramp, normalized so `sum_l |s_l|^2 == 1` pointwise.
pub fn gaussian_sensitivity_maps(coils: usize, height: usize, width: usize) -> Result<Vec<Tensor>> {
    if coils == 0 || height == 0 || width == 0 {
        return Err(Error::invalid("coil count and extents must be positive"));
    }
    let (cy, cx) = ((height as f64 - 1.0) / 2.0, (width as f64 - 1.0) / 2.0);
    let radius = 0.45 * height.min(width) as f64;
    let spread = 0.5 * height.max(width) as f64;
    let plane = height * width;
    let mut raw: Vec<Vec<C64>> = (0..coils)
        .map(|l| {
            let ang = 2.0 * PI * l as f64 / coils as f64;
            let (py, px) = (cy + radius * ang.sin(), cx + radius * ang.cos());
            (0..plane)
                .map(|p| {
                    let (y, x) = ((p / width) as f64, (p % width) as f64);
                    let d2 = (y - py).powi(2) + (x - px).powi(2);
                    let mag = (-d2 / (2.0 * spread * spread)).exp();
                    let phase = ang + PI * ((x - cx) * ang.cos() + (y - cy) * ang.sin()) / width as f64;
                    C64::from_polar(mag, phase)
                })
                .collect()
        })
        .collect();
    for p in 0..plane {
        let total: f64 = raw.iter().map(|m| m[p].norm_sqr()).sum::<f64>().sqrt();
        for m in raw.iter_mut() {
            m[p] /= total;
        }
    }
    raw.into_iter()
        .map(|m| {
            let mut data = vec![0.0; 2 * plane];
            let (re, im) = data.split_at_mut(plane);
            split_complex(&m, re, im);
            Tensor::new(vec![2, height, width], data)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operators::adjoint_mismatch;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = rng_from_seed(seed);
        (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    fn norm(v: &[f64]) -> f64 {
        v.iter().map(|a| a * a).sum::<f64>().sqrt()
    }

    #[test]
    fn full_mask_is_isometry() {
        let op = make_mri(&Tensor::ones(vec![8, 12]), &[2, 8, 12]).unwrap();
        let x = randn(op.domain_len(), 1);
        assert!((norm(&op.apply_slice(&x)) - norm(&x)).abs() < 1e-10 * norm(&x));
    }

    #[test]
    fn gram_is_projector() {
        let mask = cartesian_mask(4, 16, 16, 5).unwrap();
        let op = make_mri(&mask, &[2, 16, 16]).unwrap();
        let x = randn(op.domain_len(), 2);
        let g = op.gram_slice(&x);
        let gg = op.gram_slice(&g);
        for (a, b) in g.iter().zip(&gg) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn acceleration_four_keeps_quarter_of_lines() {
        for seed in 0..5 {
            let mask = cartesian_mask(4, 64, 128, seed).unwrap();
            let kept = (0..128).filter(|&c| mask.data()[c] == 1.0).count();
            assert!((kept as i64 - 32).abs() <= 1, "kept {kept}");
            // DC line always sampled
            assert_eq!(mask.data()[0], 1.0);
            // whole columns
            assert!((0..64 * 128).all(|i| mask.data()[i] == mask.data()[i % 128]));
        }
    }

    #[test]
    fn rejects_real_images() {
        assert!(make_mri(&Tensor::ones(vec![4, 4]), &[1, 4, 4]).is_err());
        assert!(make_mri(&Tensor::ones(vec![4, 4]), &[3, 4, 4]).is_err());
    }

    #[test]
    fn single_unit_coil_matches_single_coil() {
        let mask = cartesian_mask(4, 8, 8, 0).unwrap();
        let mut s = vec![0.0; 128];
        s[..64].iter_mut().for_each(|v| *v = 1.0);
        let maps = vec![Tensor::new(vec![2, 8, 8], s).unwrap()];
        let mc = make_multicoil_mri(&mask, &maps, &[2, 8, 8]).unwrap();
        let sc = make_mri(&mask, &[2, 8, 8]).unwrap();
        let x = randn(128, 3);
        assert_eq!(mc.apply_slice(&x), sc.apply_slice(&x));
    }

    #[test]
    fn multicoil_full_mask_gram_is_identity() {
        let maps = gaussian_sensitivity_maps(4, 12, 10).unwrap();
        let op = make_multicoil_mri(&Tensor::ones(vec![12, 10]), &maps, &[2, 12, 10]).unwrap();
        let x = randn(op.domain_len(), 4);
        for (a, b) in op.gram_slice(&x).iter().zip(&x) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn multicoil_adjoint() {
        let maps = gaussian_sensitivity_maps(4, 16, 16).unwrap();
        let mask = cartesian_mask(4, 16, 16, 9).unwrap();
        let op = make_multicoil_mri(&mask, &maps, &[2, 16, 16]).unwrap();
        for s in 0..10 {
            let x = randn(op.domain_len(), s);
            let y = randn(op.range_len(), s + 50);
            assert!(adjoint_mismatch(&op, &x, &y) < 1e-10);
        }
    }

    #[test]
    fn unnormalized_maps_rejected() {
        let maps = vec![Tensor::ones(vec![2, 4, 4])];
        assert!(make_multicoil_mri(&Tensor::ones(vec![4, 4]), &maps, &[2, 4, 4]).is_err());
    }
}
