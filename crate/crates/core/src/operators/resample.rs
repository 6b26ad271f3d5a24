//! Separable resampling: antialiased downsampling (super-resolution
//! forward models), Kaiser-windowed sinc upsampling, block averaging.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::{make_identity, validate_image_shape, LinearOperator, OperatorHandle};
use crate::autodiff::reflect_index;
use crate::error::{Error, Result};

/// Sparse `out_len x in_len` matrix stored by rows.
#[derive(Clone, Debug)]
pub struct Resample1d {
    in_len: usize,
    rows: Vec<Vec<(usize, f64)>>,
}

impl Resample1d {
    pub fn from_rows(in_len: usize, rows: Vec<Vec<(usize, f64)>>) -> Self {
        debug_assert!(rows.iter().flatten().all(|&(i, _)| i < in_len));
        Resample1d { in_len, rows }
    }

    pub fn in_len(&self) -> usize {
        self.in_len
    }

    pub fn out_len(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[Vec<(usize, f64)>] {
        &self.rows
    }

    /// Rows built from a continuous filter, folding out-of-range taps back
    /// with symmetric reflection and normalizing each row to sum one.
    fn from_filter(in_len: usize, out_len: usize, taps: impl Fn(usize) -> Vec<(isize, f64)>) -> Self {
        let rows = (0..out_len)
            .map(|j| {
                let mut acc: Vec<(usize, f64)> = Vec::new();
                for (i, w) in taps(j) {
                    let idx = reflect_index(i, in_len);
                    match acc.iter_mut().find(|(k, _)| *k == idx) {
                        Some(e) => e.1 += w,
                        None => acc.push((idx, w)),
                    }
                }
                let total: f64 = acc.iter().map(|e| e.1).sum();
                acc.retain(|e| e.1 != 0.0);
                acc.sort_by_key(|e| e.0);
                acc.into_iter().map(|(i, w)| (i, w / total)).collect()
            })
            .collect();
        Resample1d { in_len, rows }
    }
}

/// Applies a row resampler along the height axis and a column resampler
/// along the width axis of every channel.
#[derive(Clone, Debug)]
pub struct Separable {
    channels: usize,
    rows: Resample1d,
    cols: Resample1d,
    kind: &'static str,
}

impl Separable {
    pub fn new(channels: usize, rows: Resample1d, cols: Resample1d) -> Result<Self> {
        Self::with_kind(channels, rows, cols, "separable")
    }

    fn with_kind(channels: usize, rows: Resample1d, cols: Resample1d, kind: &'static str) -> Result<Self> {
        if channels == 0 || rows.out_len() == 0 || cols.out_len() == 0 {
            return Err(Error::invalid("empty resampler"));
        }
        Ok(Separable {
            channels,
            rows,
            cols,
            kind,
        })
    }
}

impl LinearOperator for Separable {
    fn kind(&self) -> &'static str {
        self.kind
    }
    fn domain_shape(&self) -> Vec<usize> {
        vec![self.channels, self.rows.in_len(), self.cols.in_len()]
    }
    fn range_shape(&self) -> Vec<usize> {
        vec![self.channels, self.rows.out_len(), self.cols.out_len()]
    }
    fn apply(&self, x: &[f64], out: &mut [f64]) {
        let (h, w) = (self.rows.in_len(), self.cols.in_len());
        let (ho, wo) = (self.rows.out_len(), self.cols.out_len());
        let mut tmp = vec![0.0; h * wo];
        for c in 0..self.channels {
            let src = &x[c * h * w..(c + 1) * h * w];
            for y in 0..h {
                let row = &src[y * w..(y + 1) * w];
                for (j, taps) in self.cols.rows().iter().enumerate() {
                    tmp[y * wo + j] = taps.iter().map(|&(i, wt)| wt * row[i]).sum();
                }
            }
            let dst = &mut out[c * ho * wo..(c + 1) * ho * wo];
            for (i, taps) in self.rows.rows().iter().enumerate() {
                let d = &mut dst[i * wo..(i + 1) * wo];
                for &(k, wt) in taps {
                    for (dv, tv) in d.iter_mut().zip(&tmp[k * wo..(k + 1) * wo]) {
                        *dv += wt * tv;
                    }
                }
            }
        }
    }
    fn adjoint(&self, yv: &[f64], out: &mut [f64]) {
        let (h, w) = (self.rows.in_len(), self.cols.in_len());
        let (ho, wo) = (self.rows.out_len(), self.cols.out_len());
        let mut tmp = vec![0.0; h * wo];
        for c in 0..self.channels {
            tmp.iter_mut().for_each(|v| *v = 0.0);
            let src = &yv[c * ho * wo..(c + 1) * ho * wo];
            for (i, taps) in self.rows.rows().iter().enumerate() {
                let s = &src[i * wo..(i + 1) * wo];
                for &(k, wt) in taps {
                    for (tv, sv) in tmp[k * wo..(k + 1) * wo].iter_mut().zip(s) {
                        *tv += wt * sv;
                    }
                }
            }
            let dst = &mut out[c * h * w..(c + 1) * h * w];
            for y in 0..h {
                let row = &mut dst[y * w..(y + 1) * w];
                for (j, taps) in self.cols.rows().iter().enumerate() {
                    let v = tmp[y * wo + j];
                    for &(i, wt) in taps {
                        row[i] += wt * v;
                    }
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DownsampleFilter {
    Bicubic,
    Bilinear,
}

impl DownsampleFilter {
    fn support(self) -> f64 {
        match self {
            DownsampleFilter::Bicubic => 2.0,
            DownsampleFilter::Bilinear => 1.0,
        }
    }

    fn weight(self, t: f64) -> f64 {
        let t = t.abs();
        match self {
            DownsampleFilter::Bilinear => (1.0 - t).max(0.0),
            DownsampleFilter::Bicubic => {
                const A: f64 = -0.5;
                if t <= 1.0 {
                    ((A + 2.0) * t - (A + 3.0)) * t * t + 1.0
                } else if t < 2.0 {
                    ((A * t - 5.0 * A) * t + 8.0 * A) * t - 4.0 * A
                } else {
                    0.0
                }
            }
        }
    }
}

fn antialias_rows(in_len: usize, factor: usize, filter: DownsampleFilter) -> Resample1d {
    let f = factor as f64;
    let reach = filter.support() * f;
    Resample1d::from_filter(in_len, in_len / factor, |j| {
        let center = (j as f64 + 0.5) * f - 0.5;
        let lo = (center - reach).floor() as isize;
        let hi = (center + reach).ceil() as isize;
        (lo..=hi)
            .map(|i| (i, filter.weight((i as f64 - center) / f)))
            .filter(|&(_, w)| w != 0.0)
            .collect()
    })
}

/// Antialiased decimation by `factor` (2 or 4): the filter is stretched by
/// the factor, normalized to a partition of unity, then sampled at the
/// centres of the coarse pixels.
pub fn make_downsampling(factor: usize, filter: DownsampleFilter, image_shape: &[usize]) -> Result<OperatorHandle> {
    validate_image_shape(image_shape)?;
    if factor != 2 && factor != 4 {
        return Err(Error::invalid(format!("downsampling factor {factor} not in {{2, 4}}")));
    }
    let (c, h, w) = (image_shape[0], image_shape[1], image_shape[2]);
    if h % factor != 0 || w % factor != 0 {
        return Err(Error::invalid(format!(
            "extents {h}x{w} not divisible by {factor}"
        )));
    }
    Ok(OperatorHandle::new(Separable::with_kind(
        c,
        antialias_rows(h, factor, filter),
        antialias_rows(w, factor, filter),
        "downsampling",
    )?))
}

pub const KAISER_BETA: f64 = 8.0;
pub const TAPS_PER_PHASE: usize = 8;

fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..200 {
        term *= q / (k as f64 * k as f64);
        sum += term;
        if term < 1e-17 * sum {
            break;
        }
    }
    sum
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        let px = PI * x;
        px.sin() / px
    }
}

/// Interpolation rows of the Kaiser-windowed sinc upsampler by `factor`:
/// 8 coarse taps per output phase, window `beta = 8`, rows normalized to
/// one so constants are preserved exactly.
pub fn kaiser_sinc_rows(coarse_len: usize, factor: usize) -> Resample1d {
    let f = factor as f64;
    let half = TAPS_PER_PHASE as f64 / 2.0;
    let norm = bessel_i0(KAISER_BETA);
    Resample1d::from_filter(coarse_len, coarse_len * factor, |i| {
        let t = (i as f64 + 0.5) / f - 0.5;
        let j0 = t.floor() as isize;
        (j0 - (TAPS_PER_PHASE as isize / 2 - 1)..=j0 + TAPS_PER_PHASE as isize / 2)
            .filter_map(|j| {
                let d = t - j as f64;
                let u = d / half;
                if u.abs() >= 1.0 {
                    return None;
                }
                let window = bessel_i0(KAISER_BETA * (1.0 - u * u).sqrt()) / norm;
                Some((j, sinc(d) * window))
            })
            .collect()
    })
}

/// `U_s`: upsampling by `2^scale` from the coarse grid of `fine_shape`.
pub fn make_upsampler(scale: usize, fine_shape: &[usize]) -> Result<OperatorHandle> {
    validate_image_shape(fine_shape)?;
    let f = 1usize << scale;
    let (c, h, w) = (fine_shape[0], fine_shape[1], fine_shape[2]);
    if h % f != 0 || w % f != 0 {
        return Err(Error::invalid(format!("extents {h}x{w} not divisible by {f}")));
    }
    if scale == 0 {
        return make_identity(fine_shape);
    }
    Ok(OperatorHandle::new(Separable::with_kind(
        c,
        kaiser_sinc_rows(h / f, f),
        kaiser_sinc_rows(w / f, f),
        "upsampler",
    )?))
}

/// Mean over non-overlapping `factor x factor` blocks.
pub(crate) fn block_average(c: usize, h: usize, w: usize, factor: usize) -> Result<OperatorHandle> {
    let rows = |n: usize| {
        Resample1d::from_rows(
            n,
            (0..n / factor)
                .map(|j| (j * factor..(j + 1) * factor).map(|i| (i, 1.0 / factor as f64)).collect())
                .collect(),
        )
    };
    Ok(OperatorHandle::new(Separable::with_kind(c, rows(h), rows(w), "block_average")?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operators::adjoint_mismatch;
    use crate::rng::rng_from_seed;
    use crate::tensor::Tensor;
    use rand::Rng;

    fn rand_vec(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = rng_from_seed(seed);
        (0..n).map(|_| rng.random::<f64>() - 0.5).collect()
    }

    #[test]
    fn downsampling_preserves_constants() {
        for filter in [DownsampleFilter::Bicubic, DownsampleFilter::Bilinear] {
            for factor in [2, 4] {
                let op = make_downsampling(factor, filter, &[3, 16, 24]).unwrap();
                let y = op.apply(&Tensor::full(vec![3, 16, 24], 0.3)).unwrap();
                assert!(y.data().iter().all(|&v| (v - 0.3).abs() < 1e-12));
            }
        }
    }

    #[test]
    fn downsampling_rejects_indivisible() {
        assert!(make_downsampling(4, DownsampleFilter::Bicubic, &[1, 10, 12]).is_err());
        assert!(make_downsampling(3, DownsampleFilter::Bicubic, &[1, 12, 12]).is_err());
    }

    #[test]
    fn two_halvings_match_quartering_on_smooth_images() {
        let n = 128;
        let img = Tensor::from_fn(vec![1, n, n], |i| {
            let (y, x) = ((i / n) as f64 - 60.0, (i % n) as f64 - 70.0);
            (-(x * x + y * y) / (2.0 * 32.0 * 32.0)).exp()
        });
        for filter in [DownsampleFilter::Bicubic, DownsampleFilter::Bilinear] {
            let d2 = make_downsampling(2, filter, &[1, n, n]).unwrap();
            let d2b = make_downsampling(2, filter, &[1, n / 2, n / 2]).unwrap();
            let d4 = make_downsampling(4, filter, &[1, n, n]).unwrap();
            let twice = d2b.apply(&d2.apply(&img).unwrap()).unwrap();
            let once = d4.apply(&img).unwrap();
            // reflection at the border differs between the two chains
            let m = n / 4;
            let mut err: f64 = 0.0;
            for r in 3..m - 3 {
                for c in 3..m - 3 {
                    err = err.max((twice.data()[r * m + c] - once.data()[r * m + c]).abs());
                }
            }
            assert!(err < 1e-3, "{filter:?}: {err}");
        }
    }

    #[test]
    fn downsampling_adjoint() {
        let op = make_downsampling(2, DownsampleFilter::Bicubic, &[2, 12, 8]).unwrap();
        for s in 0..5 {
            let x = rand_vec(op.domain_len(), s);
            let y = rand_vec(op.range_len(), s + 100);
            assert!(adjoint_mismatch(&op, &x, &y) < 1e-12);
        }
    }

    #[test]
    fn upsampler_preserves_dc() {
        for s in 1..=3 {
            let op = make_upsampler(s, &[2, 32, 16]).unwrap();
            let coarse = Tensor::full(op.domain_shape(), 1.7);
            let fine = op.apply(&coarse).unwrap();
            assert_eq!(fine.shape(), &[2, 32, 16]);
            assert!(fine.data().iter().all(|&v| (v - 1.7).abs() < 1e-6));
        }
    }

    #[test]
    fn upsampler_interpolates_low_frequencies() {
        // ideal resampling oracle: the continuous sinusoid evaluated at the
        // fine pixel centres
        let (n, scale) = (32usize, 2usize);
        let f = 1 << scale;
        let freq = 0.05; // cycles per coarse pixel, well below Nyquist
        let op = make_upsampler(scale, &[1, f, n * f]).unwrap();
        let coarse: Vec<f64> = (0..n).map(|j| (2.0 * PI * freq * j as f64).cos()).collect();
        let fine = op.apply_slice(&coarse);
        let fine = &fine[..n * f];
        let mut err: f64 = 0.0;
        for (i, v) in fine.iter().enumerate().skip(6 * f).take((n - 12) * f) {
            let t = (i as f64 + 0.5) / f as f64 - 0.5;
            err = err.max((v - (2.0 * PI * freq * t).cos()).abs());
        }
        assert!(err < 1e-2, "max error {err}");
    }

    #[test]
    fn upsampler_adjoint() {
        let op = make_upsampler(2, &[1, 16, 32]).unwrap();
        for s in 0..5 {
            let x = rand_vec(op.domain_len(), s);
            let y = rand_vec(op.range_len(), s + 7);
            assert!(adjoint_mismatch(&op, &x, &y) < 1e-12);
        }
    }
}
