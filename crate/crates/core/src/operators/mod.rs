//! Linear forward operators with exact adjoints.
//!
//! Every operator implements [`LinearOperator`] on flat row-major buffers
//! and is shared through a cheaply cloneable [`OperatorHandle`]. Adjoints
//! are the transposes of the discretized forward maps, so the dot-product
//! identity `<Ax, y> = <x, A^T y>` holds to rounding error.

mod blur;
mod coarse;
mod cs;
mod demosaic;
pub mod dst;
pub mod fft;
mod mri;
mod radon;
mod resample;
mod spec;

use std::fmt;
use std::sync::{Arc, OnceLock};

use rand::Rng as _;

pub use blur::{make_blur, make_gaussian_kernel, make_motion_kernel, BlurKernel, BlurOperator};
pub use coarse::{make_coarse, make_coarse_on_grid, make_coarse_with_upsampler, CoarseOperator, CoarsePath};
pub use cs::{make_compressed_sensing, random_compressed_sensing, CompressedSensing};
pub use demosaic::{make_demosaic, Demosaic};
pub use mri::{
    cartesian_mask, gaussian_sensitivity_maps, make_mri, make_multicoil_mri, MriOperator, MultiCoilMri,
};
pub use radon::{make_ct_radon, Radon};
pub use resample::{
    make_downsampling, make_upsampler, kaiser_sinc_rows, DownsampleFilter, Resample1d, Separable,
};
pub use spec::{KernelSpec, OperatorSpec, TensorRef};

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;
use crate::tensor::{dot, norm2, squeeze_leading, Tensor};

/// A linear map between flat buffers.
///
/// `apply` and `adjoint` receive an output buffer that is already
/// zero-filled and sized to the range (domain).
pub trait LinearOperator: Send + Sync + fmt::Debug {
    fn kind(&self) -> &'static str;
    /// `(C, H, W)` of the image domain.
    fn domain_shape(&self) -> Vec<usize>;
    fn range_shape(&self) -> Vec<usize>;
    fn apply(&self, x: &[f64], out: &mut [f64]);
    fn adjoint(&self, y: &[f64], out: &mut [f64]);

    /// Operator acting wholly on the grid downscaled by `factor`, together
    /// with the map taking fine measurements to that operator's range.
    fn coarse_fast_path(&self, _factor: usize) -> Option<Result<(OperatorHandle, OperatorHandle)>> {
        None
    }
}

/// Shared handle with a lazily cached spectral-norm estimate.
#[derive(Clone)]
pub struct OperatorHandle {
    inner: Arc<dyn LinearOperator>,
    norm: Arc<OnceLock<f64>>,
}

impl fmt::Debug for OperatorHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "OperatorHandle({}, {:?} -> {:?})",
            self.kind(),
            self.domain_shape(),
            self.range_shape()
        )
    }
}

pub const DEFAULT_NORM_ITERS: usize = 200;
pub const DEFAULT_NORM_TOL: f64 = 1e-9;
const NORM_SEED: u64 = 0x5eed;

impl OperatorHandle {
    pub fn new(op: impl LinearOperator + 'static) -> Self {
        OperatorHandle {
            inner: Arc::new(op),
            norm: Arc::new(OnceLock::new()),
        }
    }

    pub fn kind(&self) -> &'static str {
        self.inner.kind()
    }

    pub fn domain_shape(&self) -> Vec<usize> {
        self.inner.domain_shape()
    }

    pub fn range_shape(&self) -> Vec<usize> {
        self.inner.range_shape()
    }

    pub fn domain_len(&self) -> usize {
        self.domain_shape().iter().product()
    }

    pub fn range_len(&self) -> usize {
        self.range_shape().iter().product()
    }

    pub fn inner(&self) -> &Arc<dyn LinearOperator> {
        &self.inner
    }

    /// Raw forward application; panics if `x` has the wrong length.
    pub fn apply_slice(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.domain_len(), "operator domain length");
        let mut out = vec![0.0; self.range_len()];
        self.inner.apply(x, &mut out);
        out
    }

    /// Raw adjoint application; panics if `y` has the wrong length.
    pub fn adjoint_slice(&self, y: &[f64]) -> Vec<f64> {
        assert_eq!(y.len(), self.range_len(), "operator range length");
        let mut out = vec![0.0; self.domain_len()];
        self.inner.adjoint(y, &mut out);
        out
    }

    /// `A^T A x`.
    pub fn gram_slice(&self, x: &[f64]) -> Vec<f64> {
        self.adjoint_slice(&self.apply_slice(x))
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        check_input(x, &self.domain_shape())?;
        Tensor::new(self.range_shape(), self.apply_slice(x.data()))
    }

    pub fn adjoint(&self, y: &Tensor) -> Result<Tensor> {
        check_input(y, &self.range_shape())?;
        Tensor::new(self.domain_shape(), self.adjoint_slice(y.data()))
    }

    pub fn gram(&self, x: &Tensor) -> Result<Tensor> {
        let ax = self.apply(x)?;
        self.adjoint(&ax)
    }

    /// Cached `‖A‖₂` estimate (power iteration with default settings).
    pub fn norm(&self) -> f64 {
        *self
            .norm
            .get_or_init(|| operator_norm(self, DEFAULT_NORM_ITERS, DEFAULT_NORM_TOL, NORM_SEED))
    }

    pub fn cached_norm(&self) -> Option<f64> {
        self.norm.get().copied()
    }

    pub fn scaled(&self, factor: f64) -> OperatorHandle {
        OperatorHandle::new(Scaled {
            inner: self.clone(),
            factor,
        })
    }

    /// `A / ‖A‖₂`; a zero operator is returned unchanged.
    pub fn normalized(&self) -> OperatorHandle {
        let n = self.norm();
        if n == 0.0 {
            self.clone()
        } else {
            self.scaled(1.0 / n)
        }
    }

    /// `self ∘ inner`.
    pub fn compose(&self, inner: &OperatorHandle) -> Result<OperatorHandle> {
        let got = inner.range_len();
        let want: usize = self.domain_len();
        if got != want {
            return Err(Error::ShapeMismatch {
                expected: self.domain_shape(),
                actual: inner.range_shape(),
            });
        }
        Ok(OperatorHandle::new(Composed {
            outer: self.clone(),
            inner: inner.clone(),
        }))
    }
}

fn check_input(x: &Tensor, want: &[usize]) -> Result<()> {
    if squeeze_leading(x.shape()) != squeeze_leading(want) {
        return Err(Error::ShapeMismatch {
            expected: want.to_vec(),
            actual: x.shape().to_vec(),
        });
    }
    Ok(())
}

/// Power iteration on `A^T A`; returns the square root of the dominant
/// eigenvalue. Stops once the Rayleigh quotient changes by less than `tol`
/// (relative) or after `iters` rounds. A zero operator yields 0.
pub fn operator_norm(op: &OperatorHandle, iters: usize, tol: f64, seed: u64) -> f64 {
    let n = op.domain_len();
    let mut rng = rng_from_seed(seed);
    let mut x: Vec<f64> = (0..n).map(|_| rng.random::<f64>() - 0.5).collect();
    let nx = norm2(&x);
    x.iter_mut().for_each(|v| *v /= nx);
    let mut estimate = 0.0;
    for _ in 0..iters.max(1) {
        let z = op.gram_slice(&x);
        let rayleigh = dot(&x, &z);
        let nz = norm2(&z);
        if nz == 0.0 {
            return 0.0;
        }
        let converged = estimate > 0.0 && (rayleigh - estimate).abs() <= tol * rayleigh;
        estimate = rayleigh;
        if converged {
            break;
        }
        x = z.into_iter().map(|v| v / nz).collect();
    }
    estimate.max(0.0).sqrt()
}

#[derive(Debug)]
struct Scaled {
    inner: OperatorHandle,
    factor: f64,
}

impl LinearOperator for Scaled {
    fn kind(&self) -> &'static str {
        self.inner.kind()
    }
    fn domain_shape(&self) -> Vec<usize> {
        self.inner.domain_shape()
    }
    fn range_shape(&self) -> Vec<usize> {
        self.inner.range_shape()
    }
    fn apply(&self, x: &[f64], out: &mut [f64]) {
        self.inner.inner.apply(x, out);
        out.iter_mut().for_each(|v| *v *= self.factor);
    }
    fn adjoint(&self, y: &[f64], out: &mut [f64]) {
        self.inner.inner.adjoint(y, out);
        out.iter_mut().for_each(|v| *v *= self.factor);
    }
    fn coarse_fast_path(&self, factor: usize) -> Option<Result<(OperatorHandle, OperatorHandle)>> {
        self.inner.inner.coarse_fast_path(factor)
    }
}

#[derive(Debug)]
struct Composed {
    outer: OperatorHandle,
    inner: OperatorHandle,
}

impl LinearOperator for Composed {
    fn kind(&self) -> &'static str {
        "composed"
    }
    fn domain_shape(&self) -> Vec<usize> {
        self.inner.domain_shape()
    }
    fn range_shape(&self) -> Vec<usize> {
        self.outer.range_shape()
    }
    fn apply(&self, x: &[f64], out: &mut [f64]) {
        let mid = self.inner.apply_slice(x);
        self.outer.inner.apply(&mid, out);
    }
    fn adjoint(&self, y: &[f64], out: &mut [f64]) {
        let mid = self.outer.adjoint_slice(y);
        self.inner.inner.adjoint(&mid, out);
    }
}

/// The identity map on `(C, H, W)` images (denoising).
#[derive(Debug)]
pub struct Identity {
    shape: Vec<usize>,
}

pub fn make_identity(shape: &[usize]) -> Result<OperatorHandle> {
    validate_image_shape(shape)?;
    Ok(OperatorHandle::new(Identity {
        shape: shape.to_vec(),
    }))
}

impl LinearOperator for Identity {
    fn kind(&self) -> &'static str {
        "identity"
    }
    fn domain_shape(&self) -> Vec<usize> {
        self.shape.clone()
    }
    fn range_shape(&self) -> Vec<usize> {
        self.shape.clone()
    }
    fn apply(&self, x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(x);
    }
    fn adjoint(&self, y: &[f64], out: &mut [f64]) {
        out.copy_from_slice(y);
    }
    fn coarse_fast_path(&self, factor: usize) -> Option<Result<(OperatorHandle, OperatorHandle)>> {
        let (c, h, w) = (self.shape[0], self.shape[1], self.shape[2]);
        if h % factor != 0 || w % factor != 0 {
            return None;
        }
        Some((|| {
            let coarse = make_identity(&[c, h / factor, w / factor])?;
            let restrict = resample::block_average(c, h, w, factor)?;
            Ok((coarse, restrict))
        })())
    }
}

/// Elementwise multiplication by a fixed weight array (masks).
#[derive(Debug)]
pub struct Diagonal {
    weights: Arc<Tensor>,
    kind: &'static str,
}

impl Diagonal {
    pub fn weights(&self) -> &Tensor {
        &self.weights
    }
}

/// Diagonal operator with arbitrary weights over any shape.
pub fn make_diagonal(weights: Tensor) -> OperatorHandle {
    OperatorHandle::new(Diagonal {
        weights: Arc::new(weights),
        kind: "diagonal",
    })
}

/// Inpainting with a binary mask shaped like the image.
pub fn make_inpainting(mask: &Tensor) -> Result<OperatorHandle> {
    validate_image_shape(mask.shape())?;
    if mask.data().iter().any(|&m| m != 0.0 && m != 1.0) {
        return Err(Error::invalid("inpainting mask must be binary"));
    }
    Ok(OperatorHandle::new(Diagonal {
        weights: Arc::new(mask.clone()),
        kind: "inpainting",
    }))
}

/// Bernoulli mask keeping each pixel with probability `keep_prob`. With
/// `per_channel` every channel draws its own mask, otherwise one spatial
/// mask is shared by all channels.
pub fn bernoulli_mask(shape: &[usize], keep_prob: f64, per_channel: bool, seed: u64) -> Result<Tensor> {
    validate_image_shape(shape)?;
    if !(0.0..=1.0).contains(&keep_prob) {
        return Err(Error::invalid("keep probability must lie in [0, 1]"));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let mut rng = rng_from_seed(seed);
    let draws = if per_channel { c * h * w } else { h * w };
    let bits: Vec<f64> = (0..draws)
        .map(|_| if rng.random::<f64>() < keep_prob { 1.0 } else { 0.0 })
        .collect();
    let data = if per_channel {
        bits
    } else {
        (0..c).flat_map(|_| bits.iter().copied()).collect()
    };
    Tensor::new(shape.to_vec(), data)
}

impl LinearOperator for Diagonal {
    fn kind(&self) -> &'static str {
        self.kind
    }
    fn domain_shape(&self) -> Vec<usize> {
        self.weights.shape().to_vec()
    }
    fn range_shape(&self) -> Vec<usize> {
        self.weights.shape().to_vec()
    }
    fn apply(&self, x: &[f64], out: &mut [f64]) {
        for ((o, &xi), &m) in out.iter_mut().zip(x).zip(self.weights.data()) {
            *o = m * xi;
        }
    }
    fn adjoint(&self, y: &[f64], out: &mut [f64]) {
        self.apply(y, out);
    }
    fn coarse_fast_path(&self, factor: usize) -> Option<Result<(OperatorHandle, OperatorHandle)>> {
        let shape = self.weights.shape();
        if shape.len() != 3 || shape[1] % factor != 0 || shape[2] % factor != 0 {
            return None;
        }
        Some((|| {
            let (c, h, w) = (shape[0], shape[1], shape[2]);
            let restrict = resample::block_average(c, h, w, factor)?;
            let coarse_mask = restrict.apply(&self.weights)?;
            let coarse = OperatorHandle::new(Diagonal {
                weights: Arc::new(coarse_mask),
                kind: self.kind,
            });
            Ok((coarse, restrict))
        })())
    }
}

/// Top-left restriction from a padded `(C, Hp, Wp)` grid to `(C, H, W)`;
/// the adjoint embeds with zeros.
#[derive(Debug)]
pub struct Crop {
    from: [usize; 3],
    to: [usize; 3],
}

pub fn make_crop(from: &[usize], to: &[usize]) -> Result<OperatorHandle> {
    validate_image_shape(from)?;
    validate_image_shape(to)?;
    if from[0] != to[0] || to[1] > from[1] || to[2] > from[2] {
        return Err(Error::invalid(format!("cannot crop {from:?} to {to:?}")));
    }
    Ok(OperatorHandle::new(Crop {
        from: [from[0], from[1], from[2]],
        to: [to[0], to[1], to[2]],
    }))
}

impl LinearOperator for Crop {
    fn kind(&self) -> &'static str {
        "crop"
    }
    fn domain_shape(&self) -> Vec<usize> {
        self.from.to_vec()
    }
    fn range_shape(&self) -> Vec<usize> {
        self.to.to_vec()
    }
    fn apply(&self, x: &[f64], out: &mut [f64]) {
        let [c, h, w] = self.to;
        let [_, hp, wp] = self.from;
        for ch in 0..c {
            for y in 0..h {
                let src = (ch * hp + y) * wp;
                let dst = (ch * h + y) * w;
                out[dst..dst + w].copy_from_slice(&x[src..src + w]);
            }
        }
    }
    fn adjoint(&self, y: &[f64], out: &mut [f64]) {
        let [c, h, w] = self.to;
        let [_, hp, wp] = self.from;
        for ch in 0..c {
            for r in 0..h {
                let dst = (ch * hp + r) * wp;
                let src = (ch * h + r) * w;
                out[dst..dst + w].copy_from_slice(&y[src..src + w]);
            }
        }
    }
}

pub(crate) fn validate_image_shape(shape: &[usize]) -> Result<()> {
    if shape.len() != 3 || shape.iter().any(|&e| e == 0) {
        return Err(Error::InvalidShape(shape.to_vec()));
    }
    Ok(())
}

/// Dense matrix of an operator, built by probing with basis vectors.
/// Row-major `range_len x domain_len`; meant for small test problems.
pub fn dense_matrix(op: &OperatorHandle) -> Vec<Vec<f64>> {
    let (m, n) = (op.range_len(), op.domain_len());
    let mut rows = vec![vec![0.0; n]; m];
    let mut e = vec![0.0; n];
    for j in 0..n {
        e[j] = 1.0;
        let col = op.apply_slice(&e);
        for i in 0..m {
            rows[i][j] = col[i];
        }
        e[j] = 0.0;
    }
    rows
}

/// Relative dot-product test error `|<Ax,y> - <x,A^T y>| / (|<Ax,y>| + ε)`.
pub fn adjoint_mismatch(op: &OperatorHandle, x: &[f64], y: &[f64]) -> f64 {
    let ax = op.apply_slice(x);
    let aty = op.adjoint_slice(y);
    let lhs = dot(&ax, y);
    let rhs = dot(x, &aty);
    let scale = norm2(&ax) * norm2(y) + norm2(x) * norm2(&aty);
    if scale == 0.0 {
        return (lhs - rhs).abs();
    }
    (lhs - rhs).abs() / scale
}
