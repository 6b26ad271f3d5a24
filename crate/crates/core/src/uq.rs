//! Equivariant bootstrap uncertainty quantification.
//!
//! ```text
//! x̂ = R(y)
//! for i in 1..=N:
//!     g ~ group
//!     ỹ ~ γ P(A T_g x̂ / γ) + σ n
//!     x̃ᵢ = T_g⁻¹ R(ỹ)
//! ```

use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::instance::ProblemInstance;
use crate::model::Reconstructor;
use crate::noise::sample_noise;
use crate::rng::{derive_seed, rng_from_seed};
use crate::selfsup::{Transform, TransformGroup};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct BootstrapSample {
    pub replicates: Vec<Tensor>,
    pub xhat: Tensor,
    /// Transform drawn for each replicate.
    pub transforms: Vec<Transform>,
    pub seed: u64,
}

/// Wraps a reconstructor and counts its evaluations.
pub struct Counted<'a, R: ?Sized> {
    inner: &'a R,
    count: AtomicUsize,
}

impl<'a, R: Reconstructor + ?Sized> Counted<'a, R> {
    pub fn new(inner: &'a R) -> Self {
        Counted {
            inner,
            count: AtomicUsize::new(0),
        }
    }

    pub fn count(&self) -> usize {
        self.count.load(Ordering::SeqCst)
    }
}

impl<R: Reconstructor + ?Sized> Reconstructor for Counted<'_, R> {
    fn reconstruct(&self, y: &Tensor, inst: &ProblemInstance) -> Result<Tensor> {
        self.count.fetch_add(1, Ordering::SeqCst);
        self.inner.reconstruct(y, inst)
    }
}

/// `n` bootstrap replicates around `R(inst.y)`; evaluates the model `n + 1`
/// times. Replicate `i` depends only on `(seed, i)`.
pub fn equivariant_bootstrap<R: Reconstructor + ?Sized>(
    model: &R,
    inst: &ProblemInstance,
    group: &TransformGroup,
    n: usize,
    seed: u64,
) -> Result<BootstrapSample> {
    if n == 0 {
        return Err(Error::invalid("bootstrap needs at least one replicate"));
    }
    inst.noise.validate()?;
    let xhat = model.reconstruct(&inst.y, inst)?;
    let shape = xhat.shape().to_vec();
    let draws: Vec<(Tensor, Transform)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let replicate_seed = derive_seed(seed, i as u64);
            let mut rng = rng_from_seed(replicate_seed);
            let g = group.sample(&shape, &mut rng)?;
            let clean = inst.op.apply(&g.apply(&xhat)?)?;
            let y = sample_noise(&clean, inst.noise, derive_seed(replicate_seed, 1))?.y;
            let replicate_inst = inst.with_measurement(y.clone())?;
            let x = model.reconstruct(&y, &replicate_inst)?;
            Ok((g.invert(&x)?, g))
        })
        .collect::<Result<_>>()?;
    let (replicates, transforms) = draws.into_iter().unzip();
    Ok(BootstrapSample {
        replicates,
        xhat,
        transforms,
        seed,
    })
}

/// `(1/N) Σ (x̃ᵢ − x̂)²`, averaged over channels; shape `(1, H, W)`.
pub fn pixelwise_errors(sample: &BootstrapSample) -> Result<Tensor> {
    let (c, h, w) = sample.xhat.image_dims()?;
    if sample.replicates.is_empty() {
        return Err(Error::invalid("bootstrap sample is empty"));
    }
    let plane = h * w;
    let mut out = vec![0.0; plane];
    for r in &sample.replicates {
        if r.shape() != sample.xhat.shape() {
            return Err(Error::ShapeMismatch {
                expected: sample.xhat.shape().to_vec(),
                actual: r.shape().to_vec(),
            });
        }
        for (i, (a, b)) in r.data().iter().zip(sample.xhat.data()).enumerate() {
            out[i % plane] += (a - b).powi(2);
        }
    }
    let norm = (sample.replicates.len() * c) as f64;
    Tensor::new(vec![1, h, w], out.into_iter().map(|v| v / norm).collect())
}

/// `‖x̃ᵢ − x̂‖₂` for each replicate.
pub fn replicate_radii(sample: &BootstrapSample) -> Result<Vec<f64>> {
    sample.replicates.iter().map(|r| Ok(r.sub(&sample.xhat)?.norm2())).collect()
}

/// Radius of the level-`alpha` confidence ball: the `⌈αN⌉`-th smallest
/// replicate radius, or −∞ (an empty region) at level 0.
pub fn confidence_radius(radii: &[f64], alpha: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("confidence level {alpha} outside [0, 1]")));
    }
    if radii.is_empty() {
        return Err(Error::invalid("no replicate radii"));
    }
    let k = (alpha * radii.len() as f64).ceil() as usize;
    if k == 0 {
        return Ok(f64::NEG_INFINITY);
    }
    let mut sorted = radii.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted[k - 1])
}

/// Fraction of `(replicate radii, true distance)` pairs whose truth lies in
/// the level-α ball, for each level.
pub fn empirical_coverage(results: &[(Vec<f64>, f64)], levels: &[f64]) -> Result<Vec<(f64, f64)>> {
    if results.is_empty() {
        return Err(Error::invalid("no test images"));
    }
    levels
        .iter()
        .map(|&alpha| {
            let mut inside = 0usize;
            for (radii, dist) in results {
                if *dist <= confidence_radius(radii, alpha)? {
                    inside += 1;
                }
            }
            Ok((alpha, inside as f64 / results.len() as f64))
        })
        .collect()
}

/// `(nominal, empirical)` coverage of bootstrap ℓ2 balls over instances
/// with ground truth. Instance `j` uses seed `derive_seed(seed, j)`.
pub fn coverage_curve<R: Reconstructor + ?Sized>(
    model: &R,
    instances: &[ProblemInstance],
    group: &TransformGroup,
    n: usize,
    levels: &[f64],
    seed: u64,
) -> Result<Vec<(f64, f64)>> {
    if instances.is_empty() {
        return Err(Error::invalid("no test instances"));
    }
    let mut results = Vec::with_capacity(instances.len());
    for (j, inst) in instances.iter().enumerate() {
        let truth = inst.truth()?;
        let sample = equivariant_bootstrap(model, inst, group, n, derive_seed(seed, j as u64))?;
        let dist = truth.sub(&sample.xhat)?.norm2();
        results.push((replicate_radii(&sample)?, dist));
    }
    empirical_coverage(&results, levels)
}

/// Pearson correlation between an estimated error map and the
/// channel-averaged squared error of `xhat` against `truth`.
pub fn error_map_correlation(error_map: &Tensor, xhat: &Tensor, truth: &Tensor) -> Result<f64> {
    let (c, h, w) = truth.image_dims()?;
    let diff = xhat.sub(truth)?;
    let plane = h * w;
    if error_map.numel() != plane {
        return Err(Error::ShapeMismatch {
            expected: vec![1, h, w],
            actual: error_map.shape().to_vec(),
        });
    }
    let mut actual = vec![0.0; plane];
    for (i, d) in diff.data().iter().enumerate() {
        actual[i % plane] += d * d / c as f64;
    }
    let est = error_map.data();
    let n = plane as f64;
    let (ma, mb) = (est.iter().sum::<f64>() / n, actual.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (a, b) in est.iter().zip(&actual) {
        sab += (a - ma) * (b - mb);
        saa += (a - ma).powi(2);
        sbb += (b - mb).powi(2);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Ok(0.0);
    }
    Ok(sab / (saa * sbb).sqrt())
}
