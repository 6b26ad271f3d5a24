//! JSON descriptions of operators. Masks, kernels and sensitivity maps are
//! either generated from a seed or loaded from TNSR entries.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    bernoulli_mask, cartesian_mask, gaussian_sensitivity_maps, make_blur, make_compressed_sensing, make_ct_radon,
    make_demosaic, make_downsampling, make_gaussian_kernel, make_identity, make_inpainting, make_motion_kernel,
    make_mri, make_multicoil_mri, random_compressed_sensing, BlurKernel, DownsampleFilter, OperatorHandle,
};
use crate::error::{Error, Result};
use crate::io::TnsrFile;
use crate::tensor::Tensor;

/// Entry `entry` of the TNSR file `file`, relative to the manifest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorRef {
    pub file: String,
    pub entry: String,
}

impl TensorRef {
    pub fn load(&self, base: &Path) -> Result<Tensor> {
        let file = TnsrFile::read(base.join(&self.file))?;
        Ok(file.require(&self.entry)?.clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum KernelSpec {
    Gaussian { sigma: f64, size: usize },
    Motion { length_scale: f64, amplitude: f64, size: usize, seed: u64 },
    File { source: TensorRef },
}

impl KernelSpec {
    pub fn build(&self, base: &Path) -> Result<BlurKernel> {
        match self {
            KernelSpec::Gaussian { sigma, size } => make_gaussian_kernel(*sigma, *size),
            KernelSpec::Motion {
                length_scale,
                amplitude,
                size,
                seed,
            } => make_motion_kernel(*length_scale, *amplitude, *size, *seed),
            KernelSpec::File { source } => BlurKernel::from_tensor(&source.load(base)?),
        }
    }
}

fn default_true() -> bool {
    true
}

/// Every operator is rescaled to unit spectral norm when built, unless
/// `normalize` is set to false.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OperatorSpec {
    Identity {
        shape: Vec<usize>,
    },
    Blur {
        shape: Vec<usize>,
        kernel: KernelSpec,
        #[serde(default = "default_true")]
        normalize: bool,
    },
    Inpainting {
        shape: Vec<usize>,
        #[serde(default)]
        keep_prob: Option<f64>,
        #[serde(default)]
        per_channel: bool,
        #[serde(default)]
        seed: u64,
        #[serde(default)]
        mask: Option<TensorRef>,
    },
    Mri {
        shape: Vec<usize>,
        #[serde(default)]
        acceleration: Option<usize>,
        #[serde(default)]
        seed: u64,
        #[serde(default)]
        mask: Option<TensorRef>,
    },
    MulticoilMri {
        shape: Vec<usize>,
        coils: usize,
        #[serde(default)]
        acceleration: Option<usize>,
        #[serde(default)]
        seed: u64,
        #[serde(default)]
        mask: Option<TensorRef>,
        #[serde(default)]
        smaps: Option<TensorRef>,
    },
    Ct {
        shape: Vec<usize>,
        angles: usize,
        #[serde(default = "default_true")]
        normalize: bool,
    },
    Downsampling {
        shape: Vec<usize>,
        factor: usize,
        filter: DownsampleFilter,
        #[serde(default = "default_true")]
        normalize: bool,
    },
    CompressedSensing {
        shape: Vec<usize>,
        #[serde(default = "default_cs_factor")]
        factor: usize,
        #[serde(default)]
        seed: u64,
        #[serde(default)]
        signs: Option<TensorRef>,
        #[serde(default)]
        keep: Option<TensorRef>,
    },
    Demosaic {
        shape: Vec<usize>,
    },
}

fn default_cs_factor() -> usize {
    4
}

fn mask_or_error(mask: &Option<TensorRef>, base: &Path, what: &str) -> Result<Tensor> {
    match mask {
        Some(r) => r.load(base),
        None => Err(Error::invalid(format!("{what} needs either generation parameters or a mask file"))),
    }
}

impl OperatorSpec {
    pub fn image_shape(&self) -> &[usize] {
        match self {
            OperatorSpec::Identity { shape }
            | OperatorSpec::Blur { shape, .. }
            | OperatorSpec::Inpainting { shape, .. }
            | OperatorSpec::Mri { shape, .. }
            | OperatorSpec::MulticoilMri { shape, .. }
            | OperatorSpec::Ct { shape, .. }
            | OperatorSpec::Downsampling { shape, .. }
            | OperatorSpec::CompressedSensing { shape, .. }
            | OperatorSpec::Demosaic { shape } => shape,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            OperatorSpec::Identity { .. } => "identity",
            OperatorSpec::Blur { .. } => "blur",
            OperatorSpec::Inpainting { .. } => "inpainting",
            OperatorSpec::Mri { .. } => "mri",
            OperatorSpec::MulticoilMri { .. } => "multicoil_mri",
            OperatorSpec::Ct { .. } => "ct",
            OperatorSpec::Downsampling { .. } => "downsampling",
            OperatorSpec::CompressedSensing { .. } => "compressed_sensing",
            OperatorSpec::Demosaic { .. } => "demosaic",
        }
    }

    /// Builds the operator; file references resolve against `base`.
    pub fn build(&self, base: &Path) -> Result<OperatorHandle> {
        let shape = self.image_shape();
        let (op, normalize) = match self {
            OperatorSpec::Identity { shape } => (make_identity(shape)?, false),
            OperatorSpec::Blur {
                shape,
                kernel,
                normalize,
            } => (make_blur(&kernel.build(base)?, shape)?, *normalize),
            OperatorSpec::Inpainting {
                shape,
                keep_prob,
                per_channel,
                seed,
                mask,
            } => {
                let m = match keep_prob {
                    Some(p) if mask.is_none() => bernoulli_mask(shape, *p, *per_channel, *seed)?,
                    _ => mask_or_error(mask, base, "inpainting")?,
                };
                (make_inpainting(&m)?, false)
            }
            OperatorSpec::Mri {
                shape,
                acceleration,
                seed,
                mask,
            } => {
                let m = self.mri_mask(shape, *acceleration, *seed, mask, base)?;
                (make_mri(&m, shape)?, false)
            }
            OperatorSpec::MulticoilMri {
                shape,
                coils,
                acceleration,
                seed,
                mask,
                smaps,
            } => {
                let m = self.mri_mask(shape, *acceleration, *seed, mask, base)?;
                let maps = match smaps {
                    Some(r) => split_maps(&r.load(base)?, *coils, shape)?,
                    None => gaussian_sensitivity_maps(*coils, shape[1], shape[2])?,
                };
                (make_multicoil_mri(&m, &maps, shape)?, false)
            }
            OperatorSpec::Ct {
                shape,
                angles,
                normalize,
            } => (make_ct_radon(*angles, shape)?, *normalize),
            OperatorSpec::Downsampling {
                shape,
                factor,
                filter,
                normalize,
            } => (make_downsampling(*factor, *filter, shape)?, *normalize),
            OperatorSpec::CompressedSensing {
                shape,
                factor,
                seed,
                signs,
                keep,
            } => {
                let op = match (signs, keep) {
                    (Some(s), Some(k)) => {
                        let keep: Vec<usize> = k
                            .load(base)?
                            .data()
                            .iter()
                            .map(|&v| {
                                if v < 0.0 || v.fract() != 0.0 {
                                    Err(Error::invalid(format!("invalid coefficient index {v}")))
                                } else {
                                    Ok(v as usize)
                                }
                            })
                            .collect::<Result<_>>()?;
                        make_compressed_sensing(&s.load(base)?, &keep, shape)?
                    }
                    (None, None) => random_compressed_sensing(shape, *factor, *seed)?,
                    _ => return Err(Error::invalid("compressed sensing needs both signs and keep, or neither")),
                };
                (op, false)
            }
            OperatorSpec::Demosaic { shape } => (make_demosaic(shape)?, false),
        };
        debug_assert_eq!(op.domain_shape(), shape);
        Ok(if normalize { op.normalized() } else { op })
    }

    fn mri_mask(
        &self,
        shape: &[usize],
        acceleration: Option<usize>,
        seed: u64,
        mask: &Option<TensorRef>,
        base: &Path,
    ) -> Result<Tensor> {
        super::validate_image_shape(shape)?;
        match (acceleration, mask) {
            (Some(a), None) => cartesian_mask(a, shape[1], shape[2], seed),
            _ => mask_or_error(mask, base, "MRI"),
        }
    }
}

/// Splits a `(2L, H, W)` stack into `L` complex maps.
fn split_maps(stack: &Tensor, coils: usize, shape: &[usize]) -> Result<Vec<Tensor>> {
    let plane = 2 * shape[1] * shape[2];
    if stack.numel() != coils * plane {
        return Err(Error::ShapeMismatch {
            expected: vec![2 * coils, shape[1], shape[2]],
            actual: stack.shape().to_vec(),
        });
    }
    stack
        .data()
        .chunks(plane)
        .map(|c| Tensor::new(vec![2, shape[1], shape[2]], c.to_vec()))
        .collect()
}
