//! Coarse-grid operators `A_s = A U_s` and their measurement embeddings.

use serde::{Deserialize, Serialize};

use super::resample::make_upsampler;
use super::{make_crop, validate_image_shape, OperatorHandle};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CoarsePath {
    Generic,
    KernelDownscaled,
    MaskDownscaled,
}

/// Unit-norm operator on the grid downscaled by `2^scale`.
///
/// `measurement` maps a fine measurement `y` to `y_s` with `y_s ≈ A_s x_s`
/// whenever `y ≈ A U_s x_s`, so `A_s^T y_s` and `A_s^T A_s x_s` share units.
#[derive(Clone, Debug)]
pub struct CoarseOperator {
    scale: usize,
    path: CoarsePath,
    op: OperatorHandle,
    restrict: Option<OperatorHandle>,
    measurement_scale: f64,
}

impl CoarseOperator {
    pub fn scale(&self) -> usize {
        self.scale
    }

    pub fn path(&self) -> CoarsePath {
        self.path
    }

    pub fn op(&self) -> &OperatorHandle {
        &self.op
    }

    pub fn domain_shape(&self) -> Vec<usize> {
        self.op.domain_shape()
    }

    /// Map from fine measurements onto the coarse operator's range, when
    /// the operator lives on a different range than the base.
    pub fn restrict(&self) -> Option<&OperatorHandle> {
        self.restrict.as_ref()
    }

    pub fn measurement_scale(&self) -> f64 {
        self.measurement_scale
    }

    pub fn measurement(&self, y: &[f64]) -> Vec<f64> {
        let mut ys = match &self.restrict {
            Some(r) => r.apply_slice(y),
            None => y.to_vec(),
        };
        ys.iter_mut().for_each(|v| *v *= self.measurement_scale);
        ys
    }

    /// `A_s^T y_s` on the coarse grid.
    pub fn backproject(&self, y: &[f64]) -> Vec<f64> {
        self.op.adjoint_slice(&self.measurement(y))
    }
}

fn finish(scale: usize, path: CoarsePath, raw: OperatorHandle, restrict: Option<OperatorHandle>) -> CoarseOperator {
    let n = raw.norm();
    let (op, measurement_scale) = if n > 0.0 {
        (raw.scaled(1.0 / n), 1.0 / n)
    } else {
        (raw, 1.0)
    };
    CoarseOperator {
        scale,
        path,
        op,
        restrict,
        measurement_scale,
    }
}

/// Coarse operator on the base operator's own domain.
pub fn make_coarse(op: &OperatorHandle, scale: usize) -> Result<CoarseOperator> {
    make_coarse_on_grid(op, scale, &op.domain_shape())
}

/// Coarse operator for images living on `grid`, a bottom/right padded
/// version of the base domain. Fast paths are taken when the operator
/// provides one and no padding is involved.
pub fn make_coarse_on_grid(op: &OperatorHandle, scale: usize, grid: &[usize]) -> Result<CoarseOperator> {
    check_grid(op, scale, grid)?;
    let factor = 1usize << scale;
    if scale > 0 && grid == op.domain_shape().as_slice() {
        if let Some(fast) = op.inner().coarse_fast_path(factor) {
            let (coarse, restrict) = fast?;
            let path = if op.kind() == "blur" {
                CoarsePath::KernelDownscaled
            } else {
                CoarsePath::MaskDownscaled
            };
            return Ok(finish(scale, path, coarse, Some(restrict)));
        }
    }
    let upsampler = make_upsampler(scale, grid)?;
    make_coarse_with_upsampler(op, scale, grid, &upsampler)
}

/// Generic path `normalize(A ∘ crop ∘ up)` with a caller-supplied upsampler.
pub fn make_coarse_with_upsampler(
    op: &OperatorHandle,
    scale: usize,
    grid: &[usize],
    upsampler: &OperatorHandle,
) -> Result<CoarseOperator> {
    check_grid(op, scale, grid)?;
    if upsampler.range_shape() != grid {
        return Err(Error::ShapeMismatch {
            expected: grid.to_vec(),
            actual: upsampler.range_shape(),
        });
    }
    let domain = op.domain_shape();
    let base = if grid == domain.as_slice() {
        op.clone()
    } else {
        op.compose(&make_crop(grid, &domain)?)?
    };
    let raw = if scale == 0 && upsampler.kind() == "identity" {
        base
    } else {
        base.compose(upsampler)?
    };
    Ok(finish(scale, CoarsePath::Generic, raw, None))
}

fn check_grid(op: &OperatorHandle, scale: usize, grid: &[usize]) -> Result<()> {
    validate_image_shape(grid)?;
    let domain = op.domain_shape();
    let factor = 1usize << scale;
    if grid[0] != domain[0] || grid[1] < domain[1] || grid[2] < domain[2] {
        return Err(Error::invalid(format!("grid {grid:?} does not contain domain {domain:?}")));
    }
    if grid[1] % factor != 0 || grid[2] % factor != 0 {
        return Err(Error::invalid(format!(
            "grid {}x{} not divisible by {factor}",
            grid[1], grid[2]
        )));
    }
    Ok(())
}
