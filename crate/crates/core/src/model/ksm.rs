//! Krylov subspace stacks `{(A_sᵀA_s)^k x}` and `{(A_sᵀA_s)^k A_sᵀy_s}`.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::operators::CoarseOperator;
use crate::tensor::Tensor;

/// Channel groups of one Krylov stack; group `k` of each family holds `k`
/// applications of the coarse normal operator.
#[derive(Clone, Debug, PartialEq)]
pub struct KsmStack {
    pub x_groups: Vec<Tensor>,
    pub y_groups: Vec<Tensor>,
}

impl KsmStack {
    /// All groups concatenated along channels: x-family first.
    pub fn stacked(&self) -> Result<Tensor> {
        let parts: Vec<&Tensor> = self.x_groups.iter().chain(&self.y_groups).collect();
        Tensor::concat_channels(&parts)
    }

    pub fn channels(&self) -> usize {
        self.x_groups.iter().chain(&self.y_groups).map(|t| t.numel() / plane(t)).sum()
    }
}

fn plane(t: &Tensor) -> usize {
    let s = t.shape();
    s[s.len() - 2] * s[s.len() - 1]
}

fn krylov(seed: Tensor, op: &CoarseOperator, order: usize) -> Result<Vec<Tensor>> {
    let shape = seed.shape().to_vec();
    let mut groups = vec![seed];
    for _ in 0..order {
        let next = op.op().gram_slice(groups.last().unwrap().data());
        groups.push(Tensor::new(shape.clone(), next)?);
    }
    Ok(groups)
}

/// Stack for image `x_s` on the coarse grid and fine measurement `y`.
pub fn build_ksm_stack(x_s: &Tensor, op: &CoarseOperator, y: &Tensor, order: usize) -> Result<KsmStack> {
    let shape = op.domain_shape();
    let x = x_s.clone().reshape(shape.clone())?;
    let b = Tensor::new(shape, op.backproject(y.data()))?;
    Ok(KsmStack {
        x_groups: krylov(x, op, order)?,
        y_groups: krylov(b, op, order)?,
    })
}

/// `A_sᵀ y_s` recorded on the tape, as a `(1, C, h, w)` node.
pub(crate) fn backproject_on_tape(tape: &mut Tape, op: &CoarseOperator, y: Var) -> Result<Var> {
    let ys = match op.restrict() {
        Some(r) => tape.linear(y, r, false)?,
        None => y,
    };
    let ys = tape.scale(ys, op.measurement_scale());
    let b = tape.linear(ys, op.op(), true)?;
    to_batched(tape, b)
}

pub(crate) fn to_batched(tape: &mut Tape, v: Var) -> Result<Var> {
    let (c, h, w) = tape.value(v).image_dims()?;
    tape.reshape(v, vec![1, c, h, w])
}

/// Krylov stack of `(1, C, h, w)` nodes `z` and `b`, concatenated along
/// channels in the same order as [`KsmStack::stacked`].
pub(crate) fn stack_on_tape(tape: &mut Tape, op: &CoarseOperator, z: Var, b: Var, order: usize) -> Result<Var> {
    let mut parts = Vec::with_capacity(2 * (order + 1));
    for seed in [z, b] {
        let mut g = seed;
        parts.push(g);
        for _ in 0..order {
            let a = tape.linear(g, op.op(), false)?;
            let at = tape.linear(a, op.op(), true)?;
            g = to_batched(tape, at)?;
            parts.push(g);
        }
    }
    tape.concat_channels(&parts)
}
