//! Central finite-difference gradient checks.

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Largest relative error, over inputs, between the tape gradient of the
/// scalar `f(inputs)` and central differences with step `h`. The error of
/// one input is `‖g − g_fd‖ / max(‖g‖, ‖g_fd‖, 1e-12)`.
pub fn gradient_error<F>(f: F, inputs: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.variable(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        if !tape.value(out).is_scalar() {
            return Err(Error::NonScalarLoss(tape.shape(out).to_vec()));
        }
        Ok(tape.value(out).item())
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.variable(x.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let mut worst: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for (k, (&v, x)) in vars.iter().zip(inputs).enumerate() {
        let g = grads.get_or_zeros(v, x);
        let mut fd = vec![0.0; x.numel()];
        for (i, slot) in fd.iter_mut().enumerate() {
            let orig = x.data()[i];
            probe[k].data_mut()[i] = orig + h;
            let up = eval(&probe)?;
            probe[k].data_mut()[i] = orig - h;
            let down = eval(&probe)?;
            probe[k].data_mut()[i] = orig;
            *slot = (up - down) / (2.0 * h);
        }
        let diff: f64 = g.data().iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let gn = g.norm2();
        let fn_ = fd.iter().map(|v| v * v).sum::<f64>().sqrt();
        worst = worst.max(diff / gn.max(fn_).max(1e-12));
    }
    Ok(worst)
}
