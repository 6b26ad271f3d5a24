//! Conjugate gradient, the proximal initialization and a ridge pseudo-inverse.
//!
//! The prox step solves `(λAᵀA + I) u = (1 + λ) Aᵀy`, the optimality
//! condition of `argmin_u λ‖Au − y‖² + ‖u − Aᵀy‖²`. Small λ keeps `u` near
//! the back-projection, large λ pushes it toward the least-squares solution.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::operators::OperatorHandle;
use crate::tensor::{dot, norm2, Tensor};

/// Inner CG budget used by the network.
pub const NET_CG_ITERS: usize = 10;
pub const NET_CG_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct CgReport {
    pub iterations: usize,
    pub residual_norm: f64,
    pub converged: bool,
    /// Smallest relative residual reached after each iteration.
    pub history: Vec<f64>,
}

/// CG from a zero initial guess for a symmetric positive semidefinite map.
///
/// Returns the iterate with the smallest residual seen, so the reported
/// residuals never increase even though raw CG residuals may.
pub fn conjugate_gradient(
    apply: impl Fn(&[f64]) -> Vec<f64>,
    rhs: &[f64],
    max_iters: usize,
    tol: f64,
) -> (Vec<f64>, CgReport) {
    let n = rhs.len();
    let bnorm = norm2(rhs);
    let mut x = vec![0.0; n];
    if bnorm == 0.0 {
        return (
            x,
            CgReport {
                iterations: 0,
                residual_norm: 0.0,
                converged: true,
                history: Vec::new(),
            },
        );
    }
    let mut r = rhs.to_vec();
    let mut p = r.clone();
    let mut rs = dot(&r, &r);
    let mut best = (bnorm, x.clone());
    let mut history = Vec::new();
    let mut converged = false;
    for _ in 0..max_iters {
        let mp = apply(&p);
        let pmp = dot(&p, &mp);
        if pmp <= 0.0 || !pmp.is_finite() {
            break;
        }
        let alpha = rs / pmp;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * mp[i];
        }
        let rs_new = dot(&r, &r);
        let res = rs_new.sqrt();
        if res < best.0 {
            best = (res, x.clone());
        }
        history.push(best.0 / bnorm);
        if res <= tol * bnorm {
            converged = true;
            break;
        }
        let beta = rs_new / rs;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
        rs = rs_new;
    }
    let report = CgReport {
        iterations: history.len(),
        residual_norm: best.0,
        converged,
        history,
    };
    (best.1, report)
}

/// `λ = σ η / ‖y‖₁`, or 0 for an all-zero measurement.
pub fn lambda_schedule(sigma: f64, eta: f64, y: &[f64]) -> f64 {
    let l1: f64 = y.iter().map(|v| v.abs()).sum();
    if l1 == 0.0 {
        0.0
    } else {
        sigma * eta / l1
    }
}

fn check_range(op: &OperatorHandle, y: &Tensor) -> Result<()> {
    if y.numel() != op.range_len() {
        return Err(Error::ShapeMismatch {
            expected: op.range_shape(),
            actual: y.shape().to_vec(),
        });
    }
    Ok(())
}

/// Proximal initialization `u = prox_{λf}(Aᵀy)`.
pub fn prox_estimate(op: &OperatorHandle, y: &Tensor, lambda: f64, cg_iters: usize, cg_tol: f64) -> Result<Tensor> {
    check_range(op, y)?;
    if lambda < 0.0 || !lambda.is_finite() {
        return Err(Error::invalid(format!("lambda must be finite and nonnegative, got {lambda}")));
    }
    let aty = op.adjoint_slice(y.data());
    if lambda == 0.0 {
        return Tensor::new(op.domain_shape(), aty);
    }
    let rhs: Vec<f64> = aty.iter().map(|v| (1.0 + lambda) * v).collect();
    let (u, _) = conjugate_gradient(
        |x| {
            let g = op.gram_slice(x);
            g.iter().zip(x).map(|(a, b)| lambda * a + b).collect()
        },
        &rhs,
        cg_iters,
        cg_tol,
    );
    Tensor::new(op.domain_shape(), u)
}

/// Tikhonov pseudo-inverse `(AᵀA + εI)⁻¹ Aᵀy`.
pub fn pseudo_inverse_apply(op: &OperatorHandle, y: &Tensor, ridge: f64, cg_iters: usize, cg_tol: f64) -> Result<Tensor> {
    check_range(op, y)?;
    if ridge <= 0.0 {
        return Err(Error::invalid(format!("ridge must be positive, got {ridge}")));
    }
    let rhs = op.adjoint_slice(y.data());
    let (x, _) = conjugate_gradient(
        |v| {
            let g = op.gram_slice(v);
            g.iter().zip(v).map(|(a, b)| a + ridge * b).collect()
        },
        &rhs,
        cg_iters,
        cg_tol,
    );
    Tensor::new(op.domain_shape(), x)
}

/// The prox step recorded on a tape as unrolled CG, so gradients reach the
/// scalar node `lambda`. `aty` holds `Aᵀy` in the operator's domain shape.
/// Stops early once the relative residual falls below `tol`.
pub fn prox_on_tape(tape: &mut Tape, op: &OperatorHandle, aty: Var, lambda: Var, iters: usize, tol: f64) -> Result<Var> {
    let one = tape.constant(Tensor::scalar(1.0));
    let scale = tape.add(one, lambda)?;
    let b = tape.scale_by(aty, scale)?;
    let bnorm = tape.value(b).norm2();
    let mut x = tape.constant(Tensor::zeros(tape.shape(b).to_vec()));
    if bnorm == 0.0 {
        return Ok(x);
    }
    let mut r = b;
    let mut p = b;
    let mut rs = tape.dot(r, r)?;
    for _ in 0..iters {
        let ap = tape.linear(p, op, false)?;
        let gp = tape.linear(ap, op, true)?;
        let lgp = tape.scale_by(gp, lambda)?;
        let mp = tape.add(lgp, p)?;
        let pmp = tape.dot(p, mp)?;
        if !(tape.value(pmp).item() > 0.0) {
            break;
        }
        let alpha = tape.div_by(rs, pmp)?;
        let step = tape.scale_by(p, alpha)?;
        x = tape.add(x, step)?;
        let dr = tape.scale_by(mp, alpha)?;
        r = tape.sub(r, dr)?;
        let rs_new = tape.dot(r, r)?;
        if tape.value(rs_new).item().sqrt() <= tol * bnorm {
            break;
        }
        let beta = tape.div_by(rs_new, rs)?;
        let bp = tape.scale_by(p, beta)?;
        p = tape.add(r, bp)?;
        rs = rs_new;
    }
    Ok(x)
}
