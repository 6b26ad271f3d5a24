//! Self-supervised finetuning from measurements alone.
//!
//! The objective is `L_MC + ω L_NULL`. The measurement-consistency term is
//! either SURE (Gaussian noise of known σ) or measurement splitting; the
//! null-space term is equivariant imaging (EI) over a transform group or
//! multi-operator imaging (MOI) over a family of operators.

use std::sync::Arc;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamConfig, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::instance::ProblemInstance;
use crate::metrics::psnr;
use crate::model::{DifferentiableReconstructor, Reconstructor};
use crate::noise::NoiseParams;
use crate::operators::make_diagonal;
use crate::rng::{derive_seed, rng_from_seed, Rng};
use crate::tensor::Tensor;

/// An exactly invertible image transform: horizontal flip, then `rot`
/// counter-clockwise quarter turns, then a circular shift.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Transform {
    pub flip: bool,
    pub rot: u8,
    pub shift: (usize, usize),
}

impl Transform {
    /// Destination of pixel `(r, c)` of an `h × w` image.
    fn map(&self, r: usize, c: usize, h: usize, w: usize) -> (usize, usize) {
        let (mut r, mut c) = (r, if self.flip { w - 1 - c } else { c });
        for _ in 0..self.rot % 4 {
            // square images only, checked by the caller
            (r, c) = (w - 1 - c, r);
        }
        ((r + self.shift.0) % h, (c + self.shift.1) % w)
    }

    fn check(&self, shape: &[usize]) -> Result<(usize, usize, usize)> {
        if shape.len() != 3 {
            return Err(Error::InvalidShape(shape.to_vec()));
        }
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        if self.rot % 2 == 1 && h != w {
            return Err(Error::invalid(format!("quarter turns need a square image, got {h}x{w}")));
        }
        Ok((c, h, w))
    }

    /// `out[i] = x[index[i]]` realizes the transform; with `inverse` set, its
    /// inverse.
    pub fn gather_index(&self, shape: &[usize], inverse: bool) -> Result<Vec<usize>> {
        let (c, h, w) = self.check(shape)?;
        let plane = h * w;
        let mut index = vec![0; c * plane];
        for ch in 0..c {
            for r in 0..h {
                for col in 0..w {
                    let (r2, c2) = self.map(r, col, h, w);
                    let src = ch * plane + r * w + col;
                    let dst = ch * plane + r2 * w + c2;
                    if inverse {
                        index[src] = dst;
                    } else {
                        index[dst] = src;
                    }
                }
            }
        }
        Ok(index)
    }

    fn gather(&self, x: &Tensor, inverse: bool) -> Result<Tensor> {
        let index = self.gather_index(x.shape(), inverse)?;
        let d = x.data();
        Tensor::new(x.shape().to_vec(), index.iter().map(|&i| d[i]).collect())
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        self.gather(x, false)
    }

    pub fn invert(&self, x: &Tensor) -> Result<Tensor> {
        self.gather(x, true)
    }

    pub fn apply_on_tape(&self, tape: &mut Tape, x: Var, inverse: bool) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let index = self.gather_index(&shape, inverse)?;
        tape.gather(x, Arc::new(index), shape)
    }
}

fn default_shift_fraction() -> f64 {
    0.1
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TransformGroup {
    Identity,
    /// Circular shifts of up to `max_fraction` of each extent.
    Shifts {
        #[serde(default = "default_shift_fraction")]
        max_fraction: f64,
    },
    Rotations90,
    Flips,
    /// Shifts, quarter turns and flips together.
    Composite {
        #[serde(default = "default_shift_fraction")]
        max_fraction: f64,
    },
}

impl Default for TransformGroup {
    fn default() -> Self {
        TransformGroup::Shifts {
            max_fraction: default_shift_fraction(),
        }
    }
}

impl TransformGroup {
    /// Random element for images of `shape = (C, H, W)`. Quarter turns are
    /// restricted to half turns on non-square images.
    pub fn sample(&self, shape: &[usize], rng: &mut Rng) -> Result<Transform> {
        if shape.len() != 3 {
            return Err(Error::InvalidShape(shape.to_vec()));
        }
        let (h, w) = (shape[1], shape[2]);
        let shift = |rng: &mut Rng, frac: f64| -> Result<(usize, usize)> {
            if !(0.0..=1.0).contains(&frac) {
                return Err(Error::invalid(format!("shift fraction {frac} outside [0, 1]")));
            }
            let one = |rng: &mut Rng, n: usize| {
                let m = (frac * n as f64).floor() as i64;
                let s = rng.random_range(-m..=m);
                s.rem_euclid(n as i64) as usize
            };
            Ok((one(rng, h), one(rng, w)))
        };
        let rot = |rng: &mut Rng| -> u8 {
            if h == w {
                rng.random_range(0..4)
            } else {
                2 * rng.random_range(0..2)
            }
        };
        Ok(match *self {
            TransformGroup::Identity => Transform::default(),
            TransformGroup::Shifts { max_fraction } => Transform {
                shift: shift(rng, max_fraction)?,
                ..Transform::default()
            },
            TransformGroup::Rotations90 => Transform {
                rot: rot(rng),
                ..Transform::default()
            },
            TransformGroup::Flips => Transform {
                flip: rng.random_bool(0.5),
                ..Transform::default()
            },
            TransformGroup::Composite { max_fraction } => Transform {
                flip: rng.random_bool(0.5),
                rot: rot(rng),
                shift: shift(rng, max_fraction)?,
            },
        })
    }
}

/// Probe step `1e-3 · max|y|`, at least `1e-6`.
pub fn divergence_step(y: &Tensor) -> f64 {
    (1e-3 * y.max_abs()).max(1e-6)
}

fn rademacher(n: usize, rng: &mut Rng) -> Vec<f64> {
    (0..n).map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect()
}

/// Monte Carlo divergence `(1/N) Σ bⱼᵀ(f(y + ε bⱼ) − f(y)) / ε` with
/// Rademacher probes, for a plain function.
pub fn mc_divergence_fn(f: impl Fn(&[f64]) -> Vec<f64>, y: &[f64], eps: f64, probes: usize, seed: u64) -> Result<f64> {
    if !(eps > 0.0) || probes == 0 {
        return Err(Error::invalid("divergence needs eps > 0 and at least one probe"));
    }
    let mut rng = rng_from_seed(seed);
    let fy = f(y);
    let mut total = 0.0;
    for _ in 0..probes {
        let b = rademacher(y.len(), &mut rng);
        let yp: Vec<f64> = y.iter().zip(&b).map(|(v, bi)| v + eps * bi).collect();
        let fp = f(&yp);
        if fp.len() != b.len() {
            return Err(Error::invalid("divergence needs a map into the input space"));
        }
        total += b.iter().zip(fp.iter().zip(&fy)).map(|(bi, (p, q))| bi * (p - q)).sum::<f64>();
    }
    Ok(total / (eps * probes as f64))
}

/// The same estimator recorded on a tape; `fy` must hold `f(y)`.
pub fn mc_divergence<F>(tape: &mut Tape, mut f: F, y: Var, fy: Var, eps: f64, probes: usize, seed: u64) -> Result<Var>
where
    F: FnMut(&mut Tape, Var) -> Result<Var>,
{
    if !(eps > 0.0) || probes == 0 {
        return Err(Error::invalid("divergence needs eps > 0 and at least one probe"));
    }
    let shape = tape.shape(y).to_vec();
    let mut rng = rng_from_seed(seed);
    let mut acc: Option<Var> = None;
    for _ in 0..probes {
        let b = Tensor::new(shape.clone(), rademacher(tape.value(y).numel(), &mut rng))?;
        let bv = tape.constant(b);
        let step = tape.scale(bv, eps);
        let yp = tape.add(y, step)?;
        let fp = f(tape, yp)?;
        let d = tape.sub(fp, fy)?;
        let d = tape.reshape(d, shape.clone())?;
        let term = tape.dot(bv, d)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, term)?,
            None => term,
        });
    }
    Ok(tape.scale(acc.expect("at least one probe"), 1.0 / (eps * probes as f64)))
}

fn require_gaussian(noise: NoiseParams) -> Result<()> {
    if noise.gamma > 0.0 {
        return Err(Error::invalid(
            "SURE is only available for Gaussian noise (gamma = 0)",
        ));
    }
    Ok(())
}

fn sure_terms<M: DifferentiableReconstructor + ?Sized>(
    tape: &mut Tape,
    model: &M,
    inst: &ProblemInstance,
    y: Var,
    xhat: Var,
    probes: usize,
    seed: u64,
) -> Result<Var> {
    require_gaussian(inst.noise)?;
    let ax = tape.linear(xhat, &inst.op, false)?;
    let r = tape.sub(ax, y)?;
    let fidelity = tape.sum_squares(r);
    let sigma = inst.noise.sigma;
    if sigma == 0.0 {
        return Ok(fidelity);
    }
    let eps = divergence_step(&inst.y);
    let div = mc_divergence(
        tape,
        |t, yp| {
            let x = model.forward_on_tape(t, yp, inst)?;
            t.linear(x, &inst.op, false)
        },
        y,
        ax,
        eps,
        probes,
        seed,
    )?;
    let div = tape.scale(div, 2.0 * sigma * sigma);
    tape.add(fidelity, div)
}

/// `‖A R(y) − y‖² + 2σ² div(A∘R)(y)`.
pub fn sure_loss<M: DifferentiableReconstructor + ?Sized>(
    tape: &mut Tape,
    model: &M,
    inst: &ProblemInstance,
    probes: usize,
    seed: u64,
) -> Result<Var> {
    require_gaussian(inst.noise)?;
    let y = tape.constant(inst.y.clone());
    let xhat = model.forward_on_tape(tape, y, inst)?;
    sure_terms(tape, model, inst, y, xhat, probes, seed)
}

/// Network input for measurement splitting: the kept entries of `y` under
/// the operator `diag(m) A`, both rescaled so the operator has unit norm.
#[derive(Clone, Debug)]
pub struct SplitInput {
    pub instance: ProblemInstance,
    /// 1 on kept measurement entries, 0 on held-out ones.
    pub mask: Tensor,
}

/// Draws a Bernoulli splitting mask, redrawing until it keeps something.
pub fn split_input(inst: &ProblemInstance, keep_prob: f64, seed: u64) -> Result<SplitInput> {
    if !(keep_prob > 0.0 && keep_prob <= 1.0) {
        return Err(Error::invalid(format!("keep probability {keep_prob} outside (0, 1]")));
    }
    let n = inst.y.numel();
    let mut mask = None;
    for attempt in 0..1000u64 {
        let mut rng = rng_from_seed(derive_seed(seed, attempt));
        let m: Vec<f64> = (0..n).map(|_| f64::from(u8::from(rng.random_bool(keep_prob)))).collect();
        if m.iter().any(|&v| v > 0.0) {
            mask = Some(m);
            break;
        }
    }
    let mask = Tensor::new(inst.y.shape().to_vec(), mask.ok_or_else(|| Error::invalid("splitting mask kept nothing"))?)?;
    let masked = make_diagonal(mask.clone()).compose(&inst.op)?;
    let norm = masked.norm();
    if norm == 0.0 {
        return Err(Error::invalid("kept measurements carry no signal"));
    }
    let s = 1.0 / norm;
    let y = inst.y.mul(&mask)?.scale(s);
    let noise = NoiseParams::new(inst.noise.sigma * s, inst.noise.gamma * s)?;
    let instance = ProblemInstance::new(masked.scaled(s), y, noise)?;
    Ok(SplitInput { instance, mask })
}

fn split_terms<M: DifferentiableReconstructor + ?Sized>(
    tape: &mut Tape,
    model: &M,
    inst: &ProblemInstance,
    keep_prob: f64,
    seed: u64,
) -> Result<Var> {
    let split = split_input(inst, keep_prob, seed)?;
    let held: Tensor = split.mask.map(|m| 1.0 - m);
    let y_in = tape.constant(split.instance.y.clone());
    let xhat = model.forward_on_tape(tape, y_in, &split.instance)?;
    let ax = tape.linear(xhat, &inst.op, false)?;
    let y = tape.constant(inst.y.clone());
    let r = tape.sub(ax, y)?;
    let r = tape.mul_const(r, Arc::new(held))?;
    Ok(tape.sum_squares(r))
}

/// `‖(1 − m) ⊙ (A R(m ⊙ y, diag(m) A) − y)‖²` for one drawn mask `m`.
pub fn split_loss<M: DifferentiableReconstructor + ?Sized>(
    tape: &mut Tape,
    model: &M,
    inst: &ProblemInstance,
    keep_prob: f64,
    seed: u64,
) -> Result<Var> {
    split_terms(tape, model, inst, keep_prob, seed)
}

fn ei_terms<M: DifferentiableReconstructor + ?Sized>(
    tape: &mut Tape,
    model: &M,
    inst: &ProblemInstance,
    xhat: Var,
    group: &TransformGroup,
    seed: u64,
) -> Result<Var> {
    let mut rng = rng_from_seed(seed);
    let t = group.sample(tape.shape(xhat), &mut rng)?;
    let xt = t.apply_on_tape(tape, xhat, false)?;
    let yt = tape.linear(xt, &inst.op, false)?;
    let x2 = model.forward_on_tape(tape, yt, inst)?;
    let d = tape.sub(xt, x2)?;
    Ok(tape.sum_squares(d))
}

/// `‖T x̂ − R(A T x̂, A)‖²` with `x̂ = R(y, A)` and one sampled transform `T`.
pub fn ei_loss<M: DifferentiableReconstructor + ?Sized>(
    tape: &mut Tape,
    model: &M,
    inst: &ProblemInstance,
    group: &TransformGroup,
    seed: u64,
) -> Result<Var> {
    let y = tape.constant(inst.y.clone());
    let xhat = model.forward_on_tape(tape, y, inst)?;
    ei_terms(tape, model, inst, xhat, group, seed)
}

fn moi_terms<M: DifferentiableReconstructor + ?Sized>(
    tape: &mut Tape,
    model: &M,
    xhat: Var,
    family: &[ProblemInstance],
    seed: u64,
) -> Result<Var> {
    if family.is_empty() {
        return Err(Error::invalid("operator family is empty"));
    }
    let mut rng = rng_from_seed(seed);
    let other = &family[rng.random_range(0..family.len())];
    let yr = tape.linear(xhat, &other.op, false)?;
    let x2 = model.forward_on_tape(tape, yr, other)?;
    let d = tape.sub(xhat, x2)?;
    Ok(tape.sum_squares(d))
}

/// `‖x̂ − R(A_r x̂, A_r)‖²` with `A_r` drawn from `family`. Family members
/// are problem instances whose operator and noise level are used; their
/// measurements are ignored.
pub fn moi_loss<M: DifferentiableReconstructor + ?Sized>(
    tape: &mut Tape,
    model: &M,
    inst: &ProblemInstance,
    family: &[ProblemInstance],
    seed: u64,
) -> Result<Var> {
    if family.is_empty() {
        return Err(Error::invalid("operator family is empty"));
    }
    let y = tape.constant(inst.y.clone());
    let xhat = model.forward_on_tape(tape, y, inst)?;
    moi_terms(tape, model, xhat, family, seed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum McLoss {
    Sure,
    Split,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NullLoss {
    Ei,
    Moi,
    None,
}

/// How the returned checkpoint is chosen among evaluated ones.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Lowest self-supervised objective at a fixed seed.
    SelfSupervised,
    /// Highest PSNR against ground truth; evaluation only.
    Oracle,
    /// The final iterate.
    Last,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub mc_loss: McLoss,
    pub null_loss: NullLoss,
    pub omega: f64,
    pub probes: usize,
    pub split_keep_prob: f64,
    pub group: TransformGroup,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    pub selection: Selection,
    pub eval_every: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            mc_loss: McLoss::Sure,
            null_loss: NullLoss::Ei,
            omega: 0.1,
            probes: 1,
            split_keep_prob: 0.9,
            group: TransformGroup::default(),
            steps: 200,
            lr: 1e-4,
            seed: 0,
            selection: Selection::SelfSupervised,
            eval_every: 10,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self, data: &[ProblemInstance], family: &[ProblemInstance]) -> Result<()> {
        if !(self.omega >= 0.0) || self.probes == 0 || self.eval_every == 0 || !(self.lr >= 0.0) {
            return Err(Error::invalid("omega and lr must be nonnegative; probes and eval_every positive"));
        }
        if data.is_empty() {
            return Err(Error::invalid("no measurements to finetune on"));
        }
        if self.mc_loss == McLoss::Sure {
            for inst in data {
                require_gaussian(inst.noise)?;
            }
        }
        if self.null_loss == NullLoss::Moi && family.is_empty() {
            return Err(Error::invalid("MOI needs a nonempty operator family"));
        }
        if self.selection == Selection::Oracle && data.iter().any(|d| d.x.is_none()) {
            return Err(Error::invalid("oracle selection needs ground truth"));
        }
        Ok(())
    }
}

/// `L_MC + ω L_NULL` for one measurement.
pub fn finetune_objective<M: DifferentiableReconstructor + ?Sized>(
    tape: &mut Tape,
    model: &M,
    inst: &ProblemInstance,
    family: &[ProblemInstance],
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<Var> {
    let y = tape.constant(inst.y.clone());
    let needs_full = cfg.mc_loss == McLoss::Sure || cfg.null_loss != NullLoss::None;
    let xhat = if needs_full {
        Some(model.forward_on_tape(tape, y, inst)?)
    } else {
        None
    };
    let mc = match cfg.mc_loss {
        McLoss::Sure => sure_terms(tape, model, inst, y, xhat.expect("computed"), cfg.probes, derive_seed(seed, 1))?,
        McLoss::Split => split_terms(tape, model, inst, cfg.split_keep_prob, derive_seed(seed, 1))?,
    };
    let null = match cfg.null_loss {
        NullLoss::None => return Ok(mc),
        NullLoss::Ei => ei_terms(tape, model, inst, xhat.expect("computed"), &cfg.group, derive_seed(seed, 2))?,
        NullLoss::Moi => moi_terms(tape, model, xhat.expect("computed"), family, derive_seed(seed, 3))?,
    };
    let null = tape.scale(null, cfg.omega);
    tape.add(mc, null)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FinetuneReport {
    /// Objective summed over measurements, per step.
    pub losses: Vec<f64>,
    /// `(steps taken, selection score)`; lower is better.
    pub scores: Vec<(usize, f64)>,
    /// Steps taken by the returned parameters.
    pub selected_step: usize,
}

fn objective_value<M: DifferentiableReconstructor>(
    model: &M,
    data: &[ProblemInstance],
    family: &[ProblemInstance],
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<f64> {
    let values: Vec<f64> = data
        .par_iter()
        .enumerate()
        .map(|(i, inst)| {
            let mut tape = Tape::new();
            let l = finetune_objective(&mut tape, model, inst, family, cfg, derive_seed(seed, i as u64))?;
            Ok(tape.value(l).item())
        })
        .collect::<Result<_>>()?;
    Ok(values.iter().sum())
}

fn selection_score<M: DifferentiableReconstructor>(
    model: &M,
    data: &[ProblemInstance],
    family: &[ProblemInstance],
    cfg: &FinetuneConfig,
) -> Result<f64> {
    match cfg.selection {
        Selection::SelfSupervised => objective_value(model, data, family, cfg, derive_seed(cfg.seed, u64::MAX)),
        Selection::Oracle => {
            let scores: Vec<f64> = data
                .par_iter()
                .map(|inst| psnr(&model.reconstruct(&inst.y, inst)?, inst.truth()?, 1.0))
                .collect::<Result<_>>()?;
            Ok(-scores.iter().sum::<f64>() / scores.len() as f64)
        }
        Selection::Last => Ok(0.0),
    }
}

/// Adam on the self-supervised objective over `data`; returns with the
/// parameters of the selected checkpoint loaded.
pub fn finetune<M: DifferentiableReconstructor>(
    model: &mut M,
    data: &[ProblemInstance],
    family: &[ProblemInstance],
    cfg: &FinetuneConfig,
) -> Result<FinetuneReport> {
    cfg.validate(data, family)?;
    let mut report = FinetuneReport::default();
    let track = cfg.selection != Selection::Last;
    let mut best: Option<(f64, ParamStore, usize)> = None;
    if track {
        let s = selection_score(model, data, family, cfg)?;
        report.scores.push((0, s));
        best = Some((s, model.params().clone(), 0));
    }
    let adam = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    for step in 0..cfg.steps {
        let step_seed = derive_seed(cfg.seed, step as u64);
        let shared: &M = model;
        let results: Vec<(f64, Vec<(String, Tensor)>)> = data
            .par_iter()
            .enumerate()
            .map(|(i, inst)| {
                let mut tape = Tape::new();
                let l = finetune_objective(&mut tape, shared, inst, family, cfg, derive_seed(step_seed, i as u64))?;
                let value = tape.value(l).item();
                if !value.is_finite() {
                    return Ok((value, Vec::new()));
                }
                let g = tape.backward(l)?;
                let grads = tape
                    .bindings()
                    .iter()
                    .filter_map(|(n, v)| g.get(*v).map(|t| (n.clone(), t.clone())))
                    .collect();
                Ok((value, grads))
            })
            .collect::<Result<_>>()?;
        let total: f64 = results.iter().map(|r| r.0).sum();
        if !total.is_finite() {
            return Err(Error::Diverged { step, loss: total });
        }
        model.params_mut().zero_grad();
        for (_, grads) in &results {
            for (n, g) in grads {
                model.params_mut().add_grad(n, g)?;
            }
        }
        model.params_mut().adam_step(&adam)?;
        report.losses.push(total);
        let taken = step + 1;
        if track && (taken % cfg.eval_every == 0 || taken == cfg.steps) {
            let s = selection_score(model, data, family, cfg)?;
            report.scores.push((taken, s));
            if best.as_ref().is_none_or(|(b, _, _)| s < *b) {
                best = Some((s, model.params().clone(), taken));
            }
        }
        log::debug!("finetune step {taken}: objective {total:.6e}");
    }
    report.selected_step = cfg.steps;
    if let Some((_, params, step)) = best {
        let values: Vec<(String, Tensor)> = params.iter().map(|p| (p.name.clone(), p.value.clone())).collect();
        for (n, v) in values {
            model.params_mut().set_value(&n, v)?;
        }
        report.selected_step = step;
    }
    Ok(report)
}
