//! Multi-task supervised training.
//!
//! Each step draws one batch per task, sums the per-task losses
//! `ω · ‖R(y) − x‖₁` with `ω = ‖Aᵀy‖₂ / σ`, and takes one Adam step.
//! Instances are simulated and differentiated in parallel, each on its own
//! tape, and gradients are summed in a fixed order, so results do not
//! depend on the number of threads.

use std::collections::HashMap;
use std::io::Write as _;
use std::path::Path;
use std::sync::{Arc, Mutex};

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamConfig, Tape, Var};
use crate::data::{random_patch, Dataset, DatasetSpec};
use crate::error::{Error, Result};
use crate::instance::ProblemInstance;
use crate::metrics::psnr;
use crate::model::{DifferentiableReconstructor, SUPPORTED_CHANNELS};
use crate::noise::{sample_noise, sample_params, NoiseParams, NoiseRange};
use crate::operators::{DownsampleFilter, KernelSpec, OperatorSpec};
use crate::rng::{derive_seed, rng_from_seed, Rng};
use crate::tensor::Tensor;

/// Stand-in for σ in the loss weight of noiseless tasks.
pub const SIGMA_FLOOR: f64 = 1e-3;

fn default_filter() -> DownsampleFilter {
    DownsampleFilter::Bicubic
}

/// Recipe for the forward operator of a task, independent of image size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OperatorFactory {
    Denoising,
    /// Bernoulli masks with keep probability drawn uniformly per sample.
    Inpainting {
        keep_prob: (f64, f64),
        #[serde(default)]
        per_channel: bool,
    },
    /// A fixed Gaussian kernel; `size` defaults to the odd integer above 6σ.
    GaussianBlur {
        sigma: f64,
        #[serde(default)]
        size: Option<usize>,
    },
    /// A fresh random motion kernel per sample.
    MotionBlur {
        length_scale: f64,
        amplitude: f64,
        size: usize,
    },
    /// A fresh Cartesian mask per sample.
    Mri {
        acceleration: usize,
    },
    MulticoilMri {
        coils: usize,
        acceleration: usize,
    },
    Ct {
        angles: usize,
    },
    SuperResolution {
        factor: usize,
        #[serde(default = "default_filter")]
        filter: DownsampleFilter,
    },
    /// One fixed random subsampled sine transform.
    CompressedSensing {
        factor: usize,
        #[serde(default)]
        seed: u64,
    },
    Demosaic,
}

impl OperatorFactory {
    /// Whether every draw yields a new operator.
    pub fn is_randomized(&self) -> bool {
        matches!(
            self,
            OperatorFactory::Inpainting { .. } | OperatorFactory::MotionBlur { .. } | OperatorFactory::Mri { .. } | OperatorFactory::MulticoilMri { .. }
        )
    }

    pub fn draw(&self, shape: &[usize], rng: &mut Rng) -> Result<OperatorSpec> {
        let shape = shape.to_vec();
        Ok(match self {
            OperatorFactory::Denoising => OperatorSpec::Identity { shape },
            OperatorFactory::Inpainting { keep_prob, per_channel } => {
                let (lo, hi) = *keep_prob;
                if !(0.0 < lo && lo <= hi && hi <= 1.0) {
                    return Err(Error::invalid(format!("invalid keep probability range [{lo}, {hi}]")));
                }
                let p = if lo == hi { lo } else { rng.random_range(lo..hi) };
                OperatorSpec::Inpainting {
                    shape,
                    keep_prob: Some(p),
                    per_channel: *per_channel,
                    seed: rng.random(),
                    mask: None,
                }
            }
            OperatorFactory::GaussianBlur { sigma, size } => {
                let size = size.unwrap_or_else(|| 2 * (3.0 * sigma).ceil() as usize + 1);
                OperatorSpec::Blur {
                    shape,
                    kernel: KernelSpec::Gaussian { sigma: *sigma, size },
                    normalize: true,
                }
            }
            OperatorFactory::MotionBlur {
                length_scale,
                amplitude,
                size,
            } => OperatorSpec::Blur {
                shape,
                kernel: KernelSpec::Motion {
                    length_scale: *length_scale,
                    amplitude: *amplitude,
                    size: *size,
                    seed: rng.random(),
                },
                normalize: true,
            },
            OperatorFactory::Mri { acceleration } => OperatorSpec::Mri {
                shape,
                acceleration: Some(*acceleration),
                seed: rng.random(),
                mask: None,
            },
            OperatorFactory::MulticoilMri { coils, acceleration } => OperatorSpec::MulticoilMri {
                shape,
                coils: *coils,
                acceleration: Some(*acceleration),
                seed: rng.random(),
                mask: None,
                smaps: None,
            },
            OperatorFactory::Ct { angles } => OperatorSpec::Ct {
                shape,
                angles: *angles,
                normalize: true,
            },
            OperatorFactory::SuperResolution { factor, filter } => OperatorSpec::Downsampling {
                shape,
                factor: *factor,
                filter: *filter,
                normalize: true,
            },
            OperatorFactory::CompressedSensing { factor, seed } => OperatorSpec::CompressedSensing {
                shape,
                factor: *factor,
                seed: *seed,
                signs: None,
                keep: None,
            },
            OperatorFactory::Demosaic => OperatorSpec::Demosaic { shape },
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub operator: OperatorFactory,
    pub noise: NoiseRange,
    pub channels: usize,
    pub dataset: DatasetSpec,
}

/// Names accepted by [`TaskSpec::preset`].
pub const PRESETS: [&str; 13] = [
    "denoising",
    "inpainting",
    "gaussian-blur-easy",
    "gaussian-blur-medium",
    "gaussian-blur-hard",
    "motion-blur",
    "sr2",
    "sr4",
    "mri4",
    "mri8",
    "ct",
    "cs",
    "demosaic",
];

impl TaskSpec {
    /// Operator and noise settings of a named task. Blur kernels are sized
    /// for desk-scale patches rather than 31×31.
    pub fn preset(name: &str, channels: usize, dataset: DatasetSpec) -> Result<Self> {
        let g = |lo, hi| NoiseRange::gaussian(lo, hi);
        let (operator, noise) = match name {
            "denoising" => (
                OperatorFactory::Denoising,
                NoiseRange {
                    sigma: (0.001, 0.2),
                    gamma: Some((0.01, 1.0)),
                },
            ),
            "inpainting" => (
                OperatorFactory::Inpainting {
                    keep_prob: (0.3, 0.9),
                    per_channel: false,
                },
                NoiseRange {
                    sigma: (0.01, 0.2),
                    gamma: Some((0.01, 1.0)),
                },
            ),
            "gaussian-blur-easy" => (OperatorFactory::GaussianBlur { sigma: 1.0, size: None }, g(0.01, 0.01)),
            "gaussian-blur-medium" => (OperatorFactory::GaussianBlur { sigma: 2.0, size: None }, g(0.05, 0.05)),
            "gaussian-blur-hard" => (OperatorFactory::GaussianBlur { sigma: 4.0, size: None }, g(0.1, 0.1)),
            "motion-blur" => (
                OperatorFactory::MotionBlur {
                    length_scale: 0.6,
                    amplitude: 0.5,
                    size: 9,
                },
                g(0.001, 0.2),
            ),
            "sr2" | "sr4" => (
                OperatorFactory::SuperResolution {
                    factor: if name == "sr2" { 2 } else { 4 },
                    filter: DownsampleFilter::Bicubic,
                },
                g(0.001, 0.01),
            ),
            "mri4" | "mri8" => (
                OperatorFactory::Mri {
                    acceleration: if name == "mri4" { 4 } else { 8 },
                },
                g(0.001, 0.1),
            ),
            "ct" => (OperatorFactory::Ct { angles: 10 }, g(0.01, 0.01)),
            "cs" => (OperatorFactory::CompressedSensing { factor: 4, seed: 0 }, g(0.05, 0.05)),
            "demosaic" => (OperatorFactory::Demosaic, g(0.01, 0.1)),
            _ => {
                return Err(Error::invalid(format!(
                    "unknown task '{name}', expected one of {}",
                    PRESETS.join(", ")
                )))
            }
        };
        let spec = TaskSpec {
            name: name.to_string(),
            operator,
            noise,
            channels,
            dataset,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !SUPPORTED_CHANNELS.contains(&self.channels) {
            return Err(Error::UnsupportedChannels(self.channels));
        }
        let (lo, hi) = self.noise.sigma;
        let bad = |lo: f64, hi: f64| !(lo >= 0.0 && lo <= hi && hi.is_finite());
        if bad(lo, hi) || self.noise.gamma.is_some_and(|(a, b)| bad(a, b)) {
            return Err(Error::invalid(format!("task '{}' has an invalid noise range", self.name)));
        }
        match (&self.operator, self.channels) {
            (OperatorFactory::Mri { .. } | OperatorFactory::MulticoilMri { .. }, c) if c != 2 => {
                Err(Error::invalid(format!("MRI task '{}' needs 2 channels", self.name)))
            }
            (OperatorFactory::Demosaic, c) if c != 3 => {
                Err(Error::invalid(format!("demosaicing task '{}' needs 3 channels", self.name)))
            }
            _ => Ok(()),
        }
    }
}

/// A task with its images loaded and its deterministic operators cached.
pub struct LoadedTask {
    pub spec: TaskSpec,
    pub dataset: Dataset,
    templates: Mutex<HashMap<String, Arc<ProblemInstance>>>,
}

impl LoadedTask {
    pub fn new(spec: TaskSpec, dataset: Dataset) -> Result<Self> {
        spec.validate()?;
        if dataset.is_empty() {
            return Err(Error::invalid(format!("task '{}' has an empty dataset", spec.name)));
        }
        if let Some(bad) = dataset.images().iter().find(|im| im.shape()[0] != spec.channels) {
            return Err(Error::invalid(format!(
                "task '{}' expects {} channels, dataset image has shape {:?}",
                spec.name,
                spec.channels,
                bad.shape()
            )));
        }
        Ok(LoadedTask {
            spec,
            dataset,
            templates: Mutex::new(HashMap::new()),
        })
    }

    pub fn load(spec: TaskSpec, base: &Path) -> Result<Self> {
        let dataset = spec.dataset.load(base)?;
        Self::new(spec, dataset)
    }

    fn template(&self, op_spec: &OperatorSpec) -> Result<Arc<ProblemInstance>> {
        let build = || -> Result<ProblemInstance> {
            let op = op_spec.build(Path::new("."))?;
            let y = Tensor::zeros(op.range_shape());
            Ok(ProblemInstance::new(op, y, NoiseParams::default())?.with_spec(op_spec.clone(), 0))
        };
        if self.spec.operator.is_randomized() {
            return Ok(Arc::new(build()?));
        }
        let key = serde_json::to_string(op_spec)?;
        if let Some(t) = self.templates.lock().expect("template cache").get(&key) {
            return Ok(t.clone());
        }
        let t = Arc::new(build()?);
        self.templates.lock().expect("template cache").insert(key, t.clone());
        Ok(t)
    }

    /// One simulated training instance from its own seed.
    pub fn sample(&self, patch: usize, seed: u64) -> Result<ProblemInstance> {
        let mut rng = rng_from_seed(seed);
        let idx = rng.random_range(0..self.dataset.len());
        let x = random_patch(self.dataset.get(idx), patch, &mut rng)?;
        let noise = sample_params(&self.spec.noise, &mut rng)?;
        let op_spec = self.spec.operator.draw(x.shape(), &mut rng)?;
        let template = self.template(&op_spec)?;
        let noise_seed: u64 = rng.random();
        let clean = template.op.apply(&x)?;
        let y = sample_noise(&clean, noise, noise_seed)?.y;
        let mut inst = template.with_measurement(y)?.with_truth(x)?;
        inst.noise = noise;
        inst.seed = noise_seed;
        Ok(inst)
    }
}

/// `batch` instances of a task, deterministic in `seed`.
pub fn sample_batch(task: &LoadedTask, batch: usize, patch: usize, seed: u64) -> Result<Vec<ProblemInstance>> {
    (0..batch)
        .into_par_iter()
        .map(|i| task.sample(patch, derive_seed(seed, i as u64)))
        .collect()
}

/// `ω = ‖Aᵀy‖₂ / σ`, with σ floored at [`SIGMA_FLOOR`].
pub fn loss_weight(inst: &ProblemInstance) -> f64 {
    let aty = inst.op.adjoint_slice(inst.y.data());
    let norm = aty.iter().map(|v| v * v).sum::<f64>().sqrt();
    norm / inst.noise.sigma.max(SIGMA_FLOOR)
}

/// `ω ‖R(y) − x‖₁` on `tape`.
pub fn task_loss<M: DifferentiableReconstructor + ?Sized>(tape: &mut Tape, model: &M, inst: &ProblemInstance) -> Result<Var> {
    let x = inst.truth()?.clone();
    let y = tape.constant(inst.y.clone());
    let out = model.forward_on_tape(tape, y, inst)?;
    let target = tape.constant(x);
    let diff = tape.sub(out, target)?;
    let l1 = tape.l1_norm(diff);
    Ok(tape.scale(l1, loss_weight(inst)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_per_task: usize,
    pub steps: usize,
    pub lr: f64,
    /// Step from which the learning rate is divided by 10; defaults to 90%
    /// of `steps`.
    pub lr_decay_step: Option<usize>,
    pub patch: usize,
    pub seed: u64,
    pub log_every: usize,
    pub checkpoint_every: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_per_task: 4,
            steps: 2000,
            lr: 1e-3,
            lr_decay_step: None,
            patch: 32,
            seed: 0,
            log_every: 100,
            checkpoint_every: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_per_task == 0 || self.patch == 0 || self.log_every == 0 || !(self.lr >= 0.0) {
            return Err(Error::invalid("batch size, patch size and log interval must be positive"));
        }
        if self.checkpoint_every == Some(0) {
            return Err(Error::invalid("checkpoint interval must be positive"));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        let decay = self.lr_decay_step.unwrap_or(self.steps * 9 / 10);
        if step >= decay && decay > 0 {
            self.lr / 10.0
        } else {
            self.lr
        }
    }
}

/// Batch means for one task at one step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub task: String,
    pub loss: f64,
    pub psnr: f64,
    pub baseline_psnr: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub records: Vec<StepRecord>,
    pub steps: usize,
}

impl TrainReport {
    /// Mean train PSNR of `task` over the last `window` logged steps.
    pub fn final_psnr(&self, task: &str, window: usize) -> Option<(f64, f64)> {
        let rows: Vec<&StepRecord> = self.records.iter().filter(|r| r.task == task).collect();
        let tail = &rows[rows.len().saturating_sub(window.max(1))..];
        if tail.is_empty() {
            return None;
        }
        let n = tail.len() as f64;
        Some((
            tail.iter().map(|r| r.psnr).sum::<f64>() / n,
            tail.iter().map(|r| r.baseline_psnr).sum::<f64>() / n,
        ))
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "step,task,loss,psnr")?;
        for r in &self.records {
            writeln!(f, "{},{},{:.9e},{:.6}", r.step, r.task, r.loss, r.psnr)?;
        }
        f.flush()?;
        Ok(())
    }
}

struct InstanceResult {
    task: usize,
    loss: f64,
    psnr: f64,
    baseline: f64,
    grads: Vec<(String, Tensor)>,
}

fn differentiate<M: DifferentiableReconstructor>(model: &M, task: usize, inst: &ProblemInstance) -> Result<InstanceResult> {
    let mut tape = Tape::new();
    let y = tape.constant(inst.y.clone());
    let out = model.forward_on_tape(&mut tape, y, inst)?;
    let x = inst.truth()?;
    let target = tape.constant(x.clone());
    let diff = tape.sub(out, target)?;
    let l1 = tape.l1_norm(diff);
    let loss = tape.scale(l1, loss_weight(inst));
    let value = tape.value(loss).item();
    let recon_psnr = psnr(tape.value(out), x, 1.0)?;
    let baseline = psnr(&inst.op.adjoint(&inst.y)?, x, 1.0)?;
    let grads = if value.is_finite() {
        let g = tape.backward(loss)?;
        tape.bindings()
            .iter()
            .filter_map(|(name, v)| g.get(*v).map(|t| (name.clone(), t.clone())))
            .collect()
    } else {
        Vec::new()
    };
    Ok(InstanceResult {
        task,
        loss: value,
        psnr: recon_psnr,
        baseline,
        grads,
    })
}

/// Sum of per-task losses for one step's batches, with gradients
/// accumulated into the model. Returns per-task batch means.
fn accumulate_step<M: DifferentiableReconstructor>(
    model: &mut M,
    tasks: &[LoadedTask],
    cfg: &TrainConfig,
    step: usize,
) -> Result<Vec<(f64, f64, f64)>> {
    let step_seed = derive_seed(cfg.seed, step as u64);
    let mut jobs = Vec::with_capacity(tasks.len() * cfg.batch_per_task);
    for (t, task) in tasks.iter().enumerate() {
        for inst in sample_batch(task, cfg.batch_per_task, cfg.patch, derive_seed(step_seed, t as u64))? {
            jobs.push((t, inst));
        }
    }
    let shared: &M = model;
    let results: Vec<InstanceResult> = jobs
        .par_iter()
        .map(|(t, inst)| differentiate(shared, *t, inst))
        .collect::<Result<_>>()?;
    let mut stats = vec![(0.0, 0.0, 0.0); tasks.len()];
    let mut total = 0.0;
    model.params_mut().zero_grad();
    for r in &results {
        total += r.loss;
        let s = &mut stats[r.task];
        s.0 += r.loss / cfg.batch_per_task as f64;
        s.1 += r.psnr / cfg.batch_per_task as f64;
        s.2 += r.baseline / cfg.batch_per_task as f64;
        for (name, g) in &r.grads {
            model.params_mut().add_grad(name, g)?;
        }
    }
    if !total.is_finite() {
        return Err(Error::Diverged { step, loss: total });
    }
    Ok(stats)
}

pub fn train<M: DifferentiableReconstructor>(model: &mut M, tasks: &[LoadedTask], cfg: &TrainConfig) -> Result<TrainReport> {
    train_with(model, tasks, cfg, |_, _| Ok(()))
}

/// Training loop; `checkpoint(step, model)` runs every
/// `cfg.checkpoint_every` steps and after the last one.
pub fn train_with<M, F>(model: &mut M, tasks: &[LoadedTask], cfg: &TrainConfig, mut checkpoint: F) -> Result<TrainReport>
where
    M: DifferentiableReconstructor,
    F: FnMut(usize, &M) -> Result<()>,
{
    cfg.validate()?;
    if tasks.is_empty() {
        return Err(Error::invalid("at least one task required"));
    }
    let mut report = TrainReport::default();
    for step in 0..cfg.steps {
        let stats = accumulate_step(model, tasks, cfg, step)?;
        let adam = AdamConfig {
            lr: cfg.lr_at(step),
            ..AdamConfig::default()
        };
        model.params_mut().adam_step(&adam)?;
        for (task, &(loss, p, b)) in tasks.iter().zip(&stats) {
            report.records.push(StepRecord {
                step,
                task: task.spec.name.clone(),
                loss,
                psnr: p,
                baseline_psnr: b,
            });
        }
        if step % cfg.log_every == 0 || step + 1 == cfg.steps {
            for (task, &(loss, p, b)) in tasks.iter().zip(&stats) {
                log::info!(
                    "step {step} task {}: loss {loss:.4e} psnr {p:.2} dB (A^T y {b:.2} dB)",
                    task.spec.name
                );
            }
        }
        if cfg.checkpoint_every.is_some_and(|every| (step + 1) % every == 0) {
            checkpoint(step + 1, model)?;
        }
        report.steps = step + 1;
    }
    checkpoint(report.steps, model)?;
    Ok(report)
}

/// Mean reconstruction and `Aᵀy` PSNR of `model` on a fixed batch.
pub fn evaluate_task<M: DifferentiableReconstructor>(model: &M, task: &LoadedTask, count: usize, patch: usize, seed: u64) -> Result<(f64, f64)> {
    let batch = sample_batch(task, count, patch, seed)?;
    let scores: Vec<(f64, f64)> = batch
        .par_iter()
        .map(|inst| {
            let x = inst.truth()?;
            let xhat = crate::model::Reconstructor::reconstruct(model, &inst.y, inst)?;
            Ok((psnr(&xhat, x, 1.0)?, psnr(&inst.op.adjoint(&inst.y)?, x, 1.0)?))
        })
        .collect::<Result<_>>()?;
    let n = scores.len().max(1) as f64;
    Ok((
        scores.iter().map(|s| s.0).sum::<f64>() / n,
        scores.iter().map(|s| s.1).sum::<f64>() / n,
    ))
}
