//! The reconstruction network.
//!
//! ```text
//! y ──► prox (unrolled CG) ──► x₀ ──► pad ──► ⊕ noise maps ──► in conv
//!                               │                                  │
//!                               │        encoder: KSM, res blocks, stride-2 down   (per scale)
//!                               │        decoder: 2×2 up, skip, res blocks, KSM
//!                               │                                  │
//!                               └────────────► + ◄── crop ◄── out conv
//! ```
//!
//! Every convolution is bias-free and the only nonlinearity is ReLU, so the
//! network is positively homogeneous in `(y, σ, γ)`. Weights are shared
//! across modalities except for the per-channel-count heads: the input and
//! output convolutions and the KSM decode, combine and encode convolutions.

mod ksm;

use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{PaddingMode, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::instance::ProblemInstance;
use crate::io::{DType, TnsrFile};
use crate::noise::NoiseParams;
use crate::operators::{make_coarse_on_grid, CoarseOperator, OperatorHandle};
use crate::rng::{derive_seed, rng_from_seed};
use crate::solvers::{prox_on_tape, NET_CG_ITERS, NET_CG_TOL};
use crate::tensor::Tensor;

pub use ksm::{build_ksm_stack, KsmStack};
use ksm::{backproject_on_tape, stack_on_tape};

pub const SUPPORTED_CHANNELS: [usize; 3] = [1, 2, 3];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RamConfig {
    pub num_scales: usize,
    pub base_width: usize,
    pub blocks_per_scale: usize,
    pub krylov_order: usize,
    pub heads: Vec<usize>,
    pub cg_iters: usize,
    pub cg_tol: f64,
    /// Side of the KSM combination kernel: 3, or 1 for the span diagnostic.
    pub ksm_kernel: usize,
    pub seed: u64,
}

impl Default for RamConfig {
    fn default() -> Self {
        RamConfig {
            num_scales: 3,
            base_width: 32,
            blocks_per_scale: 2,
            krylov_order: 3,
            heads: SUPPORTED_CHANNELS.to_vec(),
            cg_iters: NET_CG_ITERS,
            cg_tol: NET_CG_TOL,
            ksm_kernel: 3,
            seed: 0,
        }
    }
}

impl RamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_scales < 1 {
            return Err(Error::invalid("num_scales must be at least 1"));
        }
        if self.base_width < 4 {
            return Err(Error::invalid("base_width must be at least 4"));
        }
        if self.ksm_kernel != 1 && self.ksm_kernel != 3 {
            return Err(Error::invalid("ksm_kernel must be 1 or 3"));
        }
        if self.heads.is_empty() {
            return Err(Error::invalid("at least one head required"));
        }
        for (i, &c) in self.heads.iter().enumerate() {
            if !SUPPORTED_CHANNELS.contains(&c) || self.heads[..i].contains(&c) {
                return Err(Error::UnsupportedChannels(c));
            }
        }
        Ok(())
    }

    pub fn width(&self, scale: usize) -> usize {
        self.base_width << scale
    }

    /// Spatial multiple the padded working grid must satisfy.
    pub fn grid_multiple(&self) -> usize {
        1 << self.num_scales
    }
}

/// Coarse operators of every scale for one forward operator, on the padded
/// working grid.
#[derive(Clone, Debug)]
pub struct Pyramid {
    grid: Vec<usize>,
    levels: Vec<CoarseOperator>,
}

impl Pyramid {
    pub fn new(op: &OperatorHandle, num_scales: usize) -> Result<Self> {
        let dom = op.domain_shape();
        let m = 1usize << num_scales;
        let grid = vec![dom[0], dom[1].div_ceil(m) * m, dom[2].div_ceil(m) * m];
        let levels = (0..num_scales)
            .map(|s| make_coarse_on_grid(op, s, &grid))
            .collect::<Result<_>>()?;
        Ok(Pyramid { grid, levels })
    }

    pub fn grid(&self) -> &[usize] {
        &self.grid
    }

    pub fn level(&self, scale: usize) -> &CoarseOperator {
        &self.levels[scale]
    }

    pub fn num_scales(&self) -> usize {
        self.levels.len()
    }
}

/// Constant `(2, H, W)` maps holding σ and γ.
pub fn noise_maps(sigma: f64, gamma: f64, height: usize, width: usize) -> Tensor {
    let plane = height * width;
    Tensor::from_fn(vec![2, height, width], |i| if i < plane { sigma } else { gamma })
}

/// Anything that maps a measurement of a problem instance to an image.
pub trait Reconstructor: Sync {
    /// Reconstructs `y`, interpreted under the operator and noise of `inst`.
    fn reconstruct(&self, y: &Tensor, inst: &ProblemInstance) -> Result<Tensor>;
}

/// A reconstructor with trainable parameters whose forward pass can be
/// recorded on a tape.
pub trait DifferentiableReconstructor: Sync {
    /// Records the reconstruction of the node `y`; operator and noise level
    /// come from `inst`, its stored measurement is ignored.
    fn forward_on_tape(&self, tape: &mut Tape, y: Var, inst: &ProblemInstance) -> Result<Var>;

    fn params(&self) -> &ParamStore;

    fn params_mut(&mut self) -> &mut ParamStore;
}

impl<T: DifferentiableReconstructor> Reconstructor for T {
    fn reconstruct(&self, y: &Tensor, inst: &ProblemInstance) -> Result<Tensor> {
        let mut tape = Tape::new();
        let yv = tape.constant(y.clone());
        let out = self.forward_on_tape(&mut tape, yv, inst)?;
        let x = tape.value(out).clone();
        x.check_finite("reconstruction")?;
        Ok(x)
    }
}

#[derive(Clone, Debug)]
pub struct RamModel {
    config: RamConfig,
    params: ParamStore,
}

fn he_normal(shape: Vec<usize>, gain: f64, seed: u64) -> Tensor {
    let fan_in: usize = shape[1..].iter().product();
    he_normal_fan(shape, fan_in, gain, seed)
}

fn he_normal_fan(shape: Vec<usize>, fan_in: usize, gain: f64, seed: u64) -> Tensor {
    let std = gain * (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("positive std");
    let mut rng = rng_from_seed(seed);
    Tensor::from_fn(shape, |_| dist.sample(&mut rng))
}

fn ksm_tags(scales: usize) -> Vec<String> {
    let mut tags: Vec<String> = (0..scales).map(|s| format!("enc{s}")).collect();
    tags.extend((0..scales - 1).map(|s| format!("dec{s}")));
    tags
}

impl RamModel {
    /// Fresh model: He-normal weights, a zero output convolution and η = 1.
    pub fn new(config: RamConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut counter = 0u64;
        let mut next_seed = || {
            counter += 1;
            derive_seed(config.seed, counter)
        };
        params.insert("eta", Tensor::scalar(1.0))?;
        let k = config.krylov_order;
        for &c in &config.heads {
            let w0 = config.width(0);
            params.insert(format!("head{c}.in"), he_normal(vec![w0, c + 2, 3, 3], 1.0, next_seed()))?;
            params.insert(format!("head{c}.out"), Tensor::zeros(vec![c, w0, 3, 3]))?;
            for tag in ksm_tags(config.num_scales) {
                let s: usize = tag[3..].parse().expect("numeric scale");
                let ws = config.width(s);
                let kk = config.ksm_kernel;
                let base = format!("head{c}.ksm.{tag}");
                params.insert(format!("{base}.decode"), he_normal(vec![c, ws, 3, 3], 0.5, next_seed()))?;
                params.insert(
                    format!("{base}.combine"),
                    he_normal(vec![c, 2 * (k + 1) * c, kk, kk], 0.5, next_seed()),
                )?;
                params.insert(format!("{base}.encode"), he_normal(vec![ws, c, 3, 3], 0.1, next_seed()))?;
            }
        }
        for s in 0..config.num_scales {
            let ws = config.width(s);
            let families: &[&str] = if s + 1 < config.num_scales { &["enc", "dec"] } else { &["enc"] };
            for fam in families {
                for b in 0..config.blocks_per_scale {
                    let base = format!("trunk.{fam}{s}.block{b}");
                    params.insert(format!("{base}.conv1"), he_normal(vec![ws, ws, 3, 3], 1.0, next_seed()))?;
                    params.insert(format!("{base}.conv2"), he_normal(vec![ws, ws, 3, 3], 0.1, next_seed()))?;
                }
            }
            if s + 1 < config.num_scales {
                let wn = config.width(s + 1);
                params.insert(format!("trunk.down{s}"), he_normal(vec![wn, ws, 2, 2], 1.0, next_seed()))?;
                // transposed conv with stride = kernel: each output sees one tap per input channel
                let up = he_normal_fan(vec![wn, ws, 2, 2], wn, 1.0, next_seed());
                params.insert(format!("trunk.up{s}"), up)?;
            }
        }
        Ok(RamModel { config, params })
    }

    pub fn config(&self) -> &RamConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn eta(&self) -> f64 {
        self.params.value("eta").map(|t| t.item()).unwrap_or(1.0)
    }

    /// Parameters shared by every head (trunk convolutions and η).
    pub fn shared_names(&self) -> Vec<String> {
        self.params
            .names()
            .filter(|n| !n.starts_with("head"))
            .map(str::to_string)
            .collect()
    }

    pub fn head_names(&self, channels: usize) -> Vec<String> {
        let prefix = format!("head{channels}.");
        self.params
            .names()
            .filter(|n| n.starts_with(&prefix))
            .map(str::to_string)
            .collect()
    }

    /// View of the network with the head for `channels` active.
    pub fn select_head(&self, channels: usize) -> Result<HeadView<'_>> {
        if !self.config.heads.contains(&channels) {
            return Err(Error::UnsupportedChannels(channels));
        }
        Ok(HeadView { model: self, channels })
    }

    fn head_for(&self, op: &OperatorHandle) -> Result<HeadView<'_>> {
        self.select_head(op.domain_shape()[0])
    }

    pub fn pyramid(&self, op: &OperatorHandle) -> Result<Pyramid> {
        Pyramid::new(op, self.config.num_scales)
    }

    /// `R(y, A, σ, γ)`.
    pub fn forward(&self, y: &Tensor, op: &OperatorHandle, noise: NoiseParams) -> Result<Tensor> {
        self.forward_with(y, op, noise, &self.pyramid(op)?)
    }

    pub fn forward_with(&self, y: &Tensor, op: &OperatorHandle, noise: NoiseParams, pyramid: &Pyramid) -> Result<Tensor> {
        self.head_for(op)?.forward_with(y, op, noise, pyramid)
    }

    /// Records the forward pass on `tape` with `y` as a (possibly
    /// differentiable) node. Returns a `(C, H, W)` node.
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        y: Var,
        op: &OperatorHandle,
        noise: NoiseParams,
        pyramid: &Pyramid,
    ) -> Result<Var> {
        self.head_for(op)?.forward_tape(tape, y, op, noise, pyramid)
    }

    pub fn to_tnsr(&self, dtype: DType) -> TnsrFile {
        let c = &self.config;
        let mut f = TnsrFile::new();
        let scalar = |v: f64| Tensor::scalar(v);
        f.insert("config.num_scales", scalar(c.num_scales as f64), DType::F64);
        f.insert("config.base_width", scalar(c.base_width as f64), DType::F64);
        f.insert("config.blocks_per_scale", scalar(c.blocks_per_scale as f64), DType::F64);
        f.insert("config.krylov_order", scalar(c.krylov_order as f64), DType::F64);
        f.insert("config.cg_iters", scalar(c.cg_iters as f64), DType::F64);
        f.insert("config.cg_tol", scalar(c.cg_tol), DType::F64);
        f.insert("config.ksm_kernel", scalar(c.ksm_kernel as f64), DType::F64);
        f.insert("config.seed_hi", scalar((c.seed >> 32) as f64), DType::F64);
        f.insert("config.seed_lo", scalar((c.seed & 0xffff_ffff) as f64), DType::F64);
        f.insert(
            "config.heads",
            Tensor::new(vec![c.heads.len()], c.heads.iter().map(|&h| h as f64).collect()).expect("nonempty"),
            DType::F64,
        );
        for p in self.params.iter() {
            f.insert(p.name.clone(), p.value.clone(), dtype);
        }
        f
    }

    pub fn from_tnsr(file: &TnsrFile) -> Result<Self> {
        let get = |name: &str| -> Result<f64> {
            let t = file.require(name)?;
            if !t.is_scalar() {
                return Err(Error::Format(format!("{name} must be a scalar")));
            }
            Ok(t.item())
        };
        let uint = |name: &str| -> Result<usize> {
            let v = get(name)?;
            if v < 0.0 || v.fract() != 0.0 {
                return Err(Error::Format(format!("{name} must be a nonnegative integer, got {v}")));
            }
            Ok(v as usize)
        };
        let config = RamConfig {
            num_scales: uint("config.num_scales")?,
            base_width: uint("config.base_width")?,
            blocks_per_scale: uint("config.blocks_per_scale")?,
            krylov_order: uint("config.krylov_order")?,
            cg_iters: uint("config.cg_iters")?,
            cg_tol: get("config.cg_tol")?,
            ksm_kernel: uint("config.ksm_kernel")?,
            seed: ((uint("config.seed_hi")? as u64) << 32) | uint("config.seed_lo")? as u64,
            heads: file.require("config.heads")?.data().iter().map(|&h| h as usize).collect(),
        };
        let mut model = RamModel::new(config).map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
        for (name, t) in file.iter() {
            if name.starts_with("config.") {
                continue;
            }
            let want = model
                .params
                .value(name)
                .map_err(|_| Error::Format(format!("unexpected checkpoint entry '{name}'")))?;
            if want.shape() != t.shape() {
                return Err(Error::ShapeMismatch {
                    expected: want.shape().to_vec(),
                    actual: t.shape().to_vec(),
                });
            }
            model.params.set_value(name, t.clone())?;
        }
        let loaded = file.names().filter(|n| !n.starts_with("config.")).count();
        if loaded != model.params.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {loaded} parameters, model expects {}",
                model.params.len()
            )));
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_tnsr(DType::F64).write(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_tnsr(&TnsrFile::read(path)?)
    }
}

impl DifferentiableReconstructor for RamModel {
    fn forward_on_tape(&self, tape: &mut Tape, y: Var, inst: &ProblemInstance) -> Result<Var> {
        let pyramid = inst.pyramid(self.config.num_scales)?;
        self.forward_tape(tape, y, &inst.op, inst.noise, &pyramid)
    }

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }
}

/// `x = c Aᵀy + (1 − c) m` with a single trainable scalar `c` and a fixed
/// prior mean `m`. Linear shrinkage for `m = 0`; the exact posterior mean
/// of Gaussian denoising with an i.i.d. Gaussian prior for suitable `c`.
#[derive(Clone, Debug)]
pub struct Shrinkage {
    params: ParamStore,
    prior_mean: f64,
}

impl Shrinkage {
    pub fn new(c: f64) -> Self {
        let mut params = ParamStore::new();
        params.insert("c", Tensor::scalar(c)).expect("fresh store");
        Shrinkage { params, prior_mean: 0.0 }
    }

    pub fn with_prior_mean(mut self, mean: f64) -> Self {
        self.prior_mean = mean;
        self
    }

    pub fn c(&self) -> f64 {
        self.params.value("c").expect("registered").item()
    }
}

impl DifferentiableReconstructor for Shrinkage {
    fn forward_on_tape(&self, tape: &mut Tape, y: Var, inst: &ProblemInstance) -> Result<Var> {
        let c = self.params.bind(tape, "c")?;
        let aty = tape.linear(y, &inst.op, true)?;
        if self.prior_mean == 0.0 {
            return tape.scale_by(aty, c);
        }
        let m = tape.constant(Tensor::full(tape.shape(aty).to_vec(), self.prior_mean));
        let centred = tape.sub(aty, m)?;
        let shrunk = tape.scale_by(centred, c)?;
        tape.add(shrunk, m)
    }

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }
}

/// The network with one channel head active. Trunk weights are read from
/// the same store whichever head is selected.
#[derive(Clone, Copy, Debug)]
pub struct HeadView<'a> {
    model: &'a RamModel,
    channels: usize,
}

impl<'a> HeadView<'a> {
    pub fn channels(&self) -> usize {
        self.channels
    }

    fn bind(&self, tape: &mut Tape, name: &str) -> Result<Var> {
        self.model.params.bind(tape, name)
    }

    fn conv(&self, tape: &mut Tape, x: Var, name: &str, stride: usize, padding: PaddingMode) -> Result<Var> {
        let w = self.bind(tape, name)?;
        tape.conv2d(x, w, stride, padding)
    }

    fn res_block(&self, tape: &mut Tape, x: Var, base: &str) -> Result<Var> {
        let a = self.conv(tape, x, &format!("{base}.conv1"), 1, PaddingMode::Zero(1))?;
        let a = tape.relu(a);
        let b = self.conv(tape, a, &format!("{base}.conv2"), 1, PaddingMode::Zero(1))?;
        tape.add(x, b)
    }

    /// Decode to image space, stack Krylov groups, combine, encode, add back.
    fn ksm_block(&self, tape: &mut Tape, h: Var, tag: &str, level: &CoarseOperator, b: Var) -> Result<Var> {
        let cfg = &self.model.config;
        let base = format!("head{}.ksm.{tag}", self.channels);
        let z = self.conv(tape, h, &format!("{base}.decode"), 1, PaddingMode::Zero(1))?;
        let stack = stack_on_tape(tape, level, z, b, cfg.krylov_order)?;
        let comb = self.conv(tape, stack, &format!("{base}.combine"), 1, PaddingMode::Zero(cfg.ksm_kernel / 2))?;
        let e = self.conv(tape, comb, &format!("{base}.encode"), 1, PaddingMode::Zero(1))?;
        tape.add(h, e)
    }

    /// The prox initialization with `λ = σ η / ‖y‖₁`.
    fn initial_estimate(&self, tape: &mut Tape, y: Var, op: &OperatorHandle, sigma: f64) -> Result<Var> {
        let cfg = &self.model.config;
        let aty = tape.linear(y, op, true)?;
        let l1 = tape.value(y).norm1();
        if sigma == 0.0 || l1 == 0.0 {
            return Ok(aty);
        }
        let eta = self.bind(tape, "eta")?;
        let num = tape.scale(eta, sigma);
        let l1v = tape.l1_norm(y);
        let lambda = tape.div_by(num, l1v)?;
        prox_on_tape(tape, op, aty, lambda, cfg.cg_iters, cfg.cg_tol)
    }

    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        y: Var,
        op: &OperatorHandle,
        noise: NoiseParams,
        pyramid: &Pyramid,
    ) -> Result<Var> {
        noise.validate()?;
        let cfg = &self.model.config;
        let dom = op.domain_shape();
        if dom[0] != self.channels {
            return Err(Error::UnsupportedChannels(dom[0]));
        }
        if tape.value(y).numel() != op.range_len() {
            return Err(Error::ShapeMismatch {
                expected: op.range_shape(),
                actual: tape.shape(y).to_vec(),
            });
        }
        if pyramid.num_scales() != cfg.num_scales || pyramid.grid()[0] != dom[0] {
            return Err(Error::invalid("pyramid does not match model and operator"));
        }
        let (c, h, w) = (dom[0], dom[1], dom[2]);
        let (hp, wp) = (pyramid.grid()[1], pyramid.grid()[2]);

        let x0 = self.initial_estimate(tape, y, op, noise.sigma)?;
        let x0 = tape.reshape(x0, vec![1, c, h, w])?;
        let xp = tape.pad(x0, 0, hp - h, 0, wp - w, true)?;
        let maps = noise_maps(noise.sigma, noise.gamma, hp, wp).reshape(vec![1, 2, hp, wp])?;
        let maps = tape.constant(maps);
        let input = tape.concat_channels(&[xp, maps])?;

        let backprojections = (0..cfg.num_scales)
            .map(|s| backproject_on_tape(tape, pyramid.level(s), y))
            .collect::<Result<Vec<_>>>()?;

        let head = format!("head{c}");
        let mut feat = self.conv(tape, input, &format!("{head}.in"), 1, PaddingMode::Zero(1))?;
        let mut skips = Vec::with_capacity(cfg.num_scales);
        for s in 0..cfg.num_scales {
            feat = self.ksm_block(tape, feat, &format!("enc{s}"), pyramid.level(s), backprojections[s])?;
            for b in 0..cfg.blocks_per_scale {
                feat = self.res_block(tape, feat, &format!("trunk.enc{s}.block{b}"))?;
            }
            if s + 1 < cfg.num_scales {
                skips.push(feat);
                let down = self.bind(tape, &format!("trunk.down{s}"))?;
                feat = tape.downsample2(feat, down)?;
            }
        }
        for s in (0..cfg.num_scales - 1).rev() {
            let up = self.bind(tape, &format!("trunk.up{s}"))?;
            feat = tape.upsample2(feat, up)?;
            feat = tape.add(feat, skips[s])?;
            for b in 0..cfg.blocks_per_scale {
                feat = self.res_block(tape, feat, &format!("trunk.dec{s}.block{b}"))?;
            }
            feat = self.ksm_block(tape, feat, &format!("dec{s}"), pyramid.level(s), backprojections[s])?;
        }
        let out = self.conv(tape, feat, &format!("{head}.out"), 1, PaddingMode::Zero(1))?;
        let out = tape.crop(out, h, w)?;
        let x = tape.add(x0, out)?;
        tape.reshape(x, dom)
    }

    pub fn forward_with(&self, y: &Tensor, op: &OperatorHandle, noise: NoiseParams, pyramid: &Pyramid) -> Result<Tensor> {
        let mut tape = Tape::new();
        let yv = tape.constant(y.clone());
        let out = self.forward_tape(&mut tape, yv, op, noise, pyramid)?;
        let x = tape.value(out).clone();
        x.check_finite("network output")?;
        Ok(x)
    }

    pub fn forward(&self, y: &Tensor, op: &OperatorHandle, noise: NoiseParams) -> Result<Tensor> {
        self.forward_with(y, op, noise, &self.model.pyramid(op)?)
    }

    /// Output of the KSM combination convolution alone, for an image `x_s`
    /// on the coarse grid of `level`. With a 1×1 combination kernel this
    /// lies in the span of the Krylov stack.
    pub fn ksm_combine(&self, tag: &str, x_s: &Tensor, level: &CoarseOperator, y: &Tensor) -> Result<Tensor> {
        let cfg = &self.model.config;
        let mut tape = Tape::new();
        let shape = level.domain_shape();
        let z = tape.constant(x_s.clone().reshape(vec![1, shape[0], shape[1], shape[2]])?);
        let yv = tape.constant(y.clone());
        let b = backproject_on_tape(&mut tape, level, yv)?;
        let stack = stack_on_tape(&mut tape, level, z, b, cfg.krylov_order)?;
        let name = format!("head{}.ksm.{tag}.combine", self.channels);
        let comb = self.conv(&mut tape, stack, &name, 1, PaddingMode::Zero(cfg.ksm_kernel / 2))?;
        Ok(tape.value(comb).clone())
    }
}

#[cfg(test)]
mod tests;
