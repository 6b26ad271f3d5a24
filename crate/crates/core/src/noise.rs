//! Poisson-Gaussian measurement noise `y = gamma * Poisson(z / gamma) + sigma * n`.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{rng_from_seed, Rng};
use crate::tensor::Tensor;

/// Gaussian standard deviation and Poisson gain, both in measurement units.
/// `gamma == 0` disables the Poisson component.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NoiseParams {
    pub sigma: f64,
    #[serde(default)]
    pub gamma: f64,
}

impl NoiseParams {
    pub fn new(sigma: f64, gamma: f64) -> Result<Self> {
        let p = NoiseParams { sigma, gamma };
        p.validate()?;
        Ok(p)
    }

    pub fn gaussian(sigma: f64) -> Result<Self> {
        Self::new(sigma, 0.0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite() && self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::invalid(format!(
                "noise parameters must be finite and nonnegative: sigma={}, gamma={}",
                self.sigma, self.gamma
            )));
        }
        Ok(())
    }

    pub fn is_noiseless(&self) -> bool {
        self.sigma == 0.0 && self.gamma == 0.0
    }
}

/// A noisy measurement and whether negative clean values had to be clamped
/// before Poisson sampling.
#[derive(Clone, Debug)]
pub struct NoisySample {
    pub y: Tensor,
    pub clamped: bool,
}

/// Draws `gamma * Poisson(clean / gamma) + sigma * N(0, I)` elementwise.
pub fn sample_noise(clean: &Tensor, params: NoiseParams, seed: u64) -> Result<NoisySample> {
    params.validate()?;
    if params.is_noiseless() {
        return Ok(NoisySample {
            y: clean.clone(),
            clamped: false,
        });
    }
    let mut rng = rng_from_seed(seed);
    let mut clamped = false;
    let y = clean.map(|_| 0.0);
    let mut data = y.into_data();
    for (out, &c) in data.iter_mut().zip(clean.data()) {
        let mut v = c;
        if params.gamma > 0.0 {
            if c < 0.0 {
                clamped = true;
            }
            v = params.gamma * poisson(c.max(0.0) / params.gamma, &mut rng);
        }
        if params.sigma > 0.0 {
            let n: f64 = StandardNormal.sample(&mut rng);
            v += params.sigma * n;
        }
        *out = v;
    }
    if clamped {
        log::warn!("negative clean values clamped to zero before Poisson sampling");
    }
    Ok(NoisySample {
        y: Tensor::new(clean.shape().to_vec(), data)?,
        clamped,
    })
}

/// Poisson variate: sequential inversion below mean 30, Hörmann's PTRS
/// transformed rejection above.
pub fn poisson(mean: f64, rng: &mut Rng) -> f64 {
    if mean <= 0.0 {
        return 0.0;
    }
    if mean < 30.0 {
        let mut k = 0.0;
        let mut p = (-mean).exp();
        let mut cdf = p;
        let u: f64 = rng.random();
        while u > cdf {
            k += 1.0;
            p *= mean / k;
            cdf += p;
            if p == 0.0 {
                break;
            }
        }
        return k;
    }
    let slam = mean.sqrt();
    let loglam = mean.ln();
    let b = 0.931 + 2.53 * slam;
    let a = -0.059 + 0.02483 * b;
    let inv_alpha = 1.1239 + 1.1328 / (b - 3.4);
    let vr = 0.9277 - 3.6224 / (b - 2.0);
    loop {
        let u: f64 = rng.random::<f64>() - 0.5;
        let v: f64 = rng.random();
        let us = 0.5 - u.abs();
        let k = ((2.0 * a / us + b) * u + mean + 0.43).floor();
        if us >= 0.07 && v <= vr {
            return k;
        }
        if k < 0.0 || (us < 0.013 && v > us) {
            continue;
        }
        if v.ln() + inv_alpha.ln() - (a / (us * us) + b).ln() <= -mean + k * loglam - ln_factorial(k) {
            return k;
        }
    }
}

/// `ln(k!)` via Stirling's series; exact table below 10.
fn ln_factorial(k: f64) -> f64 {
    const TABLE: [f64; 10] = [
        0.0,
        0.0,
        std::f64::consts::LN_2,
        1.791_759_469_228_055,
        3.178_053_830_347_945_8,
        4.787_491_742_782_046,
        6.579_251_212_010_101,
        8.525_161_361_065_415,
        10.604_602_902_745_25,
        12.801_827_480_081_469,
    ];
    if k < 10.0 {
        return TABLE[k as usize];
    }
    let n = k + 1.0;
    let inv = 1.0 / n;
    let inv2 = inv * inv;
    (n - 0.5) * n.ln() - n + 0.5 * (2.0 * std::f64::consts::PI).ln()
        + inv * (1.0 / 12.0 - inv2 * (1.0 / 360.0 - inv2 / 1260.0))
}

/// Uniform ranges for sampling noise levels. An absent gamma range means no
/// Poisson component; a degenerate range is a fixed value.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseRange {
    pub sigma: (f64, f64),
    #[serde(default)]
    pub gamma: Option<(f64, f64)>,
}

impl NoiseRange {
    pub fn fixed(params: NoiseParams) -> Self {
        NoiseRange {
            sigma: (params.sigma, params.sigma),
            gamma: Some((params.gamma, params.gamma)),
        }
    }

    pub fn gaussian(lo: f64, hi: f64) -> Self {
        NoiseRange {
            sigma: (lo, hi),
            gamma: None,
        }
    }
}

fn uniform(range: (f64, f64), rng: &mut Rng, what: &str) -> Result<f64> {
    let (lo, hi) = range;
    if !(lo <= hi) || lo < 0.0 || !hi.is_finite() {
        return Err(Error::invalid(format!("invalid {what} range [{lo}, {hi}]")));
    }
    if lo == hi {
        return Ok(lo);
    }
    Ok(lo + (hi - lo) * rng.random::<f64>())
}

pub fn sample_params(range: &NoiseRange, rng: &mut Rng) -> Result<NoiseParams> {
    let sigma = uniform(range.sigma, rng, "sigma")?;
    let gamma = match range.gamma {
        Some(g) => uniform(g, rng, "gamma")?,
        None => 0.0,
    };
    NoiseParams::new(sigma, gamma)
}
