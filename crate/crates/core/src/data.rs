//! Synthetic image collections and image directories.

use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{import_pnm, TnsrFile};
use crate::rng::{derive_seed, rng_from_seed, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SyntheticKind {
    /// Axis-aligned rectangles of constant value on a constant background.
    PiecewiseConstant,
    /// Sums of anisotropic Gaussian bumps, rescaled to `[0, 1]`.
    SmoothBumps,
    /// Rows of dark strokes on a light page.
    TextLike,
}

impl std::str::FromStr for SyntheticKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::invalid(format!("unknown synthetic dataset kind '{s}'")))
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    images: Vec<Tensor>,
}

impl Dataset {
    pub fn from_images(images: Vec<Tensor>) -> Result<Self> {
        for im in &images {
            im.image_dims()?;
            im.check_finite("dataset image")?;
        }
        Ok(Dataset { images })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.images[i]
    }

    pub fn images(&self) -> &[Tensor] {
        &self.images
    }

    /// Every `.tnsr` (entry `x`), `.pgm` and `.ppm` file of a directory, in
    /// file-name order.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let mut paths: Vec<_> = std::fs::read_dir(dir.as_ref())?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("tnsr" | "pgm" | "ppm")))
            .collect();
        paths.sort();
        let images = paths
            .iter()
            .map(|p| match p.extension().and_then(|e| e.to_str()) {
                Some("tnsr") => Ok(TnsrFile::read(p)?.require("x")?.clone()),
                _ => import_pnm(p),
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_images(images)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DatasetSpec {
    Synthetic {
        kind: SyntheticKind,
        count: usize,
        shape: Vec<usize>,
        #[serde(default)]
        seed: u64,
    },
    Directory {
        path: String,
    },
}

impl DatasetSpec {
    pub fn load(&self, base: &Path) -> Result<Dataset> {
        match self {
            DatasetSpec::Synthetic { kind, count, shape, seed } => make_synthetic_dataset(*kind, *count, shape, *seed),
            DatasetSpec::Directory { path } => Dataset::load_dir(base.join(path)),
        }
    }
}

/// `count` images of `shape = (C, H, W)`, each from its own derived seed.
pub fn make_synthetic_dataset(kind: SyntheticKind, count: usize, shape: &[usize], seed: u64) -> Result<Dataset> {
    if shape.len() != 3 || shape.iter().any(|&s| s == 0) {
        return Err(Error::InvalidShape(shape.to_vec()));
    }
    let images = (0..count)
        .map(|i| {
            let mut rng = rng_from_seed(derive_seed(seed, i as u64));
            match kind {
                SyntheticKind::PiecewiseConstant => piecewise_constant(shape, &mut rng),
                SyntheticKind::SmoothBumps => smooth_bumps(shape, &mut rng),
                SyntheticKind::TextLike => text_like(shape, &mut rng),
            }
        })
        .collect();
    Ok(Dataset { images })
}

fn colour(c: usize, rng: &mut Rng) -> Vec<f64> {
    (0..c).map(|_| rng.random_range(0.05..0.95)).collect()
}

fn piecewise_constant(shape: &[usize], rng: &mut Rng) -> Tensor {
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let mut img = Tensor::zeros(shape.to_vec());
    let bg = colour(c, rng);
    let data = img.data_mut();
    for ch in 0..c {
        data[ch * h * w..(ch + 1) * h * w].fill(bg[ch]);
    }
    let n = rng.random_range(2..=4);
    for _ in 0..n {
        let rh = rng.random_range(h.div_ceil(4)..=h.div_ceil(4).max(h / 2));
        let rw = rng.random_range(w.div_ceil(4)..=w.div_ceil(4).max(w / 2));
        let r0 = rng.random_range(0..=h - rh.min(h));
        let c0 = rng.random_range(0..=w - rw.min(w));
        let v = colour(c, rng);
        for ch in 0..c {
            for r in r0..(r0 + rh).min(h) {
                data[ch * h * w + r * w + c0..ch * h * w + r * w + (c0 + rw).min(w)].fill(v[ch]);
            }
        }
    }
    img
}

fn smooth_bumps(shape: &[usize], rng: &mut Rng) -> Tensor {
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let mut img = Tensor::zeros(shape.to_vec());
    let n = rng.random_range(3..=6);
    let bumps: Vec<(f64, f64, f64, f64, Vec<f64>)> = (0..n)
        .map(|_| {
            let cy = rng.random_range(0.0..h as f64);
            let cx = rng.random_range(0.0..w as f64);
            let sy = rng.random_range(0.08..0.3) * h as f64;
            let sx = rng.random_range(0.08..0.3) * w as f64;
            let amp = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
            (cy, cx, sy, sx, amp)
        })
        .collect();
    let data = img.data_mut();
    for ch in 0..c {
        for r in 0..h {
            for col in 0..w {
                data[ch * h * w + r * w + col] = bumps
                    .iter()
                    .map(|(cy, cx, sy, sx, amp)| {
                        let dy = (r as f64 - cy) / sy;
                        let dx = (col as f64 - cx) / sx;
                        amp[ch] * (-0.5 * (dy * dy + dx * dx)).exp()
                    })
                    .sum();
            }
        }
    }
    let (lo, hi) = data.iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
    let span = (hi - lo).max(1e-12);
    for v in data.iter_mut() {
        *v = 0.05 + 0.9 * (*v - lo) / span;
    }
    img
}

fn text_like(shape: &[usize], rng: &mut Rng) -> Tensor {
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let paper = rng.random_range(0.8..0.95);
    let ink = rng.random_range(0.05..0.25);
    let mut plane = vec![paper; h * w];
    let line_height = 7usize.min(h);
    let mut top = 1;
    while top + line_height <= h {
        let mut x = 1 + rng.random_range(0..3usize);
        while x + 4 <= w {
            // a glyph: a few strokes inside a 3 x 5 cell
            let strokes = rng.random_range(1..=3);
            for _ in 0..strokes {
                if rng.random_bool(0.5) {
                    let r = top + rng.random_range(0..5);
                    for dx in 0..3 {
                        plane[r * w + x + dx] = ink;
                    }
                } else {
                    let col = x + rng.random_range(0..3);
                    for dy in 0..5 {
                        plane[(top + dy) * w + col] = ink;
                    }
                }
            }
            x += 4 + usize::from(rng.random_bool(0.2)) * 3;
        }
        top += line_height;
    }
    let mut data = Vec::with_capacity(c * h * w);
    for _ in 0..c {
        data.extend_from_slice(&plane);
    }
    Tensor::new(shape.to_vec(), data).expect("consistent shape")
}

/// Fraction of pixels whose forward differences along both axes vanish in
/// every channel.
pub fn flat_fraction(img: &Tensor) -> Result<f64> {
    let (c, h, w) = img.image_dims()?;
    let d = img.data();
    let mut flat = 0usize;
    for r in 0..h {
        for col in 0..w {
            let ok = (0..c).all(|ch| {
                let v = d[ch * h * w + r * w + col];
                let right = if col + 1 < w { d[ch * h * w + r * w + col + 1] } else { v };
                let down = if r + 1 < h { d[ch * h * w + (r + 1) * w + col] } else { v };
                right == v && down == v
            });
            flat += usize::from(ok);
        }
    }
    Ok(flat as f64 / (h * w) as f64)
}

/// Crop of size `patch × patch` at a random position; images smaller than
/// the patch are reflect-padded first.
pub fn random_patch(img: &Tensor, patch: usize, rng: &mut Rng) -> Result<Tensor> {
    let (c, h, w) = img.image_dims()?;
    if patch == 0 {
        return Err(Error::invalid("patch size must be positive"));
    }
    let r0 = if h > patch { rng.random_range(0..=h - patch) } else { 0 };
    let c0 = if w > patch { rng.random_range(0..=w - patch) } else { 0 };
    let d = img.data();
    let fold = |i: usize, n: usize| crate::autodiff::reflect_index(i as isize, n);
    Ok(Tensor::from_fn(vec![c, patch, patch], |i| {
        let ch = i / (patch * patch);
        let r = fold(r0 + (i / patch) % patch, h);
        let col = fold(c0 + i % patch, w);
        d[ch * h * w + r * w + col]
    }))
}
