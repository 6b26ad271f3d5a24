//! A measurement together with the physics that produced it.
//!
//! On disk an instance is a JSON manifest next to a TNSR file:
//!
//! ```json
//! {
//!   "operator": {"kind": "inpainting", "shape": [1, 32, 32], "keep_prob": 0.5, "seed": 3},
//!   "noise": {"sigma": 0.05, "gamma": 0.0},
//!   "measurement": {"file": "inst.tnsr", "entry": "y"},
//!   "ground_truth": {"file": "inst.tnsr", "entry": "x"},
//!   "seed": 3
//! }
//! ```

use std::fmt;
use std::path::Path;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{DType, TnsrFile};
use crate::model::Pyramid;
use crate::noise::{sample_noise, NoiseParams};
use crate::operators::{OperatorHandle, OperatorSpec, TensorRef};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceManifest {
    pub operator: OperatorSpec,
    pub noise: NoiseParams,
    pub measurement: TensorRef,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<TensorRef>,
    #[serde(default)]
    pub seed: u64,
}

pub struct ProblemInstance {
    pub op: OperatorHandle,
    pub y: Tensor,
    pub noise: NoiseParams,
    pub x: Option<Tensor>,
    pub spec: Option<OperatorSpec>,
    pub seed: u64,
    pyramids: Mutex<Vec<(usize, Arc<Pyramid>)>>,
}

impl fmt::Debug for ProblemInstance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProblemInstance")
            .field("kind", &self.op.kind())
            .field("domain", &self.op.domain_shape())
            .field("noise", &self.noise)
            .field("has_truth", &self.x.is_some())
            .field("seed", &self.seed)
            .finish()
    }
}

impl Clone for ProblemInstance {
    fn clone(&self) -> Self {
        ProblemInstance {
            op: self.op.clone(),
            y: self.y.clone(),
            noise: self.noise,
            x: self.x.clone(),
            spec: self.spec.clone(),
            seed: self.seed,
            pyramids: Mutex::new(self.pyramids.lock().expect("pyramid cache").clone()),
        }
    }
}

fn check_shape(t: &Tensor, want: &[usize], what: &str) -> Result<()> {
    if t.numel() != want.iter().product::<usize>() {
        return Err(Error::ShapeMismatch {
            expected: want.to_vec(),
            actual: t.shape().to_vec(),
        });
    }
    t.check_finite(what)
}

impl ProblemInstance {
    pub fn new(op: OperatorHandle, y: Tensor, noise: NoiseParams) -> Result<Self> {
        noise.validate()?;
        let range = op.range_shape();
        check_shape(&y, &range, "measurement")?;
        let y = y.reshape(range)?;
        Ok(ProblemInstance {
            op,
            y,
            noise,
            x: None,
            spec: None,
            seed: 0,
            pyramids: Mutex::new(Vec::new()),
        })
    }

    pub fn with_truth(mut self, x: Tensor) -> Result<Self> {
        let dom = self.op.domain_shape();
        check_shape(&x, &dom, "ground truth")?;
        self.x = Some(x.reshape(dom)?);
        Ok(self)
    }

    pub fn with_spec(mut self, spec: OperatorSpec, seed: u64) -> Self {
        self.spec = Some(spec);
        self.seed = seed;
        self
    }

    /// Simulates `y = noise(A x)` with the noise drawn from `seed`.
    pub fn simulate(op: OperatorHandle, x: &Tensor, noise: NoiseParams, seed: u64) -> Result<Self> {
        let dom = op.domain_shape();
        check_shape(x, &dom, "ground truth")?;
        let clean = op.apply(&x.clone().reshape(dom)?)?;
        let y = sample_noise(&clean, noise, seed)?.y;
        let mut inst = ProblemInstance::new(op, y, noise)?.with_truth(x.clone())?;
        inst.seed = seed;
        Ok(inst)
    }

    /// Builds the operator from `spec` and simulates a measurement of `x`.
    pub fn simulate_spec(spec: OperatorSpec, base: &Path, x: &Tensor, noise: NoiseParams, seed: u64) -> Result<Self> {
        let op = spec.build(base)?;
        Ok(Self::simulate(op, x, noise, seed)?.with_spec(spec, seed))
    }

    /// Same physics, different measurement.
    pub fn with_measurement(&self, y: Tensor) -> Result<Self> {
        let mut inst = ProblemInstance::new(self.op.clone(), y, self.noise)?;
        inst.spec = self.spec.clone();
        inst.seed = self.seed;
        inst.pyramids = Mutex::new(self.pyramids.lock().expect("pyramid cache").clone());
        Ok(inst)
    }

    pub fn image_shape(&self) -> Vec<usize> {
        self.op.domain_shape()
    }

    pub fn truth(&self) -> Result<&Tensor> {
        self.x
            .as_ref()
            .ok_or_else(|| Error::invalid("instance has no ground truth"))
    }

    /// Coarse operators for a model with `num_scales` scales, built once.
    pub fn pyramid(&self, num_scales: usize) -> Result<Arc<Pyramid>> {
        let mut cache = self.pyramids.lock().expect("pyramid cache");
        if let Some((_, p)) = cache.iter().find(|(s, _)| *s == num_scales) {
            return Ok(p.clone());
        }
        let p = Arc::new(Pyramid::new(&self.op, num_scales)?);
        cache.push((num_scales, p.clone()));
        Ok(p)
    }

    /// Writes the manifest to `path` and the tensors to a sibling TNSR file
    /// with the same stem.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let spec = self
            .spec
            .clone()
            .ok_or_else(|| Error::invalid("only instances built from an operator spec can be saved"))?;
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::invalid(format!("bad manifest path {}", path.display())))?;
        let data_name = format!("{stem}.tnsr");
        let mut file = TnsrFile::new();
        file.insert("y", self.y.clone(), DType::F64);
        if let Some(x) = &self.x {
            file.insert("x", x.clone(), DType::F64);
        }
        let dir = path.parent().unwrap_or(Path::new(""));
        file.write(dir.join(&data_name))?;
        let manifest = InstanceManifest {
            operator: spec,
            noise: self.noise,
            measurement: TensorRef {
                file: data_name.clone(),
                entry: "y".into(),
            },
            ground_truth: self.x.as_ref().map(|_| TensorRef {
                file: data_name,
                entry: "x".into(),
            }),
            seed: self.seed,
        };
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let manifest: InstanceManifest = serde_json::from_str(&text)?;
        Self::from_manifest(&manifest, path.parent().unwrap_or(Path::new("")))
    }

    pub fn from_manifest(manifest: &InstanceManifest, base: &Path) -> Result<Self> {
        let op = manifest.operator.build(base)?;
        let y = manifest.measurement.load(base)?;
        let mut inst = ProblemInstance::new(op, y, manifest.noise)?.with_spec(manifest.operator.clone(), manifest.seed);
        if let Some(r) = &manifest.ground_truth {
            inst = inst.with_truth(r.load(base)?)?;
        }
        Ok(inst)
    }
}
