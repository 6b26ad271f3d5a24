use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{Gradients, Tape};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A named trainable array with its gradient accumulator and Adam moments.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    /// `None` until a backward pass reaches the parameter.
    pub grad: Option<Tensor>,
    first_moment: Tensor,
    second_moment: Tensor,
    steps: u64,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let zeros = Tensor::zeros(value.shape().to_vec());
        Parameter {
            name: name.into(),
            grad: None,
            first_moment: zeros.clone(),
            second_moment: zeros,
            value,
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Ordered registry of uniquely named parameters.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Parameter::new(name, value));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Parameter> {
        self.index
            .get(name)
            .map(|&i| &self.params[i])
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Parameter> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.params[i]),
            None => Err(Error::UnknownParameter(name.to_string())),
        }
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.get(name)?.value)
    }

    /// Replaces a parameter value, keeping its shape.
    pub fn set_value(&mut self, name: &str, value: Tensor) -> Result<()> {
        let p = self.get_mut(name)?;
        if p.value.shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                expected: p.value.shape().to_vec(),
                actual: value.shape().to_vec(),
            });
        }
        p.value = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    /// Total number of scalar weights.
    pub fn num_weights(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Binds a parameter on a tape.
    pub fn bind(&self, tape: &mut Tape, name: &str) -> Result<super::Var> {
        Ok(tape.param(name, &self.get(name)?.value))
    }

    /// Adds the gradients of every parameter bound on `tape`.
    pub fn accumulate(&mut self, tape: &Tape, grads: &Gradients) -> Result<()> {
        for (name, var) in tape.bindings() {
            if let Some(g) = grads.get(*var) {
                self.add_grad(name, g)?;
            }
        }
        Ok(())
    }

    /// Adds `g` into the accumulator of `name`.
    pub fn add_grad(&mut self, name: &str, g: &Tensor) -> Result<()> {
        let p = self.get_mut(name)?;
        if g.numel() != p.value.numel() {
            return Err(Error::ShapeMismatch {
                expected: p.value.shape().to_vec(),
                actual: g.shape().to_vec(),
            });
        }
        match &mut p.grad {
            Some(acc) => acc.axpy(1.0, g)?,
            None => p.grad = Some(g.clone().reshape(p.value.shape().to_vec())?),
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// One bias-corrected Adam update of every parameter that holds a
    /// gradient. Parameters no backward pass reached are left untouched,
    /// moments included. Returns how many parameters were updated.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<usize> {
        let mut updated = 0;
        for p in &mut self.params {
            let Some(g) = p.grad.as_ref() else { continue };
            p.steps += 1;
            let t = p.steps as i32;
            let bc1 = 1.0 - cfg.beta1.powi(t);
            let bc2 = 1.0 - cfg.beta2.powi(t);
            let m = p.first_moment.data_mut();
            let v = p.second_moment.data_mut();
            let w = p.value.data_mut();
            for i in 0..w.len() {
                let gi = g.data()[i];
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                w[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
            updated += 1;
        }
        if updated == 0 {
            return Err(Error::MissingGradient("every parameter".into()));
        }
        Ok(updated)
    }

    /// Order-dependent checksum of the listed parameters' values.
    pub fn checksum<'a>(&self, names: impl IntoIterator<Item = &'a str>) -> Result<u64> {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for name in names {
            for v in self.value(name)?.data() {
                h ^= v.to_bits();
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        Ok(h)
    }
}
