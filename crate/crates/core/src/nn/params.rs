use std::collections::BTreeMap;

use rand::Rng as _;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Named trainable tensors, iterated in name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter '{name}'")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter '{name}'")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Parameters whose name starts with `prefix`.
    pub fn with_prefix(&self, prefix: &str) -> ParamSet {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn extend(&mut self, other: ParamSet) {
        self.tensors.extend(other.tensors);
    }

    pub fn zero_grads(&mut self) {
        self.tensors.values_mut().for_each(Tensor::clear_grad);
    }

    /// Multiplies every gradient buffer by `factor`.
    pub fn scale_grads(&mut self, factor: f64) {
        for t in self.tensors.values_mut() {
            if let Some(g) = t.grad() {
                let scaled: Vec<f64> = g.iter().map(|v| v * factor).collect();
                t.set_grad(scaled).expect("same length");
            }
        }
    }

    /// Euclidean norm over all gradient buffers.
    pub fn grad_norm(&self) -> f64 {
        self.tensors.values().filter_map(Tensor::grad).flatten().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Records every parameter as a differentiable leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|(k, t)| (k.clone(), tape.param(t.clone()))).collect(),
        }
    }

    /// Records every parameter as a constant (no gradient) on `tape`.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|(k, t)| (k.clone(), tape.constant(t.clone()))).collect(),
        }
    }

    /// Adds `scale * d(target)/d(param)` from a finished backward pass into
    /// each parameter's gradient buffer. Parameters the target does not depend
    /// on receive explicit zeros.
    pub fn accumulate_grads(&mut self, tape: &Tape, bound: &Bound, scale: f64) -> Result<()> {
        for (name, tensor) in self.tensors.iter_mut() {
            let var = bound.get(name)?;
            match tape.grad(var) {
                Some(g) => tensor.accumulate_grad(g, scale)?,
                None => tensor.accumulate_grad(&vec![0.0; tensor.len()], 0.0)?,
            }
        }
        Ok(())
    }

    /// Sums gradient buffers of `other` into `self` (same names required).
    pub fn add_grads_from(&mut self, other: &ParamSet) -> Result<()> {
        for (name, tensor) in self.tensors.iter_mut() {
            let src = other.get(name)?;
            if let Some(g) = src.grad() {
                tensor.accumulate_grad(g, 1.0)?;
            }
        }
        Ok(())
    }
}

/// Tape variables for a bound [`ParamSet`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter '{name}'")))
    }

    pub fn merge(mut self, other: Bound) -> Bound {
        self.vars.extend(other.vars);
        self
    }
}

/// Uniform(−a, a) with `a = sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_uniform(rng: &mut Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-a..a)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches count")
}
