//! Named parameter storage with gradient accumulators.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{BotError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParameterStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    grads: Vec<Tensor>,
    index: HashMap<String, ParamId>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(BotError::DuplicateParam(name));
        }
        let id = ParamId(self.values.len());
        self.grads.push(Tensor::zeros(value.shape()));
        self.values.push(value);
        self.index.insert(name.clone(), id);
        self.names.push(name);
        Ok(id)
    }

    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialisation.
    pub fn register_uniform<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> Result<ParamId> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let t = Tensor::from_fn(shape, |_| rng.random_range(-bound..bound));
        self.register(name, t)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            g.fill(0.0);
        }
    }

    pub fn accumulate_grad(&mut self, id: ParamId, g: &Tensor) {
        self.grads[id.0].add_assign(g);
    }

    /// Scalar count of every parameter whose name starts with `prefix`.
    pub fn numel_with_prefix(&self, prefix: &str) -> usize {
        self.names
            .iter()
            .zip(&self.values)
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, v)| v.len())
            .sum()
    }

    /// Sets every parameter under `prefix` to zero; returns how many tensors were touched.
    pub fn zero_with_prefix(&mut self, prefix: &str) -> usize {
        let mut n = 0;
        for (name, v) in self.names.iter().zip(self.values.iter_mut()) {
            if name.starts_with(prefix) {
                v.fill(0.0);
                n += 1;
            }
        }
        n
    }

    /// Replaces the value of `name`, checking the shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| BotError::UnknownParam(name.to_string()))?;
        if self.values[id.0].shape() != value.shape() {
            return Err(BotError::Shape(format!(
                "parameter `{name}` has shape {:?}, got {:?}",
                self.values[id.0].shape(),
                value.shape()
            )));
        }
        self.values[id.0] = value;
        Ok(())
    }
}
