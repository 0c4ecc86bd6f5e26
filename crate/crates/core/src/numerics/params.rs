use std::collections::HashMap;

use super::rng::Rng;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(pub(crate) usize);

/// A learnable tensor and its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Non-learnable state such as batch-norm running statistics.
#[derive(Clone, Debug)]
pub struct Buffer {
    pub name: String,
    pub value: Tensor,
}

/// Named parameters and buffers of a model.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    buffers: Vec<Buffer>,
    by_name: HashMap<String, ParamId>,
    buffer_by_name: HashMap<String, BufferId>,
}

/// Weight initialisation schemes.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform Glorot with explicit fan-in / fan-out and a gain multiplier.
    Xavier { fan_in: usize, fan_out: usize, gain: f64 },
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter { name, value, grad });
        Ok(id)
    }

    pub fn init(&mut self, name: impl Into<String>, shape: &[usize], init: Init, rng: &mut Rng) -> Result<ParamId> {
        let value = match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::full(shape, 1.0),
            Init::Xavier { fan_in, fan_out, gain } => {
                let limit = gain * (6.0 / (fan_in + fan_out) as f64).sqrt();
                let n: usize = shape.iter().product();
                let data = (0..n).map(|_| rng.uniform(-limit, limit)).collect();
                Tensor::new(shape.to_vec(), data)?
            }
        };
        self.add(name, value)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor) -> Result<BufferId> {
        let name = name.into();
        if self.buffer_by_name.contains_key(&name) {
            return Err(Error::Config(format!("duplicate buffer name {name}")));
        }
        let id = BufferId(self.buffers.len());
        self.buffer_by_name.insert(name.clone(), id);
        self.buffers.push(Buffer { name, value });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor {
        &self.buffers[id.0].value
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Tensor {
        &mut self.buffers[id.0].value
    }

    pub fn buffers(&self) -> impl Iterator<Item = &Buffer> {
        self.buffers.iter()
    }

    pub fn buffer_id(&self, name: &str) -> Option<BufferId> {
        self.buffer_by_name.get(name).copied()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.grad.data())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales all gradients so their global norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            let scale = max_norm / norm;
            for p in &mut self.params {
                for g in p.grad.data_mut() {
                    *g *= scale;
                }
            }
        }
        norm
    }

    /// Replaces a tensor by name, checking the shape. Used when loading checkpoints.
    pub fn set_value(&mut self, name: &str, value: Tensor) -> Result<()> {
        if let Some(id) = self.id(name) {
            let p = &mut self.params[id.0];
            if p.value.shape() != value.shape() {
                return Err(Error::shape("load parameter", p.value.shape(), value.shape()));
            }
            p.value = value;
            return Ok(());
        }
        if let Some(id) = self.buffer_id(name) {
            let b = &mut self.buffers[id.0];
            if b.value.shape() != value.shape() {
                return Err(Error::shape("load buffer", b.value.shape(), value.shape()));
            }
            b.value = value;
            return Ok(());
        }
        Err(Error::Checkpoint(format!("unknown tensor {name}")))
    }
}
