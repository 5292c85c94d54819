//! Named trainable parameters.

use std::collections::HashMap;

use crate::rng::Rng;
use crate::tensor::{Result, Tensor, TensorError};

/// Handle to one parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Weight initialization schemes.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Const(f32),
    Normal { std: f32 },
    Uniform { lo: f32, hi: f32 },
    /// He/Kaiming normal: std = sqrt(2 / fan_in).
    Kaiming { fan_in: usize },
    /// Xavier/Glorot uniform: bound = sqrt(6 / (fan_in + fan_out)).
    Xavier { fan_in: usize, fan_out: usize },
}

impl Init {
    pub fn build(self, shape: &[usize], rng: &mut Rng) -> Tensor {
        match self {
            Init::Zeros => Tensor::zeros(shape),
            Init::Const(v) => Tensor::full(shape, v),
            Init::Normal { std } => Tensor::randn(shape, std, rng),
            Init::Uniform { lo, hi } => Tensor::rand_uniform(shape, lo, hi, rng),
            Init::Kaiming { fan_in } => {
                Tensor::randn(shape, (2.0 / fan_in as f32).sqrt(), rng)
            }
            Init::Xavier { fan_in, fan_out } => {
                let bound = (6.0 / (fan_in + fan_out) as f32).sqrt();
                Tensor::rand_uniform(shape, -bound, bound, rng)
            }
        }
    }
}

#[derive(Clone)]
struct Entry {
    name: String,
    tensor: Tensor,
}

/// Flat collection of named parameters with stable ids.
#[derive(Default, Clone)]
pub struct ParamStore {
    entries: Vec<Entry>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, mut tensor: Tensor) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(TensorError::Invalid {
                op: "param_add",
                msg: format!("duplicate parameter name `{name}`"),
            });
        }
        tensor.set_requires_grad(true);
        let idx = self.entries.len();
        self.by_name.insert(name.to_string(), idx);
        self.entries.push(Entry {
            name: name.to_string(),
            tensor,
        });
        Ok(ParamId(idx))
    }

    pub fn init(&mut self, name: &str, shape: &[usize], init: Init, rng: &mut Rng) -> ParamId {
        self.add(name, init.build(shape, rng))
            .expect("parameter names are unique by construction")
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn get_by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (ParamId(i), e.name.as_str(), &e.tensor))
    }

    /// Parameter names in lexicographic order (the canonical export order).
    pub fn sorted_names(&self) -> Vec<&str> {
        let mut names: Vec<&str> = self.entries.iter().map(|e| e.name.as_str()).collect();
        names.sort_unstable();
        names
    }

    /// Overwrites an existing parameter with a tensor of identical shape.
    pub fn load(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let id = self.id(name).ok_or_else(|| TensorError::Invalid {
            op: "param_load",
            msg: format!("unknown parameter `{name}`"),
        })?;
        let cur = self.get(id);
        if cur.shape() != tensor.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "param_load",
                lhs: cur.shape().to_vec(),
                rhs: tensor.shape().to_vec(),
            });
        }
        let slot = self.get_mut(id);
        *slot = tensor;
        slot.set_requires_grad(true);
        Ok(())
    }
}
