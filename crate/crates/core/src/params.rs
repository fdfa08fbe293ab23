//! Named parameter registry and materialized parameter storage.
//!
//! Model construction only declares parameters in a [`Registry`] (name,
//! shape, initializer). [`ParamStore::materialize`] then allocates values.
//! This split lets parameter accounting and cost estimation run on full-size
//! configurations without allocating anything.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::init::he_uniform_with;
use crate::tensor::{numel, Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    HeUniform { fan_in: usize },
    Zeros,
    Ones,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    /// Updated by the optimizer.
    Trainable,
    /// Running statistics; saved in checkpoints but never counted or trained.
    Buffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
    pub role: Role,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        numel(&self.shape)
    }
}

#[derive(Clone, Debug, Default)]
pub struct Registry {
    specs: Vec<ParamSpec>,
    by_name: HashMap<String, ParamId>,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, shape: &[usize], init: Init, role: Role) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::DuplicateParameter(name));
        }
        let id = ParamId(self.specs.len());
        self.by_name.insert(name.clone(), id);
        self.specs.push(ParamSpec { name, shape: shape.to_vec(), init, role });
        Ok(id)
    }

    pub fn trainable(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> Result<ParamId> {
        self.register(name, shape, init, Role::Trainable)
    }

    pub fn buffer(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> Result<ParamId> {
        self.register(name, shape, init, Role::Buffer)
    }

    pub fn spec(&self, id: ParamId) -> &ParamSpec {
        &self.specs[id.0]
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    /// Total trainable scalar count.
    pub fn trainable_count(&self) -> usize {
        self.count_where(|_| true)
    }

    /// Trainable scalar count below a dotted name prefix (`"decoder.d4"`
    /// matches `decoder.d4.*` but not `decoder.d40.*`).
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.count_where(|name| name == prefix || name.strip_prefix(prefix).is_some_and(|r| r.starts_with('.')))
    }

    fn count_where(&self, keep: impl Fn(&str) -> bool) -> usize {
        self.specs.iter().filter(|s| s.role == Role::Trainable && keep(&s.name)).map(ParamSpec::numel).sum()
    }
}

/// A trainable tensor with its Adam state.
#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub role: Role,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    pub m: Tensor<T>,
    pub v: Tensor<T>,
    pub step: u64,
}

#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    registry: Registry,
    params: Vec<Parameter<T>>,
}

impl<T: Element> ParamStore<T> {
    /// Allocates and initializes every registered parameter. Each parameter
    /// draws from its own stream derived from `seed` and its registration
    /// index, so adding a parameter does not perturb the others.
    pub fn materialize(registry: Registry, seed: u64) -> Self {
        let params = registry
            .specs
            .iter()
            .enumerate()
            .map(|(i, spec)| {
                let value = match spec.init {
                    Init::Zeros => Tensor::zeros(spec.shape.clone()),
                    Init::Ones => Tensor::ones(spec.shape.clone()),
                    Init::HeUniform { fan_in } => {
                        let mut rng = ChaCha8Rng::seed_from_u64(seed);
                        rng.set_stream(i as u64 + 1);
                        he_uniform_with(&spec.shape, fan_in, &mut rng).expect("registered fan_in is positive")
                    }
                };
                Parameter {
                    name: spec.name.clone(),
                    role: spec.role,
                    m: Tensor::zeros(spec.shape.clone()),
                    v: Tensor::zeros(spec.shape.clone()),
                    value,
                    grad: None,
                    step: 0,
                }
            })
            .collect();
        Self { registry, params }
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<T>> {
        self.registry.lookup(name).map(|id| &self.params[id.0])
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Parameter<T>> {
        self.registry.lookup(name).map(|id| &mut self.params[id.0])
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    /// Adds gradients from a backward pass into each parameter's `grad`.
    pub fn accumulate_grads<'g>(&mut self, grads: impl IntoIterator<Item = (ParamId, &'g Tensor<T>)>) {
        for (id, g) in grads {
            let p = &mut self.params[id.0];
            match &mut p.grad {
                Some(acc) => acc.add_assign(g),
                None => p.grad = Some(g.clone()),
            }
        }
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.grad = None);
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            registry: self.registry.clone(),
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    role: p.role,
                    value: p.value.cast(),
                    grad: p.grad.as_ref().map(Tensor::cast),
                    m: p.m.cast(),
                    v: p.v.cast(),
                    step: p.step,
                })
                .collect(),
        }
    }
}
