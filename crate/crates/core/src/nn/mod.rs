//! Parameterized building blocks composed from tape primitives.
//!
//! Blocks are plain structs of [`ParamId`]s built against a [`Registry`];
//! their `forward` methods run on a [`Ctx`] that pairs a tape with the
//! parameter values.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::params::{ParamId, ParamStore, Registry};
use crate::tensor::{Element, Tensor};

pub mod attention;
pub mod blocks;
pub mod layers;
pub mod rlab;

pub use attention::{Cam, Casab, Sam};
pub use blocks::{ConvBlock, Dsub, Eub, TransposeUp, Upsampler, UpsamplerKind};
pub use layers::{BatchNorm, Conv, ConvTranspose, Dense};
pub use rlab::{ResidualBlock, Rlab, RlabTrace};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics are queued for update.
    Train,
    /// Running statistics.
    Infer,
}

/// Hyperparameters shared by every block. Channel widths are passed to each
/// block constructor separately.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlockConfig {
    pub leaky_slope: f64,
    /// Hidden width of the channel-attention MLP is `max(C / r, 1)`.
    pub cam_reduction: usize,
    /// Query/key width of RLAB attention; `None` uses the token width.
    pub rlab_key_dim: Option<usize>,
    pub d2s_factor: usize,
    /// Above this many tokens RLAB average-pools its input before attention
    /// and bilinearly restores the result. `None` disables pooling.
    pub attention_token_cap: Option<usize>,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for BlockConfig {
    fn default() -> Self {
        Self {
            leaky_slope: 0.01,
            cam_reduction: 8,
            rlab_key_dim: None,
            d2s_factor: 2,
            attention_token_cap: Some(1024),
            bn_eps: 1e-3,
            bn_momentum: 0.99,
        }
    }
}

/// Batch statistics waiting to be folded into running statistics.
#[derive(Clone, Debug)]
pub struct StatUpdate<T> {
    pub mean: ParamId,
    pub var: ParamId,
    pub momentum: f64,
    pub batch_mean: Vec<T>,
    pub batch_var: Vec<T>,
}

/// Forward-pass context: the tape, parameter values and mode.
pub struct Ctx<'s, T> {
    pub tape: Tape<T>,
    registry: &'s Registry,
    store: Option<&'s ParamStore<T>>,
    mode: Mode,
    leaves: HashMap<ParamId, Var>,
    updates: Vec<StatUpdate<T>>,
}

impl<'s, T: Element> Ctx<'s, T> {
    pub fn new(store: &'s ParamStore<T>, mode: Mode) -> Self {
        Self {
            tape: Tape::new(),
            registry: store.registry(),
            store: Some(store),
            mode,
            leaves: HashMap::new(),
            updates: Vec::new(),
        }
    }

    /// Shape-only context for parameter and cost accounting.
    pub fn meta(registry: &'s Registry) -> Self {
        Self {
            tape: Tape::meta(),
            registry,
            store: None,
            mode: Mode::Infer,
            leaves: HashMap::new(),
            updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Places an input tensor on the tape.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.tape.input(value)
    }

    /// Shape-only input, for meta contexts.
    pub fn meta_input(&mut self, shape: &[usize]) -> Var {
        self.tape.meta_leaf(None, shape)
    }

    /// Leaf for a parameter; repeated requests reuse the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.leaves.get(&id) {
            return v;
        }
        let v = match self.store {
            Some(store) => self.tape.param(id, store.value(id).clone()),
            None => self.tape.meta_leaf(Some(id), &self.registry.spec(id).shape),
        };
        self.leaves.insert(id, v);
        v
    }

    /// Current value of a non-trainable buffer (running statistics).
    pub(crate) fn buffer(&self, id: ParamId) -> Vec<T> {
        match self.store {
            Some(store) => store.value(id).data().to_vec(),
            None => vec![T::zero(); crate::tensor::numel(&self.registry.spec(id).shape)],
        }
    }

    pub(crate) fn push_update(&mut self, update: StatUpdate<T>) {
        self.updates.push(update);
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.tape.shape(v)
    }

    pub fn into_parts(self) -> (Tape<T>, Vec<StatUpdate<T>>) {
        (self.tape, self.updates)
    }
}

/// Folds queued batch statistics into the running buffers:
/// `running = momentum * running + (1 - momentum) * batch`.
pub fn apply_stat_updates<T: Element>(store: &mut ParamStore<T>, updates: &[StatUpdate<T>]) {
    for u in updates {
        let m = T::lit(u.momentum);
        let blend = |running: &mut [T], batch: &[T]| {
            for (r, &b) in running.iter_mut().zip(batch) {
                *r = m * *r + (T::one() - m) * b;
            }
        };
        blend(store.get_mut(u.mean).value.data_mut(), &u.batch_mean);
        blend(store.get_mut(u.var).value.data_mut(), &u.batch_var);
    }
}

/// Shape of a 4-D value, as a tuple.
pub(crate) fn dims(ctx: &Ctx<'_, impl Element>, v: Var) -> Result<(usize, usize, usize, usize)> {
    crate::tensor::dims4(ctx.shape(v))
}
