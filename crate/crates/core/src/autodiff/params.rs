//! Named parameter tensors and their optimizer state.
//!
//! Parameters live outside any tape; each training step copies them onto a
//! fresh tape as leaves, accumulates gradients per sample in creation order,
//! and applies Adam once per batch. Names are hierarchical
//! (`matcher/layer0/self/q_w`, `shape_codec/enc1/w`, ...), and iteration is
//! always in sorted name order so training and checkpoints are deterministic.

use std::collections::BTreeMap;

use super::{adam_step, AdamConfig, AdamState, Tape, TensorId};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, ParamTensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, shape: Vec<usize>, data: Vec<f32>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.tensors.insert(name.to_string(), ParamTensor { shape, data });
    }

    pub fn get(&self, name: &str) -> Result<&ParamTensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter tensor: {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamTensor> {
        self.tensors.get_mut(name)
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

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamTensor)> {
        self.tensors.iter()
    }

    /// Copy one named tensor onto a tape as a differentiable leaf.
    pub fn leaf(&self, tape: &mut Tape, name: &str) -> Result<TensorId> {
        let t = self.get(name)?;
        Ok(tape.leaf(t.shape.clone(), t.data.clone()))
    }

    /// Copy one named tensor onto a tape as a frozen constant.
    pub fn constant(&self, tape: &mut Tape, name: &str) -> Result<TensorId> {
        let t = self.get(name)?;
        Ok(tape.constant(t.shape.clone(), t.data.clone()))
    }

    /// Merge another store under a name prefix.
    pub fn absorb(&mut self, prefix: &str, other: &ParamStore) {
        for (name, t) in other.iter() {
            self.tensors.insert(format!("{prefix}{name}"), t.clone());
        }
    }

    pub fn total_values(&self) -> usize {
        self.tensors.values().map(|t| t.data.len()).sum()
    }
}

/// Gradient accumulator keyed like the store it mirrors.
#[derive(Debug, Default)]
pub struct GradStore {
    grads: BTreeMap<String, Vec<f32>>,
}

impl GradStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn accumulate(&mut self, name: &str, grad: &[f32]) {
        match self.grads.get_mut(name) {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(grad) {
                    *gi += di;
                }
            }
            None => {
                self.grads.insert(name.to_string(), grad.to_vec());
            }
        }
    }

    pub fn scale(&mut self, factor: f32) {
        for g in self.grads.values_mut() {
            for v in g.iter_mut() {
                *v *= factor;
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&[f32]> {
        self.grads.get(name).map(|g| g.as_slice())
    }

    pub fn clear(&mut self) {
        self.grads.clear();
    }
}

/// Tracks which tape leaf holds which named parameter during one forward
/// pass so gradients can be harvested back into a [`GradStore`].
#[derive(Debug, Default)]
pub struct ParamBinding {
    bound: Vec<(String, TensorId)>,
}

impl ParamBinding {
    pub fn new() -> Self {
        Self::default()
    }

    /// Copy a named parameter onto the tape as a differentiable leaf and
    /// remember the binding.
    pub fn bind(&mut self, tape: &mut Tape, store: &ParamStore, name: &str) -> Result<TensorId> {
        let id = store.leaf(tape, name)?;
        self.bound.push((name.to_string(), id));
        Ok(id)
    }

    /// Copy a named parameter onto the tape as a frozen constant.
    pub fn bind_frozen(
        &mut self,
        tape: &mut Tape,
        store: &ParamStore,
        name: &str,
    ) -> Result<TensorId> {
        store.constant(tape, name)
    }

    /// Accumulate the tape's gradients for every bound parameter.
    pub fn harvest(&self, tape: &Tape, grads: &mut GradStore) {
        for (name, id) in &self.bound {
            if let Some(g) = tape.grad(*id) {
                grads.accumulate(name, g);
            }
        }
    }
}

/// Name-prefixed parameter access for one forward pass: binds tensors as
/// trainable leaves or frozen constants depending on the pass.
pub struct Bind<'a> {
    store: &'a ParamStore,
    binding: &'a mut ParamBinding,
    trainable: bool,
    prefix: &'a str,
}

impl<'a> Bind<'a> {
    pub fn new(
        store: &'a ParamStore,
        binding: &'a mut ParamBinding,
        trainable: bool,
        prefix: &'a str,
    ) -> Self {
        Self { store, binding, trainable, prefix }
    }

    pub fn get(&mut self, tape: &mut Tape, name: &str) -> Result<TensorId> {
        let full = format!("{}{}", self.prefix, name);
        if self.trainable {
            self.binding.bind(tape, self.store, &full)
        } else {
            self.binding.bind_frozen(tape, self.store, &full)
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Re-scope to a nested prefix, sharing the same binding.
    pub fn scoped<'b>(&'b mut self, prefix: &'b str) -> Bind<'b>
    where
        'a: 'b,
    {
        Bind {
            store: self.store,
            binding: self.binding,
            trainable: self.trainable,
            prefix,
        }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Uniform init in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, seeded from the
/// global seed and the parameter name so initialization does not depend on
/// insertion order.
pub fn init_uniform(seed: u64, name: &str, fan_in: usize, len: usize) -> Vec<f32> {
    let mut key = seed ^ 0x6a09e667f3bcc908;
    for b in name.bytes() {
        key = splitmix(key ^ u64::from(b).wrapping_mul(0x9e3779b97f4a7c15));
    }
    let bound = 1.0 / (fan_in.max(1) as f32).sqrt();
    (0..len)
        .map(|i| {
            let u = (splitmix(key.wrapping_add((i as u64 + 1).wrapping_mul(0x9e3779b97f4a7c15)))
                >> 40) as f32
                / (1u64 << 24) as f32;
            (2.0 * u - 1.0) * bound
        })
        .collect()
}

/// Adam over a whole [`ParamStore`].
#[derive(Debug)]
pub struct Optimizer {
    cfg: AdamConfig,
    state: BTreeMap<String, AdamState>,
    step: u64,
}

impl Optimizer {
    pub fn new(cfg: AdamConfig) -> Self {
        Self { cfg, state: BTreeMap::new(), step: 0 }
    }

    /// Apply one update with the given learning rate. Parameters without a
    /// gradient this batch are left untouched.
    pub fn step(&mut self, params: &mut ParamStore, grads: &GradStore, lr: f32) {
        self.step += 1;
        for (name, tensor) in params.tensors.iter_mut() {
            if let Some(g) = grads.get(name) {
                let st = self
                    .state
                    .entry(name.clone())
                    .or_insert_with(|| AdamState::zeros(tensor.data.len()));
                adam_step(&mut tensor.data, g, st, self.step, lr, &self.cfg);
            }
        }
    }
}
