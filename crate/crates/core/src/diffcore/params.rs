use std::collections::BTreeMap;
use std::ops::{Deref, DerefMut};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tape::{Mode, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Named parameter tensors, iterated in name order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Sum of `|theta|` over parameters whose name starts with `prefix`.
    pub fn l1_norm(&self, prefix: &str) -> f64 {
        self.tensors.iter().filter(|(k, _)| k.starts_with(prefix)).map(|(_, t)| t.l1_norm()).sum()
    }

    /// Uniform(-bound, bound) initialisation.
    pub fn init_uniform(&mut self, name: impl Into<String>, shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
        self.insert(name, Tensor::from_parts(shape.to_vec(), data));
    }

    pub fn init_const(&mut self, name: impl Into<String>, shape: &[usize], value: f64) {
        self.insert(name, Tensor::full(shape, value));
    }

    /// `{prefix}.weight` `[fan_in, fan_out]` and `{prefix}.bias` `[fan_out]`,
    /// both uniform in `±1/sqrt(fan_in)`.
    pub fn init_linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) {
        let bound = 1.0 / (fan_in as f64).sqrt();
        self.init_uniform(format!("{prefix}.weight"), &[fan_in, fan_out], bound, rng);
        self.init_uniform(format!("{prefix}.bias"), &[fan_out], bound, rng);
    }

    /// `{prefix}.gamma = 1`, `{prefix}.beta = 0`.
    pub fn init_layer_norm(&mut self, prefix: &str, width: usize) {
        self.init_const(format!("{prefix}.gamma"), &[width], 1.0);
        self.init_const(format!("{prefix}.beta"), &[width], 0.0);
    }
}

/// A tape bound to a parameter store. Parameters become tape leaves on first
/// use, so each is recorded once however often the graph reads it.
pub struct Graph<'p> {
    tape: Tape,
    params: &'p ParamStore,
    bound: BTreeMap<String, Var>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore, mode: Mode, dropout_seed: u64) -> Self {
        Self { tape: Tape::with_seed(mode, dropout_seed), params, bound: BTreeMap::new() }
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(v) = self.bound.get(name) {
            return Ok(*v);
        }
        let t = self.params.get(name).ok_or_else(|| Error::UnknownParam(name.to_string()))?.clone();
        let v = self.tape.leaf(t)?;
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    /// Gradients for every parameter in the store after `backward`;
    /// parameters never read by the graph get exact zeros.
    pub fn param_grads(&self) -> ParamStore {
        let mut out = ParamStore::new();
        for (name, t) in self.params.iter() {
            let g = match self.bound.get(name) {
                Some(v) => self.tape.grad_or_zeros(*v),
                None => Tensor::zeros(t.shape()),
            };
            out.insert(name.clone(), g);
        }
        out
    }
}

impl Deref for Graph<'_> {
    type Target = Tape;
    fn deref(&self) -> &Tape {
        &self.tape
    }
}

impl DerefMut for Graph<'_> {
    fn deref_mut(&mut self) -> &mut Tape {
        &mut self.tape
    }
}
