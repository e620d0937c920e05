//! Named parameter tensors, non-trainable buffers, and graph bindings.

use std::collections::BTreeMap;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::autograd::{Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    /// Frozen parameters are bound as constants and skipped by the optimizer.
    pub frozen: bool,
}

/// Parameters keyed by name; iteration order is the lexicographic name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.entries.insert(
            name.into(),
            Param {
                value,
                frozen: false,
            },
        );
    }

    pub fn insert_param(&mut self, name: impl Into<String>, param: Param) {
        self.entries.insert(name.into(), param);
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.entries.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    pub fn freeze_all(&mut self) {
        for p in self.entries.values_mut() {
            p.frozen = true;
        }
    }

    /// Binds every parameter into `g`; unfrozen ones become gradient leaves.
    pub fn bind(&self, g: &mut Graph) -> Bindings {
        self.bind_with(g, |p| !p.frozen)
    }

    /// Binds every parameter as a constant.
    pub fn bind_constant(&self, g: &mut Graph) -> Bindings {
        self.bind_with(g, |_| false)
    }

    fn bind_with(&self, g: &mut Graph, trainable: impl Fn(&Param) -> bool) -> Bindings {
        let vars = self
            .entries
            .iter()
            .map(|(name, p)| (name.clone(), g.leaf(p.value.clone(), trainable(p))))
            .collect();
        Bindings { vars }
    }
}

/// Graph handles for a bound [`ParamStore`].
#[derive(Debug, Clone, Default)]
pub struct Bindings {
    vars: BTreeMap<String, Var>,
}

impl Bindings {
    /// Bindings from explicit `(name, var)` pairs.
    pub fn from_vars(vars: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self {
            vars: vars.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("parameter `{name}` is not bound")))
    }

    pub fn linear(&self, prefix: &str) -> Result<Linear> {
        Ok(Linear {
            w: self.get(&format!("{prefix}.w"))?,
            b: self.get(&format!("{prefix}.b"))?,
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Non-trainable state (running normalization statistics), keyed by name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Buffers {
    entries: BTreeMap<String, Vec<f64>>,
}

impl Buffers {
    pub fn insert(&mut self, name: impl Into<String>, value: Vec<f64>) {
        self.entries.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&[f64]> {
        self.entries
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Contract(format!("buffer `{name}` is missing")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Vec<f64>> {
        self.entries.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Vec<f64>)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Affine map `x · w + b` with `w: [in, out]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: Var,
    pub b: Var,
}

impl Linear {
    pub fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        g.linear(x, self.w, self.b)
    }
}

pub(crate) fn zeros(shape: &[usize]) -> Tensor {
    ArrayD::zeros(IxDyn(shape))
}

pub(crate) fn ones(shape: &[usize]) -> Tensor {
    ArrayD::ones(IxDyn(shape))
}

/// He-normal weights for a layer with `fan_in` inputs.
pub(crate) fn he_normal<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
    ArrayD::from_shape_simple_fn(IxDyn(shape), || normal.sample(rng))
}

/// Glorot-uniform weights for a `[fan_in, fan_out]` matrix.
pub(crate) fn glorot<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit);
    ArrayD::from_shape_simple_fn(IxDyn(&[fan_in, fan_out]), || dist.sample(rng))
}

pub(crate) fn insert_linear<R: Rng>(store: &mut ParamStore, rng: &mut R, prefix: &str, fan_in: usize, fan_out: usize) {
    store.insert(format!("{prefix}.w"), glorot(rng, fan_in, fan_out));
    store.insert(format!("{prefix}.b"), zeros(&[fan_out]));
}

pub(crate) fn linear_count(fan_in: usize, fan_out: usize) -> usize {
    fan_in * fan_out + fan_out
}
