//! Named parameter storage shared by every learnable layer.

use std::collections::HashMap;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    /// Updated by the optimizer.
    Weight,
    /// Carried state such as batch-norm running statistics.
    Buffer,
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub role: Role,
    pub value: Tensor<T>,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, role: Role, value: Tensor<T>) {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(Param { name, role, value });
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.entries.iter_mut()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.position(name)
            .map(|i| &self.entries[i].value)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        match self.position(name) {
            Some(i) => Ok(&mut self.entries[i].value),
            None => Err(Error::Config(format!("unknown parameter {name}"))),
        }
    }

    /// Number of scalar weights (buffers excluded).
    pub fn weight_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|p| p.role == Role::Weight)
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    role: p.role,
                    value: p.value.cast(),
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Places every weight on the graph; `trainable` decides whether they
    /// receive gradients.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|p| match p.role {
                Role::Weight => Some(g.leaf(p.value.clone(), trainable)),
                Role::Buffer => None,
            })
            .collect();
        Bound {
            vars,
            index: self.index.clone(),
        }
    }
}

impl<T: Real> ParamStore<T> {
    /// Weight tensors in store order.
    pub fn weight_values(&self) -> Vec<Tensor<T>> {
        self.entries
            .iter()
            .filter(|p| p.role == Role::Weight)
            .map(|p| p.value.clone())
            .collect()
    }

    /// Binds existing graph nodes, one per weight in store order, in place
    /// of the stored values.
    pub fn bind_vars(&self, weights: &[Var]) -> Result<Bound> {
        let mut it = weights.iter().copied();
        let vars: Vec<Option<Var>> = self
            .entries
            .iter()
            .map(|p| match p.role {
                Role::Weight => it.next(),
                Role::Buffer => None,
            })
            .collect();
        let expected = self.entries.iter().filter(|p| p.role == Role::Weight).count();
        if weights.len() != expected {
            return Err(Error::Contract(format!("{} vars for {expected} weights", weights.len())));
        }
        Ok(Bound {
            vars,
            index: self.index.clone(),
        })
    }
}

/// Graph handles of a bound [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Option<Var>>,
    index: HashMap<String, usize>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .and_then(|&i| self.vars[i])
            .ok_or_else(|| Error::Config(format!("parameter {name} is not bound")))
    }

    /// `(store position, var)` for every bound weight.
    pub fn weights(&self) -> impl Iterator<Item = (usize, Var)> + '_ {
        self.vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (i, v)))
    }
}

/// Deterministic initializers. Values are drawn in `f64` and cast, so `f32`
/// and `f64` models built from one seed agree to single precision.
pub(crate) struct Init<'a> {
    pub rng: &'a mut ChaCha8Rng,
}

impl Init<'_> {
    /// Zero-mean normal with standard deviation `√(gain / fan_in)`.
    pub fn fan_in<T: Real>(&mut self, shape: &[usize], fan_in: usize, gain: f64) -> Tensor<T> {
        let std = (gain / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        Tensor::from_fn(shape, |_| T::from_f64(normal.sample(self.rng)))
    }
}

/// Registers `gamma`, `beta` and running statistics for a batch-norm layer.
pub(crate) fn insert_batch_norm<T: Real>(store: &mut ParamStore<T>, prefix: &str, channels: usize) {
    store.insert(format!("{prefix}.gamma"), Role::Weight, Tensor::full(&[channels], T::ONE));
    store.insert(format!("{prefix}.beta"), Role::Weight, Tensor::zeros(&[channels]));
    store.insert(format!("{prefix}.running_mean"), Role::Buffer, Tensor::zeros(&[channels]));
    store.insert(format!("{prefix}.running_var"), Role::Buffer, Tensor::full(&[channels], T::ONE));
}
