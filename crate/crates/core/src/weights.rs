//! Named parameter sets and their binding onto a tape.

use std::collections::BTreeMap;

use rand::Rng;

use crate::numerics::{Real, Tape, Tensor, TensorMap, Var};
use crate::{Error, Result};

/// Named tensors of one network, in sorted order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Weights<R: Real = f32> {
    map: BTreeMap<String, Tensor<R>>,
}

impl<R: Real> Weights<R> {
    pub fn new() -> Self {
        Weights { map: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<R>) {
        self.map.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<R>> {
        self.map.get(name).ok_or_else(|| Error::Config(format!("missing weight `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<R>> {
        self.map.get_mut(name).ok_or_else(|| Error::Config(format!("missing weight `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<R>)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<R>)> {
        self.map.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total scalar count.
    pub fn parameter_count(&self) -> usize {
        self.map.values().map(Tensor::len).sum()
    }

    pub fn cast<S: Real>(&self) -> Weights<S> {
        Weights { map: self.map.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    /// Move every entry of `other` in, failing on a name clash.
    pub fn merge(&mut self, other: Weights<R>) -> Result<()> {
        for (k, v) in other.map {
            if self.map.contains_key(&k) {
                return Err(Error::Config(format!("duplicate weight `{k}`")));
            }
            self.map.insert(k, v);
        }
        Ok(())
    }

    /// Entries whose name starts with `prefix`.
    pub fn with_prefix(&self, prefix: &str) -> Weights<R> {
        Weights {
            map: self.map.iter().filter(|(k, _)| k.starts_with(prefix)).map(|(k, v)| (k.clone(), v.clone())).collect(),
        }
    }

    /// Place every tensor on `tape`, as trainable leaves or as constants.
    pub fn bind(&self, tape: &mut Tape<R>, trainable: bool) -> Bound {
        let vars = self.map.iter().map(|(k, v)| (k.clone(), tape.leaf(v.clone(), trainable))).collect();
        Bound { vars }
    }

    /// Largest absolute elementwise difference over matching entries; `inf` if the
    /// name sets or shapes differ.
    pub fn max_abs_diff(&self, other: &Weights<R>) -> f64 {
        if self.map.len() != other.map.len() {
            return f64::INFINITY;
        }
        self.map.iter().fold(0.0, |acc, (k, v)| match other.map.get(k) {
            Some(o) => acc.max(v.max_abs_diff(o)),
            None => f64::INFINITY,
        })
    }
}

impl Weights<f32> {
    pub fn to_container(&self) -> TensorMap {
        self.map.clone()
    }

    pub fn from_container(map: TensorMap) -> Self {
        Weights { map }
    }
}

/// Tape handles of a bound [`Weights`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Handles for tensors already on a tape.
    pub fn from_vars(vars: impl IntoIterator<Item = (String, Var)>) -> Self {
        Bound { vars: vars.into_iter().collect() }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::Config(format!("missing weight `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Normal initialisation with standard deviation `gain / sqrt(fan_in)`.
pub(crate) fn scaled_normal<R: Real>(shape: impl Into<Vec<usize>>, fan_in: usize, gain: f64, rng: &mut impl Rng) -> Tensor<R> {
    Tensor::randn(shape, gain / (fan_in as f64).sqrt(), rng)
}
