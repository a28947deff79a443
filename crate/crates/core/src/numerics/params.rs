use std::collections::BTreeMap;

use super::{Graph, Scalar, Tensor, Var};
use crate::error::{Error, Result};

/// Named trainable arrays, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    map: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            map: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.map.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.map
            .get(name)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.map
            .get_mut(name)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.map.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total number of scalar elements.
    pub fn numel(&self) -> usize {
        self.map.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            map: self
                .map
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }
}

/// Graph handles for every entry of a [`ParamStore`].
#[derive(Clone, Debug, Default)]
pub struct ParamVars {
    map: BTreeMap<String, Var>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.map
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingParameter(name.to_string()))
    }
}

impl<T: Scalar> Graph<T> {
    /// Places every parameter on the tape as a trainable leaf.
    pub fn bind(&mut self, store: &ParamStore<T>) -> ParamVars {
        let map = store
            .iter()
            .map(|(name, t)| (name.to_string(), self.param(name, t.clone())))
            .collect();
        ParamVars { map }
    }

    /// Places every parameter on the tape as a constant (no gradients).
    pub fn bind_frozen(&mut self, store: &ParamStore<T>) -> ParamVars {
        let map = store
            .iter()
            .map(|(name, t)| (name.to_string(), self.constant(t.clone())))
            .collect();
        ParamVars { map }
    }
}
