use std::collections::BTreeMap;

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

/// Named parameter tensors, ordered by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    map: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.map.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.map
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.map.values().map(|t| t.len()).sum()
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.map.remove(name)
    }

    /// Moves every entry of `other` in, prefixing names.
    pub fn extend_prefixed(&mut self, prefix: &str, other: ParamStore) {
        for (k, v) in other.map {
            self.map.insert(format!("{prefix}{k}"), v);
        }
    }

    /// Entries whose names start with `prefix`, with the prefix stripped.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        ParamStore {
            map: self
                .map
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
                .collect(),
        }
    }

    pub fn init_normal(&mut self, rng: &mut Rng, name: &str, dims: &[usize], std: f32) {
        let n = dims.iter().product();
        let t = Tensor::new(dims.to_vec(), rng::normal_vec(rng, n, std)).expect("positive dims");
        self.insert(name, t);
    }

    pub fn init_const(&mut self, name: &str, dims: &[usize], v: f32) {
        self.insert(name, Tensor::full(dims, v));
    }
}
