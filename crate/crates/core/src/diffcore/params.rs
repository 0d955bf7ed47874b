use std::collections::BTreeMap;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Ordered map of named tensors. Used both for parameters and for the
/// gradients reported against them.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.entries.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::MissingInput(name.to_owned()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar values across all entries.
    pub fn numel(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    pub fn norm(&self) -> f64 {
        self.entries
            .values()
            .map(Tensor::norm_sq)
            .sum::<f64>()
            .sqrt()
    }

    /// Entries whose name starts with `group.`.
    pub fn group<'a>(&'a self, group: &'a str) -> impl Iterator<Item = (&'a str, &'a Tensor)> {
        self.iter()
            .filter(move |(name, _)| name.split('.').next() == Some(group))
    }

    pub fn is_finite(&self) -> bool {
        self.entries.values().all(Tensor::is_finite)
    }

    /// `self += scale · other` over matching names; names missing from
    /// `other` are left untouched.
    pub fn axpy(&mut self, scale: f64, other: &ParamSet) -> Result<()> {
        for (name, t) in self.entries.iter_mut() {
            if let Some(o) = other.get(name) {
                if o.shape() != t.shape() {
                    return Err(Error::invalid(format!(
                        "`{name}`: {:?} vs {:?}",
                        t.shape(),
                        o.shape()
                    )));
                }
                for (a, b) in t.data_mut().iter_mut().zip(o.data()) {
                    *a += scale * b;
                }
            }
        }
        Ok(())
    }
}
