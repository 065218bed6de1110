use std::collections::BTreeMap;

use crate::error::{NumError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub frozen: bool,
}

/// Named parameters of one network component.
///
/// Buffers (batch-norm running statistics) live alongside the parameters but
/// never receive gradients or optimizer updates.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    params: BTreeMap<String, Param>,
    buffers: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) || self.buffers.contains_key(&name) {
            return Err(NumError::Contract(format!("duplicate parameter {name}")));
        }
        self.params.insert(name, Param { value, frozen: false });
        Ok(())
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) || self.buffers.contains_key(&name) {
            return Err(NumError::Contract(format!("duplicate buffer {name}")));
        }
        self.buffers.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| NumError::Config(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| NumError::Config(format!("unknown parameter {name}")))
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor> {
        self.buffers
            .get(name)
            .ok_or_else(|| NumError::Config(format!("unknown buffer {name}")))
    }

    pub fn buffer_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.buffers
            .get_mut(name)
            .ok_or_else(|| NumError::Config(format!("unknown buffer {name}")))
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.params.get(name).is_some_and(|p| p.frozen)
    }

    pub fn set_frozen(&mut self, name: &str, frozen: bool) -> Result<()> {
        self.params
            .get_mut(name)
            .map(|p| p.frozen = frozen)
            .ok_or_else(|| NumError::Config(format!("unknown parameter {name}")))
    }

    pub fn freeze_all(&mut self, frozen: bool) {
        for p in self.params.values_mut() {
            p.frozen = frozen;
        }
    }

    pub fn all_frozen(&self) -> bool {
        self.params.values().all(|p| p.frozen)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.buffers.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn clear_grads(&mut self) {
        for p in self.params.values_mut() {
            p.value.clear_grad();
        }
    }

    /// Bitwise comparison of parameter values (buffers excluded).
    pub fn same_values(&self, other: &ParamSet) -> bool {
        self.params.len() == other.params.len()
            && self.params.iter().all(|(k, p)| {
                other.params.get(k).is_some_and(|q| {
                    p.value.shape() == q.value.shape()
                        && p.value
                            .data()
                            .iter()
                            .zip(q.value.data())
                            .all(|(a, b)| a.to_bits() == b.to_bits())
                })
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut ps = ParamSet::new();
        ps.insert("w", Tensor::zeros(&[2])).unwrap();
        assert!(ps.insert("w", Tensor::zeros(&[2])).is_err());
        assert!(ps.insert_buffer("w", Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn freeze_flags() {
        let mut ps = ParamSet::new();
        ps.insert("a", Tensor::zeros(&[1])).unwrap();
        ps.insert("b", Tensor::zeros(&[1])).unwrap();
        ps.set_frozen("a", true).unwrap();
        assert!(ps.is_frozen("a") && !ps.is_frozen("b"));
        ps.freeze_all(true);
        assert!(ps.all_frozen());
    }
}
