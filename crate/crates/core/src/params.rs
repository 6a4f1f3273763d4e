//! Named trainable tensors.

use std::collections::HashMap;

use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::tensor::{RngState, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Ordered store of named parameter tensors. Insertion order is the
/// serialisation order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, mut tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Invalid(format!("duplicate parameter name `{name}`")));
        }
        tensor.set_requires_grad(true);
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(ParamId(id))
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .copied()
            .map(ParamId)
            .ok_or_else(|| Error::Invalid(format!("unknown parameter `{name}`")))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.tensors[self.id(name)?.0])
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Replaces every tensor's payload with the same-named tensor from `other`.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        for (i, name) in self.names.iter().enumerate() {
            let src = other.get(name)?;
            if src.shape() != self.tensors[i].shape() {
                return Err(Error::shape("load_from", self.tensors[i].shape(), src.shape()));
            }
            self.tensors[i].data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }
}

/// Parameter initialisers drawing from a deterministic stream.
pub struct Init<'a> {
    pub rng: &'a mut RngState,
}

impl Init<'_> {
    pub fn normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        let dist = Normal::new(0.0, std).expect("finite std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(self.rng)).collect();
        Tensor::new(shape, data).expect("shape matches data")
    }

    /// Glorot-uniform for a `[fan_in, fan_out]` weight.
    pub fn xavier(&mut self, fan_in: usize, fan_out: usize) -> Tensor {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("valid bounds");
        let data = (0..fan_in * fan_out).map(|_| dist.sample(self.rng)).collect();
        Tensor::new(&[fan_in, fan_out], data).expect("shape matches data")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut p = ParamStore::new();
        p.insert("a", Tensor::zeros(&[2])).unwrap();
        assert!(p.insert("a", Tensor::zeros(&[2])).is_err());
        assert_eq!(p.id("a").unwrap(), ParamId(0));
        assert!(p.get("b").is_err());
    }

    #[test]
    fn init_is_deterministic() {
        let mut r1 = RngState::new(9);
        let mut r2 = RngState::new(9);
        let a = Init { rng: &mut r1 }.xavier(4, 3);
        let b = Init { rng: &mut r2 }.xavier(4, 3);
        assert_eq!(a, b);
    }
}
