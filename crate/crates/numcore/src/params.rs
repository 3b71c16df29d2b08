use std::collections::HashMap;

use crate::element::Element;
use crate::error::{NumError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Ordered collection of named parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    lookup: HashMap<String, usize>,
}

impl<T: Element> Default for ParamSet<T> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            lookup: HashMap::new(),
        }
    }
}

impl<T: Element> ParamSet<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces a tensor under `name`.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        let name = name.into();
        if let Some(&i) = self.lookup.get(&name) {
            self.tensors[i] = tensor;
            return ParamId(i);
        }
        let i = self.tensors.len();
        self.lookup.insert(name.clone(), i);
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(i)
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.lookup
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| NumError::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.lookup.contains_key(name)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Result<&Tensor<T>> {
        Ok(self.get(self.id(name)?))
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

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Releases every gradient buffer.
    pub fn clear_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::clear_grad);
    }

    /// Total number of scalars across all tensors.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Element>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            lookup: self.lookup.clone(),
        }
    }

    /// Removes every tensor whose name starts with `prefix`.
    pub fn remove_prefixed(&mut self, prefix: &str) {
        let keep: Vec<_> = self
            .names
            .drain(..)
            .zip(self.tensors.drain(..))
            .filter(|(n, _)| !n.starts_with(prefix))
            .collect();
        self.lookup.clear();
        for (n, t) in keep {
            self.lookup.insert(n.clone(), self.names.len());
            self.names.push(n);
            self.tensors.push(t);
        }
    }
}
