use std::collections::BTreeMap;

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Named parameter tensors of a model, in registration order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    index: BTreeMap<String, usize>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter {name}")));
        }
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.id(name).map(move |i| &mut self.values[i])
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn value(&self, id: usize) -> &Tensor<T> {
        &self.values[id]
    }

    pub fn value_mut(&mut self, id: usize) -> &mut Tensor<T> {
        &mut self.values[id]
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    /// Names in lexicographic order, as used by checkpoints.
    pub fn sorted_names(&self) -> impl Iterator<Item = &str> {
        self.index.keys().map(String::as_str)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// FNV-1a over names, shapes and the f64 bit patterns of every value.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for (name, t) in self.iter() {
            eat(name.as_bytes());
            for &d in t.shape() {
                eat(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                eat(&v.to_f64_lossy().to_bits().to_le_bytes());
            }
        }
        h
    }
}

/// Per-parameter gradient buffers aligned with a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    grads: Vec<Vec<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn zeros_like(store: &ParamStore<T>) -> Self {
        Self {
            grads: store
                .values
                .iter()
                .map(|t| vec![T::zero(); t.numel()])
                .collect(),
        }
    }

    pub fn get(&self, id: usize) -> &[T] {
        &self.grads[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut [T] {
        &mut self.grads[id]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn accumulate(&mut self, other: &Gradients<T>) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for g in &mut self.grads {
            g.iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &[T]> {
        self.grads.iter().map(Vec::as_slice)
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(|v| v.is_finite())
    }

    pub fn l2_norm(&self) -> T {
        self.grads
            .iter()
            .flatten()
            .map(|&v| v * v)
            .sum::<T>()
            .sqrt()
    }
}
