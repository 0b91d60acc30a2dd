use std::collections::HashMap;
use std::sync::Arc;

use crate::error::TensorError;
use crate::real::Real;
use crate::tensor::Tensor;

/// Index of a parameter inside a [`ParamStore`]. Ids are assigned in
/// registration order and never change.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named parameter tensors. Values are reference counted so that cloning a
/// store (taking a snapshot) is cheap; writers copy on write.
#[derive(Clone, Debug)]
pub struct ParamStore<T: Real = f32> {
    names: Vec<String>,
    values: Vec<Arc<Tensor<T>>>,
    index: HashMap<String, ParamId>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), values: Vec::new(), index: HashMap::new() }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>) -> Result<ParamId, TensorError> {
        if self.index.contains_key(name) {
            return Err(TensorError::Invalid {
                op: "param_store",
                detail: format!("duplicate parameter name {name}"),
            });
        }
        let id = ParamId(self.values.len());
        self.names.push(name.to_string());
        self.values.push(Arc::new(value));
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub(crate) fn get_arc(&self, id: ParamId) -> Arc<Tensor<T>> {
        Arc::clone(&self.values[id.0])
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.values[id.0])
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Ids sorted by parameter name (checkpoint order).
    pub fn ids_by_name(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.ids().collect();
        ids.sort_by(|a, b| self.names[a.0].cmp(&self.names[b.0]));
        ids
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(|v| Arc::new(v.cast::<U>())).collect(),
            index: self.index.clone(),
        }
    }

    /// True when both stores hold the same names, shapes and values.
    pub fn same_values(&self, other: &ParamStore<T>) -> bool {
        self.names == other.names
            && self.values.iter().zip(&other.values).all(|(a, b)| a.as_ref() == b.as_ref())
    }
}

/// Per-parameter gradients, dense and aligned with a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Grads<T: Real = f32> {
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> Grads<T> {
    pub fn zeros_like(store: &ParamStore<T>) -> Self {
        Grads { tensors: store.values.iter().map(|v| Tensor::zeros(v.shape())).collect() }
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.tensors.iter().enumerate().map(|(i, t)| (ParamId(i), t))
    }

    pub fn accumulate(&mut self, other: &Grads<T>) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x = *x + *y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        let f = T::from_f64(factor);
        for t in &mut self.tensors {
            for x in t.data_mut() {
                *x = *x * f;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors.iter().map(|t| t.sq_norm_f64()).sum::<f64>().sqrt()
    }

    /// Rescales all gradients so the global L2 norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(max_norm / norm);
        }
        norm
    }

    pub fn flatten_f64(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.to_f64_vec()).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.all_finite())
    }
}
