//! Named, trainable parameter storage.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Every learnable tensor of a model, in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), tensors: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    /// Registers a tensor with entries drawn from `N(0, std²)`.
    pub fn add_normal<R: Rng + ?Sized>(&mut self, name: impl Into<String>, shape: &[usize], std: f64, rng: &mut R) -> ParamId {
        let normal = Normal::new(0.0, std).expect("std is finite and non-negative");
        let n = shape.iter().product();
        let values = (0..n).map(|_| T::of(normal.sample(rng))).collect();
        let t = Tensor::new(shape.to_vec(), values).expect("shape matches sample count");
        self.add(name, t)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.tensors.iter_mut()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Installs zeroed gradient slots on every parameter.
    pub fn zero_grad(&mut self) {
        for t in &mut self.tensors {
            t.clear_grad();
            t.ensure_grad();
        }
    }

    pub fn clear_grad(&mut self) {
        for t in &mut self.tensors {
            t.clear_grad();
        }
    }

    /// Replaces the values of `id`, keeping its shape.
    pub fn set_values(&mut self, id: ParamId, values: &[T]) -> Result<()> {
        let t = &mut self.tensors[id.0];
        if t.len() != values.len() {
            return Err(Error::Shape(format!(
                "{}: expected {} values, got {}",
                self.names[id.0],
                t.len(),
                values.len()
            )));
        }
        t.values_mut().copy_from_slice(values);
        Ok(())
    }

    /// Euclidean norm over every populated gradient slot.
    pub fn grad_norm(&self) -> T {
        self.tensors
            .iter()
            .filter_map(|t| t.grad())
            .flat_map(|g| g.iter().map(|&v| v * v))
            .sum::<T>()
            .sqrt()
    }

    /// Every parameter value, concatenated in registration order.
    pub fn flat_values(&self) -> Vec<T> {
        self.tensors.iter().flat_map(|t| t.values().iter().copied()).collect()
    }

    /// Concatenated gradients, zeros where a slot is empty.
    pub fn flat_grad(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.num_values());
        for t in &self.tensors {
            match t.grad() {
                Some(g) => out.extend_from_slice(g),
                None => out.extend(std::iter::repeat_n(T::zero(), t.len())),
            }
        }
        out
    }
}
