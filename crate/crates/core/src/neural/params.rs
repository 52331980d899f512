//! Named parameter tensors with paired double-precision gradient buffers.

use std::collections::HashMap;

use rand::Rng;

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Parameter tensors addressed by unique name or [`ParamId`].
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> Default for Params<T> {
    fn default() -> Self {
        Params {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<T: Real> Params<T> {
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> Params<U> {
        Params {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
            index: self.index.clone(),
        }
    }
}

/// Gradient accumulators laid out like a [`Params`] set. Worker-local buffers
/// are merged with [`GradBuffer::add`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradBuffer {
    grads: Vec<Vec<f64>>,
}

impl GradBuffer {
    pub fn zeros_like<T: Real>(params: &Params<T>) -> Self {
        GradBuffer {
            grads: params.tensors.iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.grads[id.0]
    }

    /// `grad[id] += scale * values`.
    pub fn accumulate<T: Real>(&mut self, id: ParamId, values: &[T], scale: f64) {
        let g = &mut self.grads[id.0];
        debug_assert_eq!(g.len(), values.len());
        for (a, &v) in g.iter_mut().zip(values) {
            *a += scale * v.to_f64_lossless();
        }
    }

    pub fn add(&mut self, other: &GradBuffer) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn zero(&mut self) {
        for g in &mut self.grads {
            g.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.grads {
            g.iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn norm(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|g| g.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.grads.iter().flatten().all(|&x| x == 0.0)
    }

    /// First parameter holding a non-finite gradient, if any.
    pub fn first_non_finite(&self) -> Option<ParamId> {
        self.grads
            .iter()
            .position(|g| g.iter().any(|x| !x.is_finite()))
            .map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.grads.iter().map(|g| g.as_slice())
    }
}

/// Parameters θ together with their gradient accumulators.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T = f32> {
    pub params: Params<T>,
    pub grads: GradBuffer,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore {
            params: Params::default(),
            grads: GradBuffer { grads: Vec::new() },
        }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.params.index.contains_key(&name) {
            return Err(Error::param(format!("duplicate parameter name `{name}`")));
        }
        let id = self.params.tensors.len();
        self.grads.grads.push(vec![0.0; tensor.len()]);
        self.params.index.insert(name.clone(), id);
        self.params.names.push(name);
        self.params.tensors.push(tensor);
        Ok(ParamId(id))
    }

    /// Adds a weight drawn uniformly from (-1/sqrt(fan_in), 1/sqrt(fan_in)).
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut impl Rng,
    ) -> Result<ParamId> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| T::of(rng.random_range(-bound..bound)))
            .collect();
        self.add(name, Tensor::from_vec(shape, data)?)
    }

    pub fn zero_grads(&mut self) {
        self.grads.zero();
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self.params.cast(),
            grads: self.grads.clone(),
        }
    }

    /// Replaces every tensor with `params`, which must have identical names and shapes.
    pub fn set_params(&mut self, params: Params<T>) -> Result<()> {
        if params.names != self.params.names {
            return Err(Error::param("parameter names differ"));
        }
        for (a, b) in self.params.tensors.iter().zip(&params.tensors) {
            a.same_shape(b, "set_params")?;
        }
        self.params = params;
        Ok(())
    }
}
