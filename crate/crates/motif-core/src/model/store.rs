//! Named, ordered parameter storage with mirrored gradient buffers.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use super::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

/// Ordered collection of parameter tensors. Iteration order is registration
/// order and is the serialization order of checkpoints.
#[derive(Debug, Clone)]
pub struct ParameterStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    grads: Vec<Tensor>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn register(&mut self, name: &str, value: Tensor) -> ParamId {
        let id = ParamId(self.values.len());
        self.grads.push(Tensor::zeros(value.shape()));
        self.values.push(value);
        self.names.push(name.to_string());
        id
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn n_tensors(&self) -> usize {
        self.values.len()
    }

    /// Total scalar parameter count.
    pub fn count_params(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.fill(0.0);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names
            .iter()
            .map(|s| s.as_str())
            .zip(self.values.iter())
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.values
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn grads(&self) -> &[Tensor] {
        &self.grads
    }

    /// Add an externally accumulated gradient buffer into the store's own.
    pub fn accumulate(&mut self, grads: &Gradients) {
        assert_eq!(grads.0.len(), self.grads.len());
        for (dst, src) in self.grads.iter_mut().zip(&grads.0) {
            for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
                *d += *s;
            }
        }
    }

    pub fn scale_grads(&mut self, factor: f64) {
        for g in &mut self.grads {
            for v in g.data_mut() {
                *v *= factor;
            }
        }
    }

    /// Fresh gradient buffer matching this store's shapes.
    pub fn new_gradients(&self) -> Gradients {
        Gradients(
            self.values
                .iter()
                .map(|t| Tensor::zeros(t.shape()))
                .collect(),
        )
    }
}

impl Default for ParameterStore {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-worker gradient buffer, shapes mirroring a `ParameterStore`.
#[derive(Debug, Clone)]
pub struct Gradients(pub(crate) Vec<Tensor>);

impl Gradients {
    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.0[id.0]
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.0[id.0]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.0
    }
}

/// Deterministic fan-in-scaled uniform initializer.
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn uniform(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(-bound..bound)).collect();
        Tensor::from_vec(shape, data)
    }

    pub fn constant(&mut self, shape: &[usize], v: f64) -> Tensor {
        let mut t = Tensor::zeros(shape);
        t.fill(v);
        t
    }
}
