//! Minimal neural-network backbone: a flat parameter arena, convolution and
//! transposed-convolution layers with explicit backward passes, pointwise
//! activations, and an Adam optimizer.
//!
//! Everything is `f64` and single-threaded; heavy lifting goes through one
//! GEMM per layer (im2col / col2im). The arena keeps every parameter and its
//! gradient in one addressable store, which makes optimizer steps, freezing,
//! checkpoint serialization and finite-difference checks uniform.

pub mod activation;
pub mod adam;
pub mod conv;

pub use activation::{PRelu, Sigmoid, Tanh};
pub use adam::Adam;
pub use conv::{Conv2d, ConvTranspose2d};

use rand::Rng;
use rand_distr::StandardNormal;

/// Handle to one parameter tensor inside a [`ParamArena`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Debug, Clone)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    value: Vec<f64>,
    grad: Vec<f64>,
    trainable: bool,
}

/// Flat store of all parameters of a model, with matching gradient buffers.
#[derive(Debug, Clone, Default)]
pub struct ParamArena {
    entries: Vec<ParamEntry>,
}

impl ParamArena {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn alloc(&mut self, name: impl Into<String>, shape: &[usize], init: Vec<f64>) -> ParamId {
        let len: usize = shape.iter().product();
        assert_eq!(init.len(), len, "init length must match shape");
        self.entries.push(ParamEntry {
            name: name.into(),
            shape: shape.to_vec(),
            grad: vec![0.0; len],
            value: init,
            trainable: true,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn value(&self, id: ParamId) -> &[f64] {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.entries[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.entries[id.0].grad
    }

    pub fn shape(&self, id: ParamId) -> &[usize] {
        &self.entries[id.0].shape
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn num_params(&self) -> usize {
        self.entries.len()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn total_len(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    /// Copy of all parameter values, concatenated in allocation order.
    pub fn snapshot(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total_len());
        for e in &self.entries {
            out.extend_from_slice(&e.value);
        }
        out
    }

    pub fn restore(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.total_len(), "snapshot length mismatch");
        let mut off = 0;
        for e in &mut self.entries {
            let len = e.value.len();
            e.value.copy_from_slice(&flat[off..off + len]);
            off += len;
        }
    }

    /// Read the scalar at `flat_index` into the concatenation of all values.
    pub fn get_flat(&self, flat_index: usize) -> f64 {
        let (e, i) = self.locate(flat_index);
        self.entries[e].value[i]
    }

    pub fn set_flat(&mut self, flat_index: usize, v: f64) {
        let (e, i) = self.locate(flat_index);
        self.entries[e].value[i] = v;
    }

    pub fn grad_flat(&self, flat_index: usize) -> f64 {
        let (e, i) = self.locate(flat_index);
        self.entries[e].grad[i]
    }

    fn locate(&self, mut flat_index: usize) -> (usize, usize) {
        for (e, entry) in self.entries.iter().enumerate() {
            if flat_index < entry.value.len() {
                return (e, flat_index);
            }
            flat_index -= entry.value.len();
        }
        panic!("flat index out of range");
    }
}

/// Fan-in scaled normal initialization for a weight tensor.
pub fn fan_in_normal(rng: &mut impl Rng, len: usize, fan_in: usize, gain: f64) -> Vec<f64> {
    let std = (gain / fan_in as f64).sqrt();
    (0..len)
        .map(|_| {
            let n: f64 = rng.sample(StandardNormal);
            n * std
        })
        .collect()
}
