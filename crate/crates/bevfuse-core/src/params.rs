//! Flat registry of learnable parameters.
//!
//! Model components register tensors here at construction time and keep
//! [`ParamRef`] handles. Each training step inserts every parameter as a tape
//! leaf (in registration order), so a `ParamRef` doubles as an index into the
//! per-step `Vec<Var>`.

use alloc::string::String;
use alloc::vec::Vec;

use crate::rng::Stream;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Handle to one registered parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamRef(pub usize);

impl ParamRef {
    #[inline]
    pub fn var(self, vars: &[Var]) -> Var {
        vars[self.0]
    }
}

/// Named parameter tensors in registration order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: String, tensor: Tensor) -> ParamRef {
        self.entries.push((name, tensor));
        ParamRef(self.entries.len() - 1)
    }

    /// Weight init: uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)].
    pub fn register_uniform(
        &mut self,
        name: String,
        shape: &[usize],
        fan_in: usize,
        stream: &mut Stream,
    ) -> ParamRef {
        let bound = 1.0 / crate::mathf::sqrt(fan_in.max(1) as f64);
        self.register(name, Tensor::rand_uniform(shape, -bound, bound, stream))
    }

    pub fn register_zeros(&mut self, name: String, shape: &[usize]) -> ParamRef {
        self.register(name, Tensor::zeros(shape))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn tensor(&self, r: ParamRef) -> &Tensor {
        &self.entries[r.0].1
    }

    pub fn tensor_mut(&mut self, r: ParamRef) -> &mut Tensor {
        &mut self.entries[r.0].1
    }

    pub fn name(&self, r: ParamRef) -> &str {
        &self.entries[r.0].0
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.entries.iter().map(|(_, t)| t.clone()).collect()
    }

    pub fn set_all(&mut self, tensors: &[Tensor]) {
        debug_assert_eq!(tensors.len(), self.entries.len());
        for (e, t) in self.entries.iter_mut().zip(tensors) {
            debug_assert_eq!(e.1.shape, t.shape);
            e.1 = t.clone();
        }
    }

    /// Insert every parameter as a tape leaf, in registration order.
    pub fn leaves(&self, tape: &mut Tape) -> Vec<Var> {
        self.entries.iter().map(|(_, t)| tape.leaf(t.clone())).collect()
    }

    /// Look up a parameter by name (checkpoint loading).
    pub fn find(&self, name: &str) -> Option<ParamRef> {
        self.entries.iter().position(|(n, _)| n == name).map(ParamRef)
    }

    /// Replace all-zero parameters with small uniform values.
    ///
    /// Zero-initialized biases and offset projections leave many ReLU
    /// preactivations exactly at the kink, where central differences and the
    /// subgradient legitimately disagree; finite-difference checks run at a
    /// generic point instead.
    pub fn nudge_zeros(&mut self, scale: f64, stream: &mut Stream) {
        for (_, t) in self.entries.iter_mut() {
            if t.data.iter().all(|&v| v == 0.0) {
                *t = Tensor::rand_uniform(&t.shape.clone(), -scale, scale, stream);
            }
        }
    }
}
