//! Minimal layer library with hand-written backward passes.
//!
//! Layers return an explicit [`Trace`] from training-mode forward passes so a
//! module can be applied several times before any backward pass runs (the
//! encoder sees three batches per episode). Gradients accumulate into
//! [`Param::grad`] until [`Module::zero_grad`] is called.

mod conv;
mod layer;
mod linear;
mod norm;
mod pool;

pub use conv::Conv2d;
pub use layer::{Bottleneck, Layer, Sequential, Trace};
pub use linear::Linear;
pub use norm::{Norm, NormKind};
pub use pool::MaxPool;

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
    shape: Vec<usize>,
}

impl Param {
    pub fn new(shape: &[usize], value: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let grad = vec![0.0; value.len()];
        Param {
            value,
            grad,
            shape: shape.to_vec(),
        }
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        Param::new(shape, vec![v; shape.iter().product()])
    }

    /// Normal draws scaled by `std`.
    pub fn normal(shape: &[usize], std: f64, rng: &mut Rng) -> Self {
        let n = shape.iter().product();
        let value = (0..n)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Param::new(shape, value)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Named traversal of trainable parameters and non-trainable buffers
/// (batch-norm running statistics).
pub trait Module {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param));
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param));
    fn visit_buffers(&self, _prefix: &str, _f: &mut dyn FnMut(&str, &[f64])) {}
    fn visit_buffers_mut(&mut self, _prefix: &str, _f: &mut dyn FnMut(&str, &mut Vec<f64>)) {}

    fn zero_grad(&mut self) {
        self.visit_params_mut("", &mut |_, p| p.grad.iter_mut().for_each(|g| *g = 0.0));
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, p| n += p.len());
        n
    }

    /// All parameter values concatenated in traversal order.
    fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit_params("", &mut |_, p| out.extend_from_slice(&p.value));
        out
    }

    /// All parameter gradients concatenated in traversal order.
    fn flat_grads(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit_params("", &mut |_, p| out.extend_from_slice(&p.grad));
        out
    }

    /// Mutable access to the `index`-th scalar in [`Module::flat_params`] order.
    fn with_param_scalar(&mut self, index: usize, f: &mut dyn FnMut(&mut f64)) {
        let mut offset = 0;
        let mut done = false;
        self.visit_params_mut("", &mut |_, p| {
            if !done && index < offset + p.len() {
                f(&mut p.value[index - offset]);
                done = true;
            }
            offset += p.len();
        });
        assert!(done, "parameter index {index} out of range");
    }
}
