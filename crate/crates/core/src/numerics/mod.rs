//! Minimal dense f64 tensor arithmetic with reverse-mode differentiation.
//!
//! Everything is 64-bit and define-by-run: a [`Graph`] is rebuilt for every
//! training step, records each operation as it executes, and replays them in
//! reverse for the backward pass. No fusion, no broadcasting beyond what a
//! small transformer encoder needs.

mod graph;

pub use graph::{Graph, NodeId, Reduction};

use crate::error::NumericsError;

/// Sentinel target index meaning "this row does not contribute to the loss".
pub const IGNORE_TARGET: u32 = u32::MAX;

/// A dense row-major f64 tensor. Plain data, no graph attachment; immutable
/// tensors are safe to share across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Self {
        let n: usize = shape.iter().product();
        assert_eq!(n, values.len(), "shape {shape:?} does not match {} values", values.len());
        Tensor { shape, values }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, values: vec![0.0; n] }
    }

    pub fn filled(shape: Vec<usize>, v: f64) -> Self {
        let n = shape.iter().product();
        Tensor { shape, values: vec![v; n] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], values: vec![v] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// NaN/Inf is an error state, never silent.
    pub fn check_finite(&self, context: &str) -> Result<(), NumericsError> {
        if self.values.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(NumericsError::NonFinite { context: context.to_string() })
        }
    }
}

/// A learnable parameter: a value tensor plus a same-shape gradient
/// accumulator. Gradients sum across backward passes until [`Param::zero_grad`].
#[derive(Debug, Clone)]
pub struct Param {
    pub value: Tensor,
    pub grad: Vec<f64>,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        let grad = vec![0.0; value.len()];
        Param { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn accumulate(&mut self, grad: &[f64]) {
        assert_eq!(grad.len(), self.grad.len(), "gradient length mismatch");
        for (a, g) in self.grad.iter_mut().zip(grad) {
            *a += g;
        }
    }
}
