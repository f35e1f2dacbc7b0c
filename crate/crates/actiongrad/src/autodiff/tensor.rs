//! Dense f64 tensors (rank 1 or 2) used for parameters and tape leaves.

use crate::rng::RngStream;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// A dense, row-major f64 tensor of rank 1 or 2.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if shape.is_empty() || shape.len() > 2 {
            return Err(Error::Config(format!(
                "tensor rank must be 1 or 2, got shape {shape:?}"
            )));
        }
        if len != values.len() {
            return Err(Error::Config(format!(
                "shape {shape:?} wants {len} values, got {}",
                values.len()
            )));
        }
        Ok(Tensor { shape, values, requires_grad: false })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Tensor { shape, values: vec![0.0; len], requires_grad: false }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], values: vec![v], requires_grad: false }
    }

    pub fn row(values: Vec<f64>) -> Self {
        Tensor { shape: vec![1, values.len()], values, requires_grad: false }
    }

    /// Uniform init on [-bound, bound) with bound = 1/sqrt(fan_in), the
    /// standard scheme for small dense layers.
    pub fn uniform_init(shape: Vec<usize>, fan_in: usize, rng: &mut RngStream) -> Self {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let len = shape.iter().product();
        let values = (0..len).map(|_| rng.uniform_in(-bound, bound)).collect();
        Tensor { shape, values, requires_grad: false }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    /// (rows, cols) view: rank-1 tensors are treated as a single row.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            _ => unreachable!("rank checked at construction"),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}
