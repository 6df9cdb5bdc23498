//! Trainable parameters: value, accumulated gradient, and momentum state.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A trainable tensor with its gradient and velocity buffers.
///
/// Biases carry a learning-rate multiplier of 2, weights 1.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub velocity: Tensor,
    pub is_bias: bool,
    pub lr_multiplier: f64,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor, is_bias: bool) -> Parameter {
        let grad = Tensor::zeros_like(&value);
        let velocity = Tensor::zeros_like(&value);
        Parameter {
            name: name.into(),
            value,
            grad,
            velocity,
            is_bias,
            lr_multiplier: if is_bias { 2.0 } else { 1.0 },
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn check_finite_grad(&self) -> Result<()> {
        if self.grad.all_finite() {
            Ok(())
        } else {
            Err(Error::GradientNotFinite(self.name.clone()))
        }
    }
}
