//! Layer vocabulary: convolution, max pooling, ReLU, fully-connected and
//! dropout, all with hand-written forward/backward passes over f64 tensors.
//!
//! A layer caches whatever it needs during `forward`; calling `backward`
//! without a preceding `forward` on the same instance is a contract error.
//! Parameter gradients accumulate across calls until explicitly cleared, so
//! mini-batches are a plain loop of forward/backward pairs.

mod conv;
mod dense;
mod dropout;
mod pool;
mod relu;

pub use conv::{Conv2d, ConvSpec};
pub use dense::FullyConnected;
pub use dropout::Dropout;
pub use pool::{MaxPool2d, PoolSpec};
pub use relu::Relu;

use crate::error::{Error, Result};
use crate::param::Parameter;
use crate::tensor::Tensor;

/// Forward-pass mode; only dropout behaves differently between the two.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub trait Layer {
    fn name(&self) -> &str;

    fn forward(&mut self, input: &Tensor, mode: Mode) -> Result<Tensor>;

    /// Propagate `grad_out` back through the cached forward pass, returning
    /// the gradient w.r.t. the input and accumulating parameter gradients.
    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor>;

    fn params(&self) -> Vec<&Parameter> {
        Vec::new()
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        Vec::new()
    }

    /// Reset any internal randomness (dropout masks). No-op for
    /// deterministic layers.
    fn reseed(&mut self, _seed: u64) {}
}

/// Glorot/Xavier uniform bound: sqrt(6 / (fan_in + fan_out)).
pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

pub(crate) fn dims3(t: &Tensor) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [h, w, c] => Ok((*h, *w, *c)),
        other => Err(Error::InvalidShape(format!(
            "expected rank-3 H x W x C tensor, got shape {other:?}"
        ))),
    }
}

pub(crate) fn no_forward(name: &str) -> Error {
    Error::Contract(format!("backward called before forward on '{name}'"))
}

pub(crate) fn expect_shape(t: &Tensor, shape: &[usize], what: &str) -> Result<()> {
    if t.shape() != shape {
        return Err(Error::InvalidShape(format!(
            "{what}: expected shape {shape:?}, got {:?}",
            t.shape()
        )));
    }
    Ok(())
}
