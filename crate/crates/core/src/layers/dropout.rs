use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{expect_shape, no_forward, Layer, Mode};

/// Inverted dropout: in train mode each element is zeroed with probability
/// `rate` and survivors are scaled by 1/(1-rate); eval mode is the identity.
///
/// Masks come from an internal seeded stream that advances per train-mode
/// forward. `reseed` resets the stream, which makes the layer reproducible
/// and lets finite-difference checks re-evaluate the same mask.
pub struct Dropout {
    name: String,
    rate: f64,
    rng: ChaCha8Rng,
    cached: Option<DropoutCache>,
}

struct DropoutCache {
    shape: Vec<usize>,
    // Per-element multiplier: 0.0 (dropped) or 1/(1-rate); None for eval.
    mask: Option<Vec<f64>>,
}

impl Dropout {
    pub fn new(name: impl Into<String>, rate: f64, seed: u64) -> Result<Dropout> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!(
                "dropout rate must be in [0, 1), got {rate}"
            )));
        }
        Ok(Dropout {
            name: name.into(),
            rate,
            rng: ChaCha8Rng::seed_from_u64(seed),
            cached: None,
        })
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }
}

impl Layer for Dropout {
    fn name(&self) -> &str {
        &self.name
    }

    fn forward(&mut self, input: &Tensor, mode: Mode) -> Result<Tensor> {
        match mode {
            Mode::Eval => {
                self.cached = Some(DropoutCache {
                    shape: input.shape().to_vec(),
                    mask: None,
                });
                Ok(input.clone())
            }
            Mode::Train => {
                let keep_scale = 1.0 / (1.0 - self.rate);
                let mask: Vec<f64> = (0..input.len())
                    .map(|_| {
                        if self.rng.gen::<f64>() < self.rate {
                            0.0
                        } else {
                            keep_scale
                        }
                    })
                    .collect();
                let out: Vec<f64> = input
                    .data()
                    .iter()
                    .zip(mask.iter())
                    .map(|(&x, &m)| x * m)
                    .collect();
                self.cached = Some(DropoutCache {
                    shape: input.shape().to_vec(),
                    mask: Some(mask),
                });
                Tensor::from_vec(input.shape(), out)
            }
        }
    }

    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let cache = self.cached.as_ref().ok_or_else(|| no_forward(&self.name))?;
        expect_shape(grad_out, &cache.shape, "dropout grad_out")?;
        match &cache.mask {
            None => Ok(grad_out.clone()),
            Some(mask) => {
                let dx: Vec<f64> = grad_out
                    .data()
                    .iter()
                    .zip(mask.iter())
                    .map(|(&g, &m)| g * m)
                    .collect();
                Tensor::from_vec(&cache.shape, dx)
            }
        }
    }

    fn reseed(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }
}
