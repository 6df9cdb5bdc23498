use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{dims3, expect_shape, no_forward, Layer, Mode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolSpec {
    pub window: (usize, usize),
    pub stride: (usize, usize),
}

impl PoolSpec {
    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (wh, ww) = self.window;
        let (sh, sw) = self.stride;
        if wh == 0 || ww == 0 || sh == 0 || sw == 0 {
            return Err(Error::InvalidShape("pool window/stride must be >= 1".into()));
        }
        if wh > h || ww > w {
            return Err(Error::InvalidShape(format!(
                "pool window {wh}x{ww} larger than input {h}x{w}"
            )));
        }
        Ok(((h - wh) / sh + 1, (w - ww) / sw + 1))
    }
}

/// Per-channel max pooling. The backward pass routes the gradient to the
/// argmax position only; ties go to the first element in row-major order.
pub struct MaxPool2d {
    name: String,
    spec: PoolSpec,
    cached: Option<PoolCache>,
}

struct PoolCache {
    input_shape: [usize; 3],
    // Flat input index of the winner for each output element.
    argmax: Vec<usize>,
}

impl MaxPool2d {
    pub fn new(name: impl Into<String>, spec: PoolSpec) -> MaxPool2d {
        MaxPool2d {
            name: name.into(),
            spec,
            cached: None,
        }
    }
}

impl Layer for MaxPool2d {
    fn name(&self) -> &str {
        &self.name
    }

    fn forward(&mut self, input: &Tensor, _mode: Mode) -> Result<Tensor> {
        let (h, w, c) = dims3(input)?;
        let (oh, ow) = self.spec.output_size(h, w)?;
        let (wh, ww) = self.spec.window;
        let (sh, sw) = self.spec.stride;
        let x = input.data();
        let mut out = vec![0.0; oh * ow * c];
        let mut argmax = vec![0usize; oh * ow * c];
        for oi in 0..oh {
            for oj in 0..ow {
                let out_base = (oi * ow + oj) * c;
                for ch in 0..c {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    for ki in 0..wh {
                        let ii = oi * sh + ki;
                        for kj in 0..ww {
                            let jj = oj * sw + kj;
                            let idx = (ii * w + jj) * c + ch;
                            // Strict comparison keeps the first (row-major)
                            // maximum on ties.
                            if x[idx] > best {
                                best = x[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out[out_base + ch] = best;
                    argmax[out_base + ch] = best_idx;
                }
            }
        }
        self.cached = Some(PoolCache {
            input_shape: [h, w, c],
            argmax,
        });
        Tensor::from_vec(&[oh, ow, c], out)
    }

    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let cache = self.cached.as_ref().ok_or_else(|| no_forward(&self.name))?;
        let [h, w, c] = cache.input_shape;
        let (oh, ow) = self.spec.output_size(h, w)?;
        expect_shape(grad_out, &[oh, ow, c], "pool grad_out")?;
        let mut dx = vec![0.0; h * w * c];
        for (g, &idx) in grad_out.data().iter().zip(cache.argmax.iter()) {
            dx[idx] += g;
        }
        Tensor::from_vec(&[h, w, c], dx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn max_of_window() {
        let input = Tensor::from_vec(&[2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut pool = MaxPool2d::new(
            "p",
            PoolSpec {
                window: (2, 2),
                stride: (2, 2),
            },
        );
        let out = pool.forward(&input, Mode::Eval).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1]);
        assert_eq!(out.data(), &[4.0]);
    }

    #[test]
    fn constant_input_stays_constant() {
        let input = Tensor::filled(&[4, 4, 2], 3.5).unwrap();
        let mut pool = MaxPool2d::new(
            "p",
            PoolSpec {
                window: (2, 2),
                stride: (2, 2),
            },
        );
        let out = pool.forward(&input, Mode::Eval).unwrap();
        assert!(out.data().iter().all(|&v| v == 3.5));
    }

    #[test]
    fn backward_routes_to_argmax() {
        let input = Tensor::from_vec(&[2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut pool = MaxPool2d::new(
            "p",
            PoolSpec {
                window: (2, 2),
                stride: (2, 2),
            },
        );
        pool.forward(&input, Mode::Eval).unwrap();
        let dx = pool
            .backward(&Tensor::filled(&[1, 1, 1], 1.0).unwrap())
            .unwrap();
        assert_eq!(dx.data(), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn ties_break_to_first_in_row_major_order() {
        let input = Tensor::filled(&[2, 2, 1], 7.0).unwrap();
        let mut pool = MaxPool2d::new(
            "p",
            PoolSpec {
                window: (2, 2),
                stride: (2, 2),
            },
        );
        pool.forward(&input, Mode::Eval).unwrap();
        let dx = pool
            .backward(&Tensor::filled(&[1, 1, 1], 1.0).unwrap())
            .unwrap();
        assert_eq!(dx.data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn oversized_window_is_rejected() {
        let input = Tensor::zeros(&[2, 2, 1]).unwrap();
        let mut pool = MaxPool2d::new(
            "p",
            PoolSpec {
                window: (3, 3),
                stride: (1, 1),
            },
        );
        assert!(matches!(
            pool.forward(&input, Mode::Eval),
            Err(Error::InvalidShape(_))
        ));
    }
}
