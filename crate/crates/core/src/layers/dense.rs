use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::param::Parameter;
use crate::tensor::Tensor;

use super::{expect_shape, no_forward, xavier_bound, Layer, Mode};

/// Fully-connected layer `y = W^T x + b` over the flattened input.
///
/// Weights have shape `(in_len, out_len)` so column k of `W` is the
/// classifier vector of output unit k. Inputs of any rank are accepted and
/// flattened row-major; the backward pass restores the original shape.
pub struct FullyConnected {
    name: String,
    in_len: usize,
    out_len: usize,
    weight: Parameter,
    bias: Parameter,
    cached_input: Option<Tensor>,
}

impl FullyConnected {
    pub fn new(
        name: impl Into<String>,
        in_len: usize,
        out_len: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<FullyConnected> {
        let weight =
            Tensor::random_uniform_with(&[in_len, out_len], xavier_bound(in_len, out_len), rng)?;
        let bias = Tensor::zeros(&[out_len])?;
        FullyConnected::with_params(name, weight, bias)
    }

    pub fn with_params(
        name: impl Into<String>,
        weight: Tensor,
        bias: Tensor,
    ) -> Result<FullyConnected> {
        let name = name.into();
        let (in_len, out_len) = match weight.shape() {
            [i, o] => (*i, *o),
            other => {
                return Err(Error::InvalidShape(format!(
                    "fc weight must be rank 2, got {other:?}"
                )))
            }
        };
        expect_shape(&bias, &[out_len], "fc bias")?;
        Ok(FullyConnected {
            weight: Parameter::new(format!("{name}.weight"), weight, false),
            bias: Parameter::new(format!("{name}.bias"), bias, true),
            name,
            in_len,
            out_len,
        cached_input: None,
        })
    }

    pub fn in_len(&self) -> usize {
        self.in_len
    }

    pub fn out_len(&self) -> usize {
        self.out_len
    }
}

impl Layer for FullyConnected {
    fn name(&self) -> &str {
        &self.name
    }

    fn forward(&mut self, input: &Tensor, _mode: Mode) -> Result<Tensor> {
        if input.len() != self.in_len {
            return Err(Error::InvalidShape(format!(
                "{}: expected {} input elements, got {} (shape {:?})",
                self.name,
                self.in_len,
                input.len(),
                input.shape()
            )));
        }
        let x = input.data();
        let w = self.weight.value.data();
        let mut out = self.bias.value.data().to_vec();
        for (i, &xv) in x.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let row = &w[i * self.out_len..(i + 1) * self.out_len];
            for (o, wv) in row.iter().enumerate() {
                out[o] += xv * wv;
            }
        }
        self.cached_input = Some(input.clone());
        Tensor::from_vec(&[self.out_len], out)
    }

    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let input = self
            .cached_input
            .as_ref()
            .ok_or_else(|| no_forward(&self.name))?;
        expect_shape(grad_out, &[self.out_len], "fc grad_out")?;
        let x = input.data();
        let w = self.weight.value.data();
        let g = grad_out.data();
        let dw = self.weight.grad.data_mut();
        let db = self.bias.grad.data_mut();
        for (o, &gv) in g.iter().enumerate() {
            db[o] += gv;
        }
        let mut dx = vec![0.0; self.in_len];
        for i in 0..self.in_len {
            let row = &w[i * self.out_len..(i + 1) * self.out_len];
            let drow = &mut dw[i * self.out_len..(i + 1) * self.out_len];
            let xv = x[i];
            let mut acc = 0.0;
            for (o, &gv) in g.iter().enumerate() {
                drow[o] += xv * gv;
                acc += row[o] * gv;
            }
            dx[i] = acc;
        }
        Tensor::from_vec(input.shape(), dx)
    }

    fn params(&self) -> Vec<&Parameter> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.weight, &mut self.bias]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_weights_pass_through() {
        let mut w = Tensor::zeros(&[3, 3]).unwrap();
        for i in 0..3 {
            *w.at_mut(&[i, i]) = 1.0;
        }
        let mut fc = FullyConnected::with_params("f", w, Tensor::zeros(&[3]).unwrap()).unwrap();
        let x = Tensor::from_vec(&[3], vec![0.5, -2.0, 3.0]).unwrap();
        let y = fc.forward(&x, Mode::Eval).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn flattens_spatial_input_and_restores_shape_in_backward() {
        let w = Tensor::filled(&[4, 2], 1.0).unwrap();
        let mut fc = FullyConnected::with_params("f", w, Tensor::zeros(&[2]).unwrap()).unwrap();
        let x = Tensor::from_vec(&[2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = fc.forward(&x, Mode::Eval).unwrap();
        assert_eq!(y.data(), &[10.0, 10.0]);
        let dx = fc
            .backward(&Tensor::from_vec(&[2], vec![1.0, 0.0]).unwrap())
            .unwrap();
        assert_eq!(dx.shape(), &[2, 2, 1]);
        assert_eq!(dx.data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn wrong_input_length_is_rejected() {
        let w = Tensor::zeros(&[4, 2]).unwrap();
        let mut fc = FullyConnected::with_params("f", w, Tensor::zeros(&[2]).unwrap()).unwrap();
        let x = Tensor::zeros(&[5]).unwrap();
        assert!(matches!(
            fc.forward(&x, Mode::Eval),
            Err(Error::InvalidShape(_))
        ));
    }
}
