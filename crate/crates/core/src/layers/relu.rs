use crate::error::Result;
use crate::tensor::Tensor;

use super::{expect_shape, no_forward, Layer, Mode};

/// Elementwise max(0, x). The subgradient at exactly 0 is taken as 0.
pub struct Relu {
    name: String,
    active: Option<(Vec<usize>, Vec<bool>)>,
}

impl Relu {
    pub fn new(name: impl Into<String>) -> Relu {
        Relu {
            name: name.into(),
            active: None,
        }
    }
}

impl Layer for Relu {
    fn name(&self) -> &str {
        &self.name
    }

    fn forward(&mut self, input: &Tensor, _mode: Mode) -> Result<Tensor> {
        let mask: Vec<bool> = input.data().iter().map(|&v| v > 0.0).collect();
        let out: Vec<f64> = input.data().iter().map(|&v| v.max(0.0)).collect();
        self.active = Some((input.shape().to_vec(), mask));
        Tensor::from_vec(input.shape(), out)
    }

    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let (shape, mask) = self.active.as_ref().ok_or_else(|| no_forward(&self.name))?;
        expect_shape(grad_out, shape, "relu grad_out")?;
        let dx: Vec<f64> = grad_out
            .data()
            .iter()
            .zip(mask.iter())
            .map(|(&g, &on)| if on { g } else { 0.0 })
            .collect();
        Tensor::from_vec(shape, dx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clamps_negatives() {
        let input = Tensor::from_vec(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
        let mut relu = Relu::new("r");
        let out = relu.forward(&input, Mode::Eval).unwrap();
        assert_eq!(out.data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn gradient_masked_by_sign() {
        let input = Tensor::from_vec(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
        let mut relu = Relu::new("r");
        relu.forward(&input, Mode::Eval).unwrap();
        let dx = relu
            .backward(&Tensor::from_vec(&[3], vec![5.0, 5.0, 5.0]).unwrap())
            .unwrap();
        assert_eq!(dx.data(), &[0.0, 0.0, 5.0]);
    }
}
