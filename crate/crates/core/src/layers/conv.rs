use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::param::Parameter;
use crate::tensor::Tensor;

use super::{dims3, expect_shape, no_forward, xavier_bound, Layer, Mode};

/// Geometry of a 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl ConvSpec {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::InvalidShape("conv channels must be >= 1".into()));
        }
        if self.kernel.0 == 0 || self.kernel.1 == 0 {
            return Err(Error::InvalidShape("conv kernel must be >= 1x1".into()));
        }
        if self.stride.0 == 0 || self.stride.1 == 0 {
            return Err(Error::InvalidShape("conv stride must be >= 1".into()));
        }
        Ok(())
    }

    /// Output spatial size `floor((D + 2p - k)/s) + 1`; errors when the
    /// kernel does not fit in the padded input.
    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        self.validate()?;
        let oh = conv_extent(h, self.padding.0, self.kernel.0, self.stride.0)?;
        let ow = conv_extent(w, self.padding.1, self.kernel.1, self.stride.1)?;
        Ok((oh, ow))
    }
}

fn conv_extent(d: usize, p: usize, k: usize, s: usize) -> Result<usize> {
    let padded = d + 2 * p;
    if k > padded {
        return Err(Error::InvalidShape(format!(
            "kernel extent {k} exceeds padded input extent {padded}"
        )));
    }
    Ok((padded - k) / s + 1)
}

/// 2-D cross-correlation with bias.
///
/// Weights have shape `(kh, kw, Cin, Cout)`, bias `(Cout,)`; activations are
/// `H x W x C` row-major.
pub struct Conv2d {
    name: String,
    spec: ConvSpec,
    weight: Parameter,
    bias: Parameter,
    cached_input: Option<Tensor>,
}

impl Conv2d {
    pub fn new(name: impl Into<String>, spec: ConvSpec, rng: &mut ChaCha8Rng) -> Result<Conv2d> {
        spec.validate()?;
        let (kh, kw) = spec.kernel;
        let fan_in = kh * kw * spec.in_channels;
        let fan_out = kh * kw * spec.out_channels;
        let weight = Tensor::random_uniform_with(
            &[kh, kw, spec.in_channels, spec.out_channels],
            xavier_bound(fan_in, fan_out),
            rng,
        )?;
        let bias = Tensor::zeros(&[spec.out_channels])?;
        Ok(Conv2d::from_parts(name, spec, weight, bias))
    }

    /// Build from explicit weights, e.g. in tests.
    pub fn with_params(
        name: impl Into<String>,
        spec: ConvSpec,
        weight: Tensor,
        bias: Tensor,
    ) -> Result<Conv2d> {
        spec.validate()?;
        let (kh, kw) = spec.kernel;
        expect_shape(
            &weight,
            &[kh, kw, spec.in_channels, spec.out_channels],
            "conv weight",
        )?;
        expect_shape(&bias, &[spec.out_channels], "conv bias")?;
        Ok(Conv2d::from_parts(name, spec, weight, bias))
    }

    fn from_parts(name: impl Into<String>, spec: ConvSpec, weight: Tensor, bias: Tensor) -> Conv2d {
        let name = name.into();
        Conv2d {
            weight: Parameter::new(format!("{name}.weight"), weight, false),
            bias: Parameter::new(format!("{name}.bias"), bias, true),
            name,
            spec,
            cached_input: None,
        }
    }

    pub fn spec(&self) -> &ConvSpec {
        &self.spec
    }
}

impl Layer for Conv2d {
    fn name(&self) -> &str {
        &self.name
    }

    fn forward(&mut self, input: &Tensor, _mode: Mode) -> Result<Tensor> {
        let (h, w, cin) = dims3(input)?;
        if cin != self.spec.in_channels {
            return Err(Error::InvalidShape(format!(
                "{}: expected {} input channels, got {cin}",
                self.name, self.spec.in_channels
            )));
        }
        let (oh, ow) = self.spec.output_size(h, w)?;
        let (kh, kw) = self.spec.kernel;
        let (sh, sw) = self.spec.stride;
        let (ph, pw) = self.spec.padding;
        let cout = self.spec.out_channels;

        let x = input.data();
        let wgt = self.weight.value.data();
        let b = self.bias.value.data();
        let mut out = vec![0.0; oh * ow * cout];
        for oi in 0..oh {
            for oj in 0..ow {
                let out_base = (oi * ow + oj) * cout;
                out[out_base..out_base + cout].copy_from_slice(b);
                for ki in 0..kh {
                    let ii = (oi * sh + ki) as isize - ph as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for kj in 0..kw {
                        let jj = (oj * sw + kj) as isize - pw as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        let in_base = (ii as usize * w + jj as usize) * cin;
                        let w_base = (ki * kw + kj) * cin * cout;
                        for ic in 0..cin {
                            let xv = x[in_base + ic];
                            let w_row = &wgt[w_base + ic * cout..w_base + (ic + 1) * cout];
                            for (oc, wv) in w_row.iter().enumerate() {
                                out[out_base + oc] += xv * wv;
                            }
                        }
                    }
                }
            }
        }
        self.cached_input = Some(input.clone());
        Tensor::from_vec(&[oh, ow, cout], out)
    }

    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let input = self
            .cached_input
            .as_ref()
            .ok_or_else(|| no_forward(&self.name))?;
        let (h, w, cin) = dims3(input)?;
        let (oh, ow) = self.spec.output_size(h, w)?;
        let cout = self.spec.out_channels;
        expect_shape(grad_out, &[oh, ow, cout], "conv grad_out")?;
        let (kh, kw) = self.spec.kernel;
        let (sh, sw) = self.spec.stride;
        let (ph, pw) = self.spec.padding;

        let x = input.data();
        let wgt = self.weight.value.data();
        let g = grad_out.data();
        let dw = self.weight.grad.data_mut();
        let db = self.bias.grad.data_mut();
        let mut dx = vec![0.0; h * w * cin];
        for oi in 0..oh {
            for oj in 0..ow {
                let out_base = (oi * ow + oj) * cout;
                for oc in 0..cout {
                    db[oc] += g[out_base + oc];
                }
                for ki in 0..kh {
                    let ii = (oi * sh + ki) as isize - ph as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for kj in 0..kw {
                        let jj = (oj * sw + kj) as isize - pw as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        let in_base = (ii as usize * w + jj as usize) * cin;
                        let w_base = (ki * kw + kj) * cin * cout;
                        for ic in 0..cin {
                            let xv = x[in_base + ic];
                            let mut dx_acc = 0.0;
                            let o = w_base + ic * cout;
                            for oc in 0..cout {
                                let gv = g[out_base + oc];
                                dw[o + oc] += xv * gv;
                                dx_acc += wgt[o + oc] * gv;
                            }
                            dx[in_base + ic] += dx_acc;
                        }
                    }
                }
            }
        }
        Tensor::from_vec(&[h, w, cin], dx)
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
    use rand::SeedableRng;

    fn spec(cin: usize, cout: usize, k: usize, s: usize, p: usize) -> ConvSpec {
        ConvSpec {
            in_channels: cin,
            out_channels: cout,
            kernel: (k, k),
            stride: (s, s),
            padding: (p, p),
        }
    }

    #[test]
    fn all_ones_kernel_sums_window() {
        // Hand-evaluated dot product: 1+2+3+4 = 10.
        let input = Tensor::from_vec(&[2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut conv = Conv2d::with_params(
            "c",
            spec(1, 1, 2, 1, 0),
            Tensor::filled(&[2, 2, 1, 1], 1.0).unwrap(),
            Tensor::zeros(&[1]).unwrap(),
        )
        .unwrap();
        let out = conv.forward(&input, Mode::Eval).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1]);
        assert_eq!(out.data(), &[10.0]);
    }

    #[test]
    fn identity_kernel_passes_input_through() {
        let input = Tensor::from_vec(&[2, 3, 1], vec![0.5, -1.0, 2.0, 3.0, -4.0, 0.0]).unwrap();
        let mut conv = Conv2d::with_params(
            "c",
            spec(1, 1, 1, 1, 0),
            Tensor::filled(&[1, 1, 1, 1], 1.0).unwrap(),
            Tensor::zeros(&[1]).unwrap(),
        )
        .unwrap();
        let out = conv.forward(&input, Mode::Eval).unwrap();
        assert_eq!(out.data(), input.data());
    }

    #[test]
    fn zero_input_yields_bias() {
        let input = Tensor::zeros(&[4, 4, 2]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut conv = Conv2d::new("c", spec(2, 3, 3, 1, 1), &mut rng).unwrap();
        conv.params_mut()[1].value.fill(0.75);
        let out = conv.forward(&input, Mode::Eval).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.75));
    }

    #[test]
    fn kernel_larger_than_padded_input_is_rejected() {
        let s = spec(1, 1, 5, 1, 0);
        assert!(matches!(s.output_size(2, 2), Err(Error::InvalidShape(_))));
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let input = Tensor::zeros(&[4, 4, 3]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut conv = Conv2d::new("c", spec(2, 2, 3, 1, 1), &mut rng).unwrap();
        assert!(matches!(
            conv.forward(&input, Mode::Eval),
            Err(Error::InvalidShape(_))
        ));
    }

    #[test]
    fn backward_before_forward_is_contract_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut conv = Conv2d::new("c", spec(1, 1, 2, 1, 0), &mut rng).unwrap();
        let g = Tensor::zeros(&[1, 1, 1]).unwrap();
        assert!(matches!(conv.backward(&g), Err(Error::Contract(_))));
    }

    #[test]
    fn stride_and_padding_geometry() {
        let s = spec(1, 4, 3, 2, 1);
        assert_eq!(s.output_size(5, 5).unwrap(), (3, 3));
        let s = spec(1, 4, 2, 2, 0);
        assert_eq!(s.output_size(6, 4).unwrap(), (3, 2));
    }
}
