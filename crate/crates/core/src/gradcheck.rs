//! Central finite-difference verification of analytic gradients.
//!
//! Layers are probed through a scalar objective `sum_k c_k * out_k` with
//! fixed random coefficients. The slope is computed against the actually
//! stored perturbed values, `(f(x+) - f(x-)) / (x+ - x-)`, which keeps exact
//! cases (identity, ReLU away from 0) at zero error.

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::SampleRecord;
use crate::error::{Error, Result};
use crate::graph::SSCNNModel;
use crate::labels::{IgnoreMask, LabelMap, IGNORE_LABEL};
use crate::layers::{Conv2d, ConvSpec, Dropout, FullyConnected, Layer, MaxPool2d, Mode, PoolSpec, Relu};
use crate::loss::{
    pixel_softmax, scene_cross_entropy, scene_loss_logit_grad, seg_loss_logit_grad,
    segmentation_cross_entropy, softmax,
};
use crate::tensor::Tensor;

/// Outcome of a finite-difference sweep.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checks: usize,
    /// Element with the largest relative error, e.g. `trunk1.weight[12]`.
    pub worst: String,
}

impl GradCheckReport {
    fn new() -> GradCheckReport {
        GradCheckReport {
            max_rel_err: 0.0,
            checks: 0,
            worst: String::new(),
        }
    }

    fn record(&mut self, label: &str, index: usize, analytic: f64, numeric: f64) {
        let denom = analytic.abs().max(numeric.abs()).max(1e-8);
        let rel = (analytic - numeric).abs() / denom;
        self.checks += 1;
        if rel > self.max_rel_err {
            self.max_rel_err = rel;
            self.worst = format!("{label}[{index}]");
        }
    }

    pub fn merge(&mut self, other: &GradCheckReport) {
        self.checks += other.checks;
        if other.max_rel_err > self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst.clone();
        }
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_err < tolerance
    }
}

fn validate_epsilon(epsilon: f64) -> Result<()> {
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(Error::InvalidArgument(format!(
            "epsilon must lie in [1e-7, 1e-3], got {epsilon}"
        )));
    }
    Ok(())
}

/// Deterministic subset of `0..len`, at most `cap` indices.
pub(crate) fn sample_indices(len: usize, cap: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if len <= cap {
        (0..len).collect()
    } else {
        let mut idx = rand::seq::index::sample(rng, len, cap).into_vec();
        idx.sort_unstable();
        idx
    }
}

/// Check a single layer's input and parameter gradients against central
/// differences. `max_checks_per_tensor` caps the probed elements per tensor
/// (deterministic subset) so large layers stay affordable.
pub fn finite_difference_check(
    layer: &mut dyn Layer,
    input: &Tensor,
    mode: Mode,
    epsilon: f64,
    seed: u64,
    max_checks_per_tensor: usize,
) -> Result<GradCheckReport> {
    validate_epsilon(epsilon)?;
    let eval = |layer: &mut dyn Layer, x: &Tensor, shape: &[usize]| -> Result<Tensor> {
        layer.reseed(seed);
        let out = layer.forward(x, mode)?;
        if out.shape() != shape {
            return Err(Error::InvalidShape(
                "layer output shape changed between evaluations".into(),
            ));
        }
        Ok(out)
    };
    // Per-output differencing: outputs untouched by the perturbation cancel
    // exactly, so exact-slope cases stay at zero error.
    let slope = |plus: &Tensor, minus: &Tensor, denom: f64, coeffs: &Tensor| -> f64 {
        plus.data()
            .iter()
            .zip(minus.data().iter())
            .zip(coeffs.data().iter())
            .map(|((p, m), c)| c * ((p - m) / denom))
            .sum()
    };

    // Fix the projection coefficients from the first forward's output shape.
    layer.reseed(seed);
    let probe = layer.forward(input, mode)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e3779b97f4a7c15);
    let dist = Uniform::new_inclusive(-1.0, 1.0);
    let coeffs = Tensor::from_vec(
        probe.shape(),
        (0..probe.len()).map(|_| dist.sample(&mut rng)).collect(),
    )?;

    // Analytic gradients.
    for p in layer.params_mut() {
        p.zero_grad();
    }
    layer.reseed(seed);
    layer.forward(input, mode)?;
    let input_grad = layer.backward(&coeffs)?;
    if !input_grad.all_finite() {
        return Err(Error::GradientNotFinite(format!("{}(input)", layer.name())));
    }
    let param_grads: Vec<(String, Tensor)> = layer
        .params()
        .iter()
        .map(|p| (p.name.clone(), p.grad.clone()))
        .collect();
    for (name, g) in &param_grads {
        if !g.all_finite() {
            return Err(Error::GradientNotFinite(name.clone()));
        }
    }

    let mut report = GradCheckReport::new();

    // Input elements.
    let out_shape = probe.shape().to_vec();
    let mut x = input.clone();
    for i in sample_indices(input.len(), max_checks_per_tensor, &mut rng) {
        let orig = x.data()[i];
        let xp = orig + epsilon;
        let xm = orig - epsilon;
        x.data_mut()[i] = xp;
        let out_plus = eval(layer, &x, &out_shape)?;
        x.data_mut()[i] = xm;
        let out_minus = eval(layer, &x, &out_shape)?;
        x.data_mut()[i] = orig;
        let numeric = slope(&out_plus, &out_minus, xp - xm, &coeffs);
        report.record("input", i, input_grad.data()[i], numeric);
    }

    // Parameter elements.
    for (pi, (name, analytic)) in param_grads.iter().enumerate() {
        let len = analytic.len();
        for i in sample_indices(len, max_checks_per_tensor, &mut rng) {
            let orig = layer.params()[pi].value.data()[i];
            let xp = orig + epsilon;
            let xm = orig - epsilon;
            layer.params_mut()[pi].value.data_mut()[i] = xp;
            let out_plus = eval(layer, input, &out_shape)?;
            layer.params_mut()[pi].value.data_mut()[i] = xm;
            let out_minus = eval(layer, input, &out_shape)?;
            layer.params_mut()[pi].value.data_mut()[i] = orig;
            let numeric = slope(&out_plus, &out_minus, xp - xm, &coeffs);
            report.record(name, i, analytic.data()[i], numeric);
        }
    }
    Ok(report)
}
