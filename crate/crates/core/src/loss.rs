//! Softmax and the two cross-entropy losses: one per image over scene
//! classes, one summed over non-ignored pixels for segmentation.

use crate::error::{Error, Result};
use crate::labels::{IgnoreMask, LabelMap};
use crate::tensor::Tensor;

/// Probabilities below this floor are clamped before taking the log. Hits
/// are counted and reported, never fatal.
pub const LOG_FLOOR: f64 = 1e-12;

/// Numerically stable softmax over a slice (max subtraction).
pub fn softmax_slice(logits: &[f64], out: &mut [f64]) {
    debug_assert_eq!(logits.len(), out.len());
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &l) in out.iter_mut().zip(logits.iter()) {
        *o = (l - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Softmax over a rank-1 logit tensor.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    if logits.rank() != 1 {
        return Err(Error::InvalidShape(format!(
            "softmax expects a rank-1 tensor, got {:?}",
            logits.shape()
        )));
    }
    let mut out = vec![0.0; logits.len()];
    softmax_slice(logits.data(), &mut out);
    Tensor::from_vec(logits.shape(), out)
}

/// Scene probabilities from a feature vector and per-class weight columns:
/// `p^k = exp(f . theta_k) / sum_i exp(f . theta_i)`.
pub fn softmax_scene(features: &Tensor, theta: &Tensor) -> Result<Tensor> {
    let f_len = features.len();
    let (rows, classes) = match theta.shape() {
        [r, c] => (*r, *c),
        other => {
            return Err(Error::InvalidShape(format!(
                "theta must be rank 2, got {other:?}"
            )))
        }
    };
    if rows != f_len {
        return Err(Error::InvalidShape(format!(
            "theta rows {rows} do not match feature length {f_len}"
        )));
    }
    let f = features.data();
    let t = theta.data();
    let mut logits = vec![0.0; classes];
    for (i, &fv) in f.iter().enumerate() {
        let row = &t[i * classes..(i + 1) * classes];
        for (k, &tv) in row.iter().enumerate() {
            logits[k] += fv * tv;
        }
    }
    let mut out = vec![0.0; classes];
    softmax_slice(&logits, &mut out);
    Tensor::from_vec(&[classes], out)
}

/// Result of the scene cross-entropy.
#[derive(Debug, Clone, Copy)]
pub struct SceneLoss {
    pub value: f64,
    /// True when the probability at the true class hit the log floor.
    pub floored: bool,
}

/// `-log p[true_class]`, clamped at the log floor.
pub fn scene_cross_entropy(p_s: &Tensor, true_class: usize) -> Result<SceneLoss> {
    if p_s.rank() != 1 {
        return Err(Error::InvalidShape(format!(
            "scene probabilities must be rank 1, got {:?}",
            p_s.shape()
        )));
    }
    if true_class >= p_s.len() {
        return Err(Error::InvalidArgument(format!(
            "scene class {true_class} out of range for {} classes",
            p_s.len()
        )));
    }
    let p = p_s.data()[true_class];
    let floored = p < LOG_FLOOR;
    Ok(SceneLoss {
        value: -p.max(LOG_FLOOR).ln(),
        floored,
    })
}

/// Gradient of the scene cross-entropy w.r.t. the logits: `p - y`.
pub fn scene_loss_logit_grad(p_s: &Tensor, true_class: usize) -> Result<Tensor> {
    if true_class >= p_s.len() {
        return Err(Error::InvalidArgument(format!(
            "scene class {true_class} out of range for {} classes",
            p_s.len()
        )));
    }
    let mut g = p_s.data().to_vec();
    g[true_class] -= 1.0;
    Tensor::from_vec(p_s.shape(), g)
}

/// Per-pixel softmax over the channel dimension of an `H x W x K` score map.
pub fn pixel_softmax(scores: &Tensor) -> Result<Tensor> {
    let (h, w, k) = match scores.shape() {
        [h, w, k] => (*h, *w, *k),
        other => {
            return Err(Error::InvalidShape(format!(
                "pixel scores must be H x W x K, got {other:?}"
            )))
        }
    };
    let mut out = vec![0.0; scores.len()];
    let x = scores.data();
    for px in 0..h * w {
        softmax_slice(&x[px * k..(px + 1) * k], &mut out[px * k..(px + 1) * k]);
    }
    Tensor::from_vec(&[h, w, k], out)
}

/// Result of the segmentation cross-entropy.
#[derive(Debug, Clone, Copy)]
pub struct SegLoss {
    /// Sum (not mean) of per-pixel cross-entropies over non-ignored pixels.
    pub value: f64,
    pub floor_hits: u64,
    /// True when every pixel was ignored (loss is exactly 0 then).
    pub all_ignored: bool,
    pub evaluated_pixels: usize,
}

fn check_pixel_geometry(
    p_o: &Tensor,
    labels: &LabelMap,
    mask: &IgnoreMask,
) -> Result<(usize, usize, usize)> {
    let (h, w, k) = match p_o.shape() {
        [h, w, k] => (*h, *w, *k),
        other => {
            return Err(Error::InvalidShape(format!(
                "pixel probabilities must be H x W x K, got {other:?}"
            )))
        }
    };
    if labels.height != h || labels.width != w {
        return Err(Error::InvalidShape(format!(
            "label map {}x{} does not match probability map {h}x{w}",
            labels.height, labels.width
        )));
    }
    if mask.height != h || mask.width != w {
        return Err(Error::InvalidShape(format!(
            "ignore mask {}x{} does not match probability map {h}x{w}",
            mask.height, mask.width
        )));
    }
    Ok((h, w, k))
}

/// Unnormalized segmentation loss: ignored pixels contribute exactly 0.
pub fn segmentation_cross_entropy(
    p_o: &Tensor,
    labels: &LabelMap,
    mask: &IgnoreMask,
) -> Result<SegLoss> {
    let (h, w, k) = check_pixel_geometry(p_o, labels, mask)?;
    let p = p_o.data();
    let mut value = 0.0;
    let mut floor_hits = 0;
    let mut evaluated = 0usize;
    for i in 0..h {
        for j in 0..w {
            if mask.is_ignored(i, j) {
                continue;
            }
            let class = labels.get(i, j) as usize;
            if class >= k {
                return Err(Error::Data(format!(
                    "object class {class} at pixel ({i},{j}) out of range for {k} classes"
                )));
            }
            let pv = p[(i * w + j) * k + class];
            if pv < LOG_FLOOR {
                floor_hits += 1;
            }
            value -= pv.max(LOG_FLOOR).ln();
            evaluated += 1;
        }
    }
    Ok(SegLoss {
        value,
        floor_hits,
        all_ignored: evaluated == 0,
        evaluated_pixels: evaluated,
    })
}

/// Gradient of the segmentation loss w.r.t. the per-pixel logits:
/// `p - y` at non-ignored pixels, exactly 0 elsewhere.
pub fn seg_loss_logit_grad(p_o: &Tensor, labels: &LabelMap, mask: &IgnoreMask) -> Result<Tensor> {
    let (h, w, k) = check_pixel_geometry(p_o, labels, mask)?;
    let p = p_o.data();
    let mut g = vec![0.0; p_o.len()];
    for i in 0..h {
        for j in 0..w {
            if mask.is_ignored(i, j) {
                continue;
            }
            let class = labels.get(i, j) as usize;
            if class >= k {
                return Err(Error::Data(format!(
                    "object class {class} at pixel ({i},{j}) out of range for {k} classes"
                )));
            }
            let base = (i * w + j) * k;
            for c in 0..k {
                g[base + c] = p[base + c];
            }
            g[base + class] -= 1.0;
        }
    }
    Tensor::from_vec(&[h, w, k], g)
}
