//! Per-pixel label maps and the ignore mask shared by losses, metrics and
//! dataset code.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Label value marking a pixel as excluded from loss and metrics.
pub const IGNORE_LABEL: u16 = 255;

/// H x W map of object class indices; `IGNORE_LABEL` marks excluded pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    data: Vec<u16>,
}

impl LabelMap {
    pub fn filled(height: usize, width: usize, value: u16) -> LabelMap {
        LabelMap {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<u16>) -> Result<LabelMap> {
        if data.len() != height * width {
            return Err(Error::InvalidShape(format!(
                "label map {height}x{width} expects {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(LabelMap {
            height,
            width,
            data,
        })
    }

    pub fn get(&self, i: usize, j: usize) -> u16 {
        self.data[i * self.width + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: u16) {
        self.data[i * self.width + j] = v;
    }

    pub fn data(&self) -> &[u16] {
        &self.data
    }

    /// Nearest-neighbor resize. Being value-preserving, it never invents a
    /// class absent from the source and keeps `IGNORE_LABEL` intact.
    pub fn resize_nearest(&self, height: usize, width: usize) -> Result<LabelMap> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidShape("resize target must be >= 1x1".into()));
        }
        if height == self.height && width == self.width {
            return Ok(self.clone());
        }
        let mut out = LabelMap::filled(height, width, 0);
        for i in 0..height {
            // Map output pixel centers back to source pixel centers.
            let si = ((i as f64 + 0.5) * self.height as f64 / height as f64 - 0.5)
                .round()
                .clamp(0.0, (self.height - 1) as f64) as usize;
            for j in 0..width {
                let sj = ((j as f64 + 0.5) * self.width as f64 / width as f64 - 0.5)
                    .round()
                    .clamp(0.0, (self.width - 1) as f64) as usize;
                out.set(i, j, self.get(si, sj));
            }
        }
        Ok(out)
    }

    /// Encode as an integer-valued f64 tensor for `SSTN` serialization.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(
            &[self.height, self.width],
            self.data.iter().map(|&v| v as f64).collect(),
        )
        .expect("label map dimensions are consistent")
    }

    pub fn from_tensor(t: &Tensor) -> Result<LabelMap> {
        if t.rank() != 2 {
            return Err(Error::InvalidShape(format!(
                "label tensor must be rank 2, got {:?}",
                t.shape()
            )));
        }
        let mut data = Vec::with_capacity(t.len());
        for &v in t.data() {
            if v.fract() != 0.0 || !(0.0..=u16::MAX as f64).contains(&v) {
                return Err(Error::Data(format!("non-integer label value {v}")));
            }
            data.push(v as u16);
        }
        LabelMap::from_vec(t.shape()[0], t.shape()[1], data)
    }
}

/// H x W exclusion map; `true` removes the pixel from loss and metrics.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IgnoreMask {
    pub height: usize,
    pub width: usize,
    data: Vec<bool>,
}

impl IgnoreMask {
    pub fn none(height: usize, width: usize) -> IgnoreMask {
        IgnoreMask {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn all(height: usize, width: usize) -> IgnoreMask {
        IgnoreMask {
            height,
            width,
            data: vec![true; height * width],
        }
    }

    /// Mask derived from `IGNORE_LABEL` entries of a label map.
    pub fn from_labels(labels: &LabelMap) -> IgnoreMask {
        IgnoreMask {
            height: labels.height,
            width: labels.width,
            data: labels.data().iter().map(|&v| v == IGNORE_LABEL).collect(),
        }
    }

    pub fn is_ignored(&self, i: usize, j: usize) -> bool {
        self.data[i * self.width + j]
    }

    pub fn set(&mut self, i: usize, j: usize, ignored: bool) {
        self.data[i * self.width + j] = ignored;
    }

    pub fn num_ignored(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resize_identity() {
        let m = LabelMap::from_vec(2, 2, vec![1, 2, 3, IGNORE_LABEL]).unwrap();
        assert_eq!(m.resize_nearest(2, 2).unwrap(), m);
    }

    #[test]
    fn constant_map_downsamples_to_constant() {
        let m = LabelMap::filled(4, 4, 7);
        let d = m.resize_nearest(2, 2).unwrap();
        assert!(d.data().iter().all(|&v| v == 7));
    }

    #[test]
    fn nearest_never_invents_classes() {
        let m = LabelMap::from_vec(3, 3, vec![0, 1, 2, 3, 4, 5, 6, 7, IGNORE_LABEL]).unwrap();
        for (h, w) in [(1, 1), (2, 2), (5, 7), (9, 4)] {
            let r = m.resize_nearest(h, w).unwrap();
            for v in r.data() {
                assert!(m.data().contains(v), "invented class {v}");
            }
        }
    }

    #[test]
    fn mask_tracks_ignore_label() {
        let m = LabelMap::from_vec(1, 3, vec![0, IGNORE_LABEL, 2]).unwrap();
        let mask = IgnoreMask::from_labels(&m);
        assert!(!mask.is_ignored(0, 0));
        assert!(mask.is_ignored(0, 1));
        assert_eq!(mask.num_ignored(), 1);
    }

    #[test]
    fn tensor_round_trip() {
        let m = LabelMap::from_vec(2, 2, vec![0, 255, 3, 36]).unwrap();
        let back = LabelMap::from_tensor(&m.to_tensor()).unwrap();
        assert_eq!(back, m);
    }
}
