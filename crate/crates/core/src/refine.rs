//! Scene-object co-occurrence prior: tf-idf weighting of image-level
//! presence counts, and multiplicative refinement of per-pixel class
//! probabilities by the predicted scene distribution.
//!
//! Counting is image-level: an object contributes once per image it appears
//! in (any non-ignored pixel), mirroring document-level term counting and
//! keeping the weights independent of image resolution.

use crate::error::{Error, Result};
use crate::labels::{IgnoreMask, LabelMap, IGNORE_LABEL};
use crate::metrics::argmax;
use crate::tensor::Tensor;

/// Weight entries that compute to zero are raised to this floor so unseen
/// scene-object pairs keep a small positive prior.
pub const REFINEMENT_FLOOR: f64 = 1e-2;

/// Scene x object image-level presence counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CooccurrenceCounts {
    pub num_scenes: usize,
    pub num_objects: usize,
    counts: Vec<u64>,
}

impl CooccurrenceCounts {
    pub fn zeros(num_scenes: usize, num_objects: usize) -> CooccurrenceCounts {
        CooccurrenceCounts {
            num_scenes,
            num_objects,
            counts: vec![0; num_scenes * num_objects],
        }
    }

    pub fn get(&self, scene: usize, object: usize) -> u64 {
        self.counts[scene * self.num_objects + object]
    }

    pub fn set(&mut self, scene: usize, object: usize, count: u64) {
        self.counts[scene * self.num_objects + object] = count;
    }

    /// Record one image: every object class with at least one non-ignored
    /// pixel counts once.
    pub fn add_image(&mut self, scene: usize, labels: &LabelMap, mask: &IgnoreMask) -> Result<()> {
        if scene >= self.num_scenes {
            return Err(Error::Data(format!(
                "scene label {scene} out of range for {} classes",
                self.num_scenes
            )));
        }
        let mut seen = vec![false; self.num_objects];
        for i in 0..labels.height {
            for j in 0..labels.width {
                if mask.is_ignored(i, j) {
                    continue;
                }
                let v = labels.get(i, j);
                if v == IGNORE_LABEL {
                    continue;
                }
                let v = v as usize;
                if v >= self.num_objects {
                    return Err(Error::Data(format!(
                        "object label {v} out of range for {} classes",
                        self.num_objects
                    )));
                }
                seen[v] = true;
            }
        }
        for (object, &present) in seen.iter().enumerate() {
            if present {
                self.counts[scene * self.num_objects + object] += 1;
            }
        }
        Ok(())
    }
}

/// Build counts from a training set of (scene, labels, mask) triples.
pub fn count_cooccurrence<'a>(
    samples: impl IntoIterator<Item = (usize, &'a LabelMap, &'a IgnoreMask)>,
    num_scenes: usize,
    num_objects: usize,
) -> Result<CooccurrenceCounts> {
    let mut counts = CooccurrenceCounts::zeros(num_scenes, num_objects);
    let mut any = false;
    for (scene, labels, mask) in samples {
        counts.add_image(scene, labels, mask)?;
        any = true;
    }
    if !any {
        return Err(Error::Data(
            "cannot build co-occurrence counts from an empty training set".into(),
        ));
    }
    Ok(counts)
}

/// The learned prior matrix with its tf/idf intermediates.
#[derive(Debug, Clone)]
pub struct RefinementMatrix {
    pub num_scenes: usize,
    pub num_objects: usize,
    /// `num_scenes x num_objects`, strictly positive.
    pub weights: Tensor,
    /// `tf = ln(1 + f)`, same shape as `weights`.
    pub tf: Tensor,
    /// Per-object inverse document frequency; 0 for never-seen columns
    /// (their weights all sit at the floor).
    pub idf: Tensor,
}

impl RefinementMatrix {
    pub fn weight(&self, scene: usize, object: usize) -> f64 {
        self.weights.data()[scene * self.num_objects + object]
    }
}

/// tf-idf chain over the counts: `tf = ln(1 + f)`,
/// `idf_j = N / sum_i tf_ij` with N the scene count, and
/// `w = ln(1 + tf * idf)` floored at [`REFINEMENT_FLOOR`].
///
/// The product is evaluated as `(tf * N) / sum_tf`, so a single-scene
/// matrix yields `tf/tf = 1` and therefore exactly `ln 2` for any positive
/// count. Columns that never occur get `idf = 0` instead of a division by
/// zero, which sends the whole column to the floor.
pub fn build_refinement_matrix(counts: &CooccurrenceCounts) -> Result<RefinementMatrix> {
    let (ns, no) = (counts.num_scenes, counts.num_objects);
    if ns == 0 || no == 0 {
        return Err(Error::InvalidArgument(
            "co-occurrence matrix must be non-empty".into(),
        ));
    }
    let n = ns as f64;
    let mut tf = vec![0.0; ns * no];
    for s in 0..ns {
        for o in 0..no {
            tf[s * no + o] = (1.0 + counts.get(s, o) as f64).ln();
        }
    }
    let mut idf = vec![0.0; no];
    let mut weights = vec![0.0; ns * no];
    for o in 0..no {
        let sum_tf: f64 = (0..ns).map(|s| tf[s * no + o]).sum();
        idf[o] = if sum_tf == 0.0 { 0.0 } else { n / sum_tf };
        for s in 0..ns {
            let w = if sum_tf == 0.0 {
                0.0
            } else {
                (1.0 + (tf[s * no + o] * n) / sum_tf).ln()
            };
            weights[s * no + o] = if w == 0.0 { REFINEMENT_FLOOR } else { w };
        }
    }
    Ok(RefinementMatrix {
        num_scenes: ns,
        num_objects: no,
        weights: Tensor::from_vec(&[ns, no], weights)?,
        tf: Tensor::from_vec(&[ns, no], tf)?,
        idf: Tensor::from_vec(&[no], idf)?,
    })
}

/// Object prior from predicted scene probabilities:
/// `p_so = p_s . W` (matrix-vector product over scenes).
pub fn scene_prior(p_s: &Tensor, matrix: &RefinementMatrix) -> Result<Tensor> {
    if p_s.shape() != [matrix.num_scenes] {
        return Err(Error::InvalidShape(format!(
            "scene probabilities shape {:?} does not match {} scenes",
            p_s.shape(),
            matrix.num_scenes
        )));
    }
    let w = matrix.weights.data();
    let no = matrix.num_objects;
    let mut out = vec![0.0; no];
    for (s, &ps) in p_s.data().iter().enumerate() {
        for o in 0..no {
            out[o] += ps * w[s * no + o];
        }
    }
    Tensor::from_vec(&[no], out)
}

/// Multiply each pixel's class probabilities by the scene prior and
/// renormalize per pixel for reporting. The per-pixel argmax is unaffected
/// by the renormalization.
pub fn apply_refinement(p_s: &Tensor, matrix: &RefinementMatrix, p_o: &Tensor) -> Result<Tensor> {
    let prior = scene_prior(p_s, matrix)?;
    let (h, w, k) = match p_o.shape() {
        [h, w, k] if *k == matrix.num_objects => (*h, *w, *k),
        other => {
            return Err(Error::InvalidShape(format!(
                "pixel probabilities {other:?} do not match {} object classes",
                matrix.num_objects
            )))
        }
    };
    let mut out = vec![0.0; p_o.len()];
    let p = p_o.data();
    let pr = prior.data();
    for px in 0..h * w {
        let base = px * k;
        let mut sum = 0.0;
        for c in 0..k {
            let v = pr[c] * p[base + c];
            out[base + c] = v;
            sum += v;
        }
        if sum > 0.0 {
            for c in 0..k {
                out[base + c] /= sum;
            }
        }
    }
    Tensor::from_vec(&[h, w, k], out)
}

/// Refined per-pixel argmax, computed on the unnormalized products.
pub fn refined_argmax_map(
    p_s: &Tensor,
    matrix: &RefinementMatrix,
    p_o: &Tensor,
) -> Result<LabelMap> {
    let prior = scene_prior(p_s, matrix)?;
    let (h, w, k) = match p_o.shape() {
        [h, w, k] if *k == matrix.num_objects => (*h, *w, *k),
        other => {
            return Err(Error::InvalidShape(format!(
                "pixel probabilities {other:?} do not match {} object classes",
                matrix.num_objects
            )))
        }
    };
    let mut out = LabelMap::filled(h, w, 0);
    let p = p_o.data();
    let pr = prior.data();
    let mut scores = vec![0.0; k];
    for i in 0..h {
        for j in 0..w {
            let base = (i * w + j) * k;
            for c in 0..k {
                scores[c] = pr[c] * p[base + c];
            }
            out.set(i, j, argmax(&scores) as u16);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn counts_from(rows: &[&[u64]]) -> CooccurrenceCounts {
        let ns = rows.len();
        let no = rows[0].len();
        let mut c = CooccurrenceCounts::zeros(ns, no);
        for (s, row) in rows.iter().enumerate() {
            for (o, &v) in row.iter().enumerate() {
                c.set(s, o, v);
            }
        }
        c
    }

    #[test]
    fn image_level_presence_counting() {
        // One image of scene 0 containing objects 1 and 2 only.
        let labels = LabelMap::from_vec(1, 4, vec![1, 1, 2, IGNORE_LABEL]).unwrap();
        let mask = IgnoreMask::from_labels(&labels);
        let counts = count_cooccurrence([(0usize, &labels, &mask)], 2, 4).unwrap();
        assert_eq!(counts.get(0, 1), 1);
        assert_eq!(counts.get(0, 2), 1);
        assert_eq!(counts.get(0, 0), 0);
        assert_eq!(counts.get(0, 3), 0);
        assert_eq!(counts.get(1, 1), 0);
    }

    #[test]
    fn duplicating_an_image_doubles_its_row() {
        let labels = LabelMap::from_vec(1, 3, vec![0, 2, 2]).unwrap();
        let mask = IgnoreMask::from_labels(&labels);
        let single = count_cooccurrence([(1usize, &labels, &mask)], 3, 3).unwrap();
        let double =
            count_cooccurrence([(1usize, &labels, &mask), (1, &labels, &mask)], 3, 3).unwrap();
        for o in 0..3 {
            assert_eq!(double.get(1, o), 2 * single.get(1, o));
        }
    }

    #[test]
    fn empty_training_set_is_an_error() {
        assert!(count_cooccurrence(std::iter::empty(), 2, 2).is_err());
    }

    #[test]
    fn single_scene_weights_are_exactly_ln_two() {
        for f in [1u64, 3, 17, 50_000] {
            let counts = counts_from(&[&[f]]);
            let m = build_refinement_matrix(&counts).unwrap();
            assert_eq!(m.weight(0, 0).to_bits(), 2.0f64.ln().to_bits());
        }
    }

    #[test]
    fn all_zero_counts_floor_everything() {
        let counts = CooccurrenceCounts::zeros(3, 4);
        let m = build_refinement_matrix(&counts).unwrap();
        for &w in m.weights.data() {
            assert_eq!(w, REFINEMENT_FLOOR);
        }
        for &idf in m.idf.data() {
            assert_eq!(idf, 0.0);
        }
    }

    #[test]
    fn worked_two_by_two_example() {
        // f = [[3, 0], [1, 2]]:
        //   tf column 0 sums to ln4 + ln2, column 1 to ln3.
        //   w00 = ln(1 + 2 ln4 / (ln4 + ln2)) = ln(7/3)
        //   w01 = floor, w10 = ln(5/3), w11 = ln 3.
        let counts = counts_from(&[&[3, 0], &[1, 2]]);
        let m = build_refinement_matrix(&counts).unwrap();
        assert!((m.weight(0, 0) - 0.8472978603872037).abs() < 1e-12);
        assert_eq!(m.weight(0, 1), REFINEMENT_FLOOR);
        assert!((m.weight(1, 0) - 0.5108256237659907).abs() < 1e-12);
        assert!((m.weight(1, 1) - 1.0986122886681098).abs() < 1e-12);
    }

    #[test]
    fn zero_count_entries_sit_exactly_at_the_floor() {
        let counts = counts_from(&[&[5, 0, 7], &[0, 2, 7]]);
        let m = build_refinement_matrix(&counts).unwrap();
        assert_eq!(m.weight(0, 1), REFINEMENT_FLOOR);
        assert_eq!(m.weight(1, 0), REFINEMENT_FLOOR);
        for &w in m.weights.data() {
            assert!(w > 0.0);
        }
    }

    fn uniform_pixel_probs(h: usize, w: usize, k: usize) -> Tensor {
        Tensor::filled(&[h, w, k], 1.0 / k as f64).unwrap()
    }

    #[test]
    fn all_ones_prior_preserves_argmax() {
        let m = RefinementMatrix {
            num_scenes: 2,
            num_objects: 3,
            weights: Tensor::filled(&[2, 3], 1.0).unwrap(),
            tf: Tensor::zeros(&[2, 3]).unwrap(),
            idf: Tensor::zeros(&[3]).unwrap(),
        };
        let p_s = Tensor::from_vec(&[2], vec![0.3, 0.7]).unwrap();
        let p_o = Tensor::from_vec(
            &[1, 2, 3],
            vec![0.5, 0.2, 0.3, 0.1, 0.6, 0.3],
        )
        .unwrap();
        let before: Vec<usize> = (0..2)
            .map(|px| argmax(&p_o.data()[px * 3..(px + 1) * 3]))
            .collect();
        let refined = apply_refinement(&p_s, &m, &p_o).unwrap();
        let after: Vec<usize> = (0..2)
            .map(|px| argmax(&refined.data()[px * 3..(px + 1) * 3]))
            .collect();
        assert_eq!(before, after);
        // p_so = sum(p_s) for every object = 1.
        let prior = scene_prior(&p_s, &m).unwrap();
        for &v in prior.data() {
            assert!((v - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn one_hot_scene_selects_its_row() {
        let counts = counts_from(&[&[3, 0], &[1, 2]]);
        let m = build_refinement_matrix(&counts).unwrap();
        let p_s = Tensor::from_vec(&[2], vec![0.0, 1.0]).unwrap();
        let prior = scene_prior(&p_s, &m).unwrap();
        assert_eq!(prior.data()[0], m.weight(1, 0));
        assert_eq!(prior.data()[1], m.weight(1, 1));
    }

    #[test]
    fn uniform_pixels_take_the_prior_argmax() {
        let counts = counts_from(&[&[9, 0, 1], &[0, 9, 1]]);
        let m = build_refinement_matrix(&counts).unwrap();
        let p_s = Tensor::from_vec(&[2], vec![1.0, 0.0]).unwrap();
        let prior = scene_prior(&p_s, &m).unwrap();
        let p_o = uniform_pixel_probs(2, 2, 3);
        let refined = refined_argmax_map(&p_s, &m, &p_o).unwrap();
        let expected = argmax(prior.data()) as u16;
        for &v in refined.data() {
            assert_eq!(v, expected);
        }
    }

    #[test]
    fn normalized_and_unnormalized_argmax_agree() {
        let counts = counts_from(&[&[4, 1, 0], &[2, 5, 3]]);
        let m = build_refinement_matrix(&counts).unwrap();
        let p_s = Tensor::from_vec(&[2], vec![0.45, 0.55]).unwrap();
        let p_o = Tensor::random_uniform(&[3, 4, 3], 0.5, 8)
            .unwrap()
            .data()
            .iter()
            .map(|v| v.abs() + 1e-3)
            .collect::<Vec<_>>();
        let p_o = Tensor::from_vec(&[3, 4, 3], p_o).unwrap();
        let normalized = apply_refinement(&p_s, &m, &p_o).unwrap();
        let unnormalized = refined_argmax_map(&p_s, &m, &p_o).unwrap();
        for px in 0..12 {
            let from_norm = argmax(&normalized.data()[px * 3..(px + 1) * 3]) as u16;
            assert_eq!(from_norm, unnormalized.data()[px]);
        }
    }

    proptest! {
        // Per-pixel argmax is invariant under any positive per-pixel
        // rescaling.
        #[test]
        fn argmax_invariant_under_positive_rescaling(
            values in proptest::collection::vec(1e-6f64..1.0, 3 * 4),
            scales in proptest::collection::vec(1e-3f64..1e3, 4),
        ) {
            let k = 3;
            for px in 0..4 {
                let base = &values[px * k..(px + 1) * k];
                let scaled: Vec<f64> = base.iter().map(|v| v * scales[px]).collect();
                prop_assert_eq!(argmax(base), argmax(&scaled));
            }
        }

        // With idf held fixed, growing a count never decreases the weight.
        #[test]
        fn weight_monotone_in_count_for_fixed_idf(
            f in 0u64..1000,
            bump in 1u64..1000,
            idf in 0.0f64..100.0,
        ) {
            let tf_lo = (1.0 + f as f64).ln();
            let tf_hi = (1.0 + (f + bump) as f64).ln();
            let w_lo = (1.0 + tf_lo * idf).ln();
            let w_hi = (1.0 + tf_hi * idf).ln();
            prop_assert!(w_hi >= w_lo);
        }

        // Refined probabilities stay nonnegative and weights strictly
        // positive for arbitrary count matrices.
        #[test]
        fn weights_positive_for_random_counts(
            rows in proptest::collection::vec(
                proptest::collection::vec(0u64..50, 4), 3),
        ) {
            let refs: Vec<&[u64]> = rows.iter().map(|r| r.as_slice()).collect();
            let counts = counts_from(&refs);
            let m = build_refinement_matrix(&counts).unwrap();
            for &w in m.weights.data() {
                prop_assert!(w > 0.0);
            }
        }
    }
}
