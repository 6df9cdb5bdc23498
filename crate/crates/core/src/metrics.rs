//! Evaluation: confusion matrices, per-class and mean class accuracy (mean
//! recall over classes), and report emission as CSV and aligned text.

use crate::error::{Error, Result};
use crate::labels::{IgnoreMask, LabelMap};
use crate::tensor::Tensor;

/// Index of the first maximum.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// K x K counts; rows are ground truth, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> ConfusionMatrix {
        ConfusionMatrix {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn add(&mut self, truth: usize, prediction: usize) -> Result<()> {
        if truth >= self.num_classes || prediction >= self.num_classes {
            return Err(Error::Data(format!(
                "confusion entry ({truth}, {prediction}) out of range for {} classes",
                self.num_classes
            )));
        }
        self.counts[truth * self.num_classes + prediction] += 1;
        Ok(())
    }

    pub fn get(&self, truth: usize, prediction: usize) -> u64 {
        self.counts[truth * self.num_classes + prediction]
    }

    pub fn row_sum(&self, truth: usize) -> u64 {
        self.counts[truth * self.num_classes..(truth + 1) * self.num_classes]
            .iter()
            .sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn overall_accuracy(&self) -> f64 {
        let correct: u64 = (0..self.num_classes).map(|k| self.get(k, k)).sum();
        correct as f64 / self.total() as f64
    }

    /// CSV with a header row and a leading ground-truth name per row.
    pub fn to_csv(&self, class_names: &[String]) -> String {
        let mut out = String::from("truth\\prediction");
        for name in class_names {
            out.push(',');
            out.push_str(name);
        }
        out.push('\n');
        for (i, name) in class_names.iter().enumerate() {
            out.push_str(name);
            for j in 0..self.num_classes {
                out.push_str(&format!(",{}", self.get(i, j)));
            }
            out.push('\n');
        }
        out
    }
}

/// Per-class recall and its mean; classes absent from the evaluation set
/// are excluded from the mean and listed in `skipped_classes`.
#[derive(Debug, Clone)]
pub struct ClassAccuracyReport {
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
    pub evaluated_classes: usize,
    pub skipped_classes: Vec<usize>,
}

/// Mean class accuracy from a confusion matrix. An empty matrix is an
/// evaluation error.
pub fn mean_class_accuracy(cm: &ConfusionMatrix) -> Result<ClassAccuracyReport> {
    if cm.total() == 0 {
        return Err(Error::EmptyEval(
            "no evaluated items in confusion matrix".into(),
        ));
    }
    let mut per_class = Vec::with_capacity(cm.num_classes);
    let mut skipped = Vec::new();
    let mut sum = 0.0;
    let mut evaluated = 0usize;
    for k in 0..cm.num_classes {
        let total = cm.row_sum(k);
        if total == 0 {
            per_class.push(None);
            skipped.push(k);
        } else {
            let acc = cm.get(k, k) as f64 / total as f64;
            per_class.push(Some(acc));
            sum += acc;
            evaluated += 1;
        }
    }
    Ok(ClassAccuracyReport {
        per_class,
        mean: sum / evaluated as f64,
        evaluated_classes: evaluated,
        skipped_classes: skipped,
    })
}

/// Scene-level confusion over (prediction, label) pairs.
pub fn scene_confusion(
    predictions: &[usize],
    labels: &[usize],
    num_classes: usize,
) -> Result<ConfusionMatrix> {
    if predictions.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions vs {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::EmptyEval("no scene predictions".into()));
    }
    let mut cm = ConfusionMatrix::new(num_classes);
    for (&p, &y) in predictions.iter().zip(labels.iter()) {
        cm.add(y, p)?;
    }
    Ok(cm)
}

/// Accumulate per-pixel predictions (argmax over the channel dimension of
/// `p_o`) into a confusion matrix, skipping ignored pixels.
pub fn accumulate_pixel_confusion(
    cm: &mut ConfusionMatrix,
    p_o: &Tensor,
    labels: &LabelMap,
    mask: &IgnoreMask,
) -> Result<()> {
    let (h, w, k) = match p_o.shape() {
        [h, w, k] => (*h, *w, *k),
        other => {
            return Err(Error::InvalidShape(format!(
                "pixel probabilities must be H x W x K, got {other:?}"
            )))
        }
    };
    if k != cm.num_classes {
        return Err(Error::InvalidShape(format!(
            "probability channels {k} do not match {} classes",
            cm.num_classes
        )));
    }
    if labels.height != h || labels.width != w || mask.height != h || mask.width != w {
        return Err(Error::InvalidShape(
            "label/mask geometry does not match predictions".into(),
        ));
    }
    let p = p_o.data();
    for i in 0..h {
        for j in 0..w {
            if mask.is_ignored(i, j) {
                continue;
            }
            let base = (i * w + j) * k;
            cm.add(labels.get(i, j) as usize, argmax(&p[base..base + k]))?;
        }
    }
    Ok(())
}

/// Accumulate already-decided label maps (e.g. refined argmax maps).
pub fn accumulate_label_confusion(
    cm: &mut ConfusionMatrix,
    predicted: &LabelMap,
    labels: &LabelMap,
    mask: &IgnoreMask,
) -> Result<()> {
    if predicted.height != labels.height || predicted.width != labels.width {
        return Err(Error::InvalidShape(
            "prediction geometry does not match labels".into(),
        ));
    }
    for i in 0..labels.height {
        for j in 0..labels.width {
            if mask.is_ignored(i, j) {
                continue;
            }
            cm.add(labels.get(i, j) as usize, predicted.get(i, j) as usize)?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Report emission
// ---------------------------------------------------------------------------

/// One evaluated run in a comparison table.
#[derive(Debug, Clone)]
pub struct RunSummary {
    /// Row key, e.g. `n=4` or `rgbd refined`.
    pub key: String,
    pub scene_mean_acc: Option<f64>,
    pub pixel_mean_acc: Option<f64>,
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{:.4}", v),
        None => String::from(""),
    }
}

/// Machine-readable comparison table (one row per run).
pub fn summary_csv(rows: &[RunSummary]) -> String {
    let mut out = String::from("run,scene_mean_acc,pixel_mean_acc\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{}\n",
            r.key,
            fmt_opt(r.scene_mean_acc),
            fmt_opt(r.pixel_mean_acc)
        ));
    }
    out
}

/// Human-readable rendering of the same table.
pub fn summary_text(rows: &[RunSummary]) -> String {
    let key_width = rows
        .iter()
        .map(|r| r.key.len())
        .chain(std::iter::once("run".len()))
        .max()
        .unwrap_or(3);
    let mut out = format!(
        "{:<key_width$}  {:>14}  {:>14}\n",
        "run", "scene mean acc", "pixel mean acc"
    );
    for r in rows {
        out.push_str(&format!(
            "{:<key_width$}  {:>14}  {:>14}\n",
            r.key,
            fmt_opt(r.scene_mean_acc),
            fmt_opt(r.pixel_mean_acc)
        ));
    }
    out
}

/// Per-class accuracy CSV; empty cells for classes absent from the
/// evaluation set.
pub fn per_class_csv(report: &ClassAccuracyReport, class_names: &[String]) -> String {
    let mut out = String::from("class,accuracy\n");
    for (name, acc) in class_names.iter().zip(report.per_class.iter()) {
        out.push_str(&format!("{name},{}\n", fmt_opt(*acc)));
    }
    out.push_str(&format!("mean,{:.4}\n", report.mean));
    out
}

/// Paired per-class comparison with a delta column (refined - baseline).
pub fn paired_delta_csv(
    class_names: &[String],
    baseline: &ClassAccuracyReport,
    refined: &ClassAccuracyReport,
) -> String {
    let mut out = String::from("class,baseline,refined,delta\n");
    for (k, name) in class_names.iter().enumerate() {
        let b = baseline.per_class.get(k).copied().flatten();
        let r = refined.per_class.get(k).copied().flatten();
        let delta = match (b, r) {
            (Some(b), Some(r)) => format!("{:+.4}", r - b),
            _ => String::new(),
        };
        out.push_str(&format!(
            "{name},{},{},{delta}\n",
            fmt_opt(b),
            fmt_opt(r)
        ));
    }
    out.push_str(&format!(
        "mean,{:.4},{:.4},{:+.4}\n",
        baseline.mean,
        refined.mean,
        refined.mean - baseline.mean
    ));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cm_from(rows: &[&[u64]]) -> ConfusionMatrix {
        let k = rows.len();
        let mut cm = ConfusionMatrix::new(k);
        for (i, row) in rows.iter().enumerate() {
            for (j, &count) in row.iter().enumerate() {
                for _ in 0..count {
                    cm.add(i, j).unwrap();
                }
            }
        }
        cm
    }

    #[test]
    fn perfect_predictions_score_one() {
        let cm = cm_from(&[&[5, 0], &[0, 7]]);
        let r = mean_class_accuracy(&cm).unwrap();
        assert_eq!(r.per_class, vec![Some(1.0), Some(1.0)]);
        assert_eq!(r.mean, 1.0);
    }

    #[test]
    fn worked_confusion_example() {
        // [[9,1],[5,5]] -> per-class (0.9, 0.5), mean 0.7.
        let cm = cm_from(&[&[9, 1], &[5, 5]]);
        let r = mean_class_accuracy(&cm).unwrap();
        assert_eq!(r.per_class, vec![Some(0.9), Some(0.5)]);
        assert!((r.mean - 0.7).abs() < 1e-15);
        assert!((cm.overall_accuracy() - 0.7).abs() < 1e-15);
    }

    #[test]
    fn mean_class_accuracy_differs_from_overall_under_imbalance() {
        // [[9,1],[1,1]]: overall 10/12, mean class (0.9 + 0.5)/2 = 0.7.
        let cm = cm_from(&[&[9, 1], &[1, 1]]);
        let r = mean_class_accuracy(&cm).unwrap();
        assert!((cm.overall_accuracy() - 10.0 / 12.0).abs() < 1e-15);
        assert!((r.mean - 0.7).abs() < 1e-15);
    }

    #[test]
    fn absent_classes_are_skipped_with_warning() {
        let cm = cm_from(&[&[4, 0, 0], &[0, 0, 0], &[1, 0, 3]]);
        let r = mean_class_accuracy(&cm).unwrap();
        assert_eq!(r.per_class[1], None);
        assert_eq!(r.skipped_classes, vec![1]);
        assert_eq!(r.evaluated_classes, 2);
        assert!((r.mean - (1.0 + 0.75) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn empty_matrix_is_an_eval_error() {
        let cm = ConfusionMatrix::new(3);
        assert!(matches!(
            mean_class_accuracy(&cm),
            Err(Error::EmptyEval(_))
        ));
    }

    #[test]
    fn row_sums_match_ground_truth_counts() {
        let preds = vec![0, 1, 1, 2, 0, 2, 2];
        let labels = vec![0, 1, 2, 2, 0, 1, 2];
        let cm = scene_confusion(&preds, &labels, 3).unwrap();
        assert_eq!(cm.row_sum(0), 2);
        assert_eq!(cm.row_sum(1), 2);
        assert_eq!(cm.row_sum(2), 3);
        assert_eq!(cm.total(), 7);
    }

    #[test]
    fn metrics_are_permutation_invariant() {
        let preds = vec![0, 1, 1, 2, 0, 2, 2, 1];
        let labels = vec![0, 1, 2, 2, 0, 1, 2, 1];
        let cm1 = scene_confusion(&preds, &labels, 3).unwrap();
        let perm = [3usize, 0, 7, 1, 6, 2, 5, 4];
        let preds2: Vec<usize> = perm.iter().map(|&i| preds[i]).collect();
        let labels2: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
        let cm2 = scene_confusion(&preds2, &labels2, 3).unwrap();
        assert_eq!(cm1, cm2);
    }

    #[test]
    fn uniform_random_predictor_scores_one_over_k() {
        // Statistical check at +/-3 sigma with 10k balanced samples.
        let k = 4;
        let per_class = 2500;
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut cm = ConfusionMatrix::new(k);
        for class in 0..k {
            for _ in 0..per_class {
                cm.add(class, rng.gen_range(0..k)).unwrap();
            }
        }
        let r = mean_class_accuracy(&cm).unwrap();
        let p = 1.0 / k as f64;
        let sigma = (p * (1.0 - p) / (per_class as f64 * k as f64)).sqrt();
        assert!(
            (r.mean - p).abs() <= 3.0 * sigma,
            "mean {} vs expected {p} (3 sigma = {})",
            r.mean,
            3.0 * sigma
        );
    }

    #[test]
    fn pixel_confusion_skips_ignored() {
        let p_o = Tensor::from_vec(
            &[1, 2, 2],
            vec![0.9, 0.1, 0.2, 0.8],
        )
        .unwrap();
        let labels = LabelMap::from_vec(1, 2, vec![0, 0]).unwrap();
        let mut mask = IgnoreMask::none(1, 2);
        mask.set(0, 1, true);
        let mut cm = ConfusionMatrix::new(2);
        accumulate_pixel_confusion(&mut cm, &p_o, &labels, &mask).unwrap();
        assert_eq!(cm.total(), 1);
        assert_eq!(cm.get(0, 0), 1);
    }

    #[test]
    fn confusion_csv_has_named_header_row_and_column() {
        let cm = cm_from(&[&[2, 1], &[0, 3]]);
        let names = vec!["alpha".to_string(), "beta".to_string()];
        let csv = cm.to_csv(&names);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "truth\\prediction,alpha,beta");
        assert_eq!(lines.next().unwrap(), "alpha,2,1");
        assert_eq!(lines.next().unwrap(), "beta,0,3");
    }

    #[test]
    fn summary_tables_render_rows() {
        let rows = vec![
            RunSummary {
                key: "n=0".into(),
                scene_mean_acc: Some(0.5),
                pixel_mean_acc: Some(0.25),
            },
            RunSummary {
                key: "n=2".into(),
                scene_mean_acc: Some(0.75),
                pixel_mean_acc: None,
            },
            RunSummary {
                key: "n=4".into(),
                scene_mean_acc: Some(0.9),
                pixel_mean_acc: Some(0.5),
            },
        ];
        let csv = summary_csv(&rows);
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.contains("n=2,0.7500,"));
        let text = summary_text(&rows);
        assert_eq!(text.lines().count(), 4);
    }

    #[test]
    fn paired_delta_reports_per_class_gains() {
        let baseline = ClassAccuracyReport {
            per_class: vec![Some(0.5), Some(0.25)],
            mean: 0.375,
            evaluated_classes: 2,
            skipped_classes: vec![],
        };
        let refined = ClassAccuracyReport {
            per_class: vec![Some(0.75), Some(0.25)],
            mean: 0.5,
            evaluated_classes: 2,
            skipped_classes: vec![],
        };
        let names = vec!["chair".to_string(), "ceiling".to_string()];
        let csv = paired_delta_csv(&names, &baseline, &refined);
        assert!(csv.contains("chair,0.5000,0.7500,+0.2500"));
        assert!(csv.contains("ceiling,0.2500,0.2500,+0.0000"));
    }
}
