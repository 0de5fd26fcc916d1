use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

/// Single-label classification scores. `micro`, `macro` and `weighted` are
/// F1 averages: pooled counts, unweighted mean over classes, and mean
/// weighted by support.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub labels: Vec<String>,
    pub micro: f64,
    #[serde(rename = "macro")]
    pub macro_: f64,
    pub weighted: f64,
    pub accuracy: f64,
    pub per_class: BTreeMap<String, ClassMetrics>,
    /// `confusion[true][predicted]`, indexed like `labels`.
    pub confusion: Vec<Vec<u64>>,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

impl MetricReport {
    /// Scores from a square confusion matrix. Classes that never occur in
    /// either the truth or the predictions are left out of the macro mean.
    pub fn from_confusion(labels: &[String], confusion: Vec<Vec<u64>>) -> Self {
        let k = labels.len();
        assert_eq!(confusion.len(), k, "confusion rows must match labels");
        assert!(confusion.iter().all(|r| r.len() == k), "confusion must be square");
        let total: u64 = confusion.iter().flatten().sum();
        let correct: u64 = (0..k).map(|i| confusion[i][i]).sum();

        let mut per_class = BTreeMap::new();
        let mut macro_sum = 0.0;
        let mut macro_n = 0usize;
        let mut weighted_sum = 0.0;
        for (i, label) in labels.iter().enumerate() {
            let tp = confusion[i][i];
            let support: u64 = confusion[i].iter().sum();
            let predicted: u64 = (0..k).map(|r| confusion[r][i]).sum();
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, support);
            let score = f1(precision, recall);
            if support + predicted > 0 {
                macro_sum += score;
                macro_n += 1;
            }
            weighted_sum += score * support as f64;
            per_class.insert(
                label.clone(),
                ClassMetrics {
                    precision,
                    recall,
                    f1: score,
                    support,
                },
            );
        }
        let accuracy = ratio(correct, total);
        // pooled precision and recall both equal accuracy for single-label data
        let micro = f1(accuracy, accuracy);
        MetricReport {
            labels: labels.to_vec(),
            micro,
            macro_: if macro_n == 0 { 0.0 } else { macro_sum / macro_n as f64 },
            weighted: if total == 0 { 0.0 } else { weighted_sum / total as f64 },
            accuracy,
            per_class,
            confusion,
        }
    }

    /// Scores from paired label indices.
    pub fn from_predictions(labels: &[String], truth: &[usize], predicted: &[usize]) -> Self {
        assert_eq!(truth.len(), predicted.len());
        let k = labels.len();
        let mut confusion = vec![vec![0u64; k]; k];
        for (&t, &p) in truth.iter().zip(predicted) {
            confusion[t][p] += 1;
        }
        Self::from_confusion(labels, confusion)
    }

    pub fn total(&self) -> u64 {
        self.confusion.iter().flatten().sum()
    }

    /// Plain-text summary in percent.
    pub fn table(&self) -> String {
        let mut out = format!(
            "micro {:.1}  macro {:.1}  weighted {:.1}  (n = {})\n",
            self.micro * 100.0,
            self.macro_ * 100.0,
            self.weighted * 100.0,
            self.total()
        );
        out.push_str(&format!("{:<12} {:>9} {:>9} {:>9} {:>8}\n", "label", "precision", "recall", "f1", "support"));
        for label in &self.labels {
            let c = &self.per_class[label];
            out.push_str(&format!(
                "{:<12} {:>9.3} {:>9.3} {:>9.3} {:>8}\n",
                label, c.precision, c.recall, c.f1, c.support
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(k: usize) -> Vec<String> {
        (0..k).map(|i| format!("c{i}")).collect()
    }

    #[test]
    fn hand_computed_three_class_matrix() {
        // rows = truth
        let m = vec![vec![5, 1, 0], vec![2, 3, 1], vec![0, 0, 4]];
        let r = MetricReport::from_confusion(&labels(3), m);
        // c0: p=5/7 r=5/6; c1: p=3/4 r=3/6; c2: p=4/5 r=4/4
        let f = |p: f64, r: f64| 2.0 * p * r / (p + r);
        let f0 = f(5.0 / 7.0, 5.0 / 6.0);
        let f1_ = f(0.75, 0.5);
        let f2 = f(0.8, 1.0);
        assert!((r.macro_ - (f0 + f1_ + f2) / 3.0).abs() < 1e-12);
        assert!((r.weighted - (6.0 * f0 + 6.0 * f1_ + 4.0 * f2) / 16.0).abs() < 1e-12);
        assert!((r.micro - 12.0 / 16.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_predictions_score_one() {
        let truth = vec![0, 1, 2, 2, 1];
        let r = MetricReport::from_predictions(&labels(3), &truth, &truth);
        assert_eq!((r.micro, r.macro_, r.weighted), (1.0, 1.0, 1.0));
    }

    #[test]
    fn absent_classes_leave_the_macro_mean() {
        let r = MetricReport::from_predictions(&labels(3), &[0, 1], &[0, 1]);
        assert_eq!(r.macro_, 1.0);
        assert_eq!(r.per_class["c2"].support, 0);
    }
}
