//! Confusion matrices and precision/recall/F1/accuracy reports.

use serde::Serialize;

use super::EvalError;

/// `classes × classes` counts, rows = true class, cols = predicted class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix { classes, counts: vec![0; classes * classes] }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn increment(&mut self, truth: usize, pred: usize) {
        self.counts[truth * self.classes + pred] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|c| self.get(c, c)).sum()
    }

    /// True-class support.
    pub fn row_sum(&self, truth: usize) -> u64 {
        (0..self.classes).map(|p| self.get(truth, p)).sum()
    }

    /// Predicted-class volume.
    pub fn col_sum(&self, pred: usize) -> u64 {
        (0..self.classes).map(|t| self.get(t, pred)).sum()
    }

    /// Integer addition; associative and commutative, so fold results can
    /// merge in any order.
    pub fn merge(&mut self, other: &ConfusionMatrix) {
        debug_assert_eq!(self.classes, other.classes);
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    /// Grid CSV: header row/column of class names, counts inside.
    pub fn to_csv(&self, class_names: &[String]) -> String {
        let mut out = String::from("true\\pred");
        for name in class_names {
            out.push(',');
            out.push_str(name);
        }
        out.push('\n');
        for (t, name) in class_names.iter().enumerate().take(self.classes) {
            out.push_str(name);
            for p in 0..self.classes {
                out.push_str(&format!(",{}", self.get(t, p)));
            }
            out.push('\n');
        }
        out
    }
}

/// Count `(truth, prediction)` pairs into a confusion matrix.
pub fn confusion(
    predictions: &[usize],
    truths: &[usize],
    classes: usize,
) -> Result<ConfusionMatrix, EvalError> {
    if predictions.len() != truths.len() {
        return Err(EvalError::LengthMismatch {
            preds: predictions.len(),
            truths: truths.len(),
        });
    }
    let mut cm = ConfusionMatrix::new(classes);
    for (&p, &t) in predictions.iter().zip(truths) {
        for label in [p, t] {
            if label >= classes {
                return Err(EvalError::LabelOutOfRange { label, classes });
            }
        }
        cm.increment(t, p);
    }
    Ok(cm)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub per_class: Vec<ClassMetrics>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub weighted_precision: f64,
    pub weighted_recall: f64,
    pub weighted_f1: f64,
    pub accuracy: f64,
    pub samples: u64,
    /// Classes whose precision or recall had a zero denominator and were
    /// defined as 0.
    pub zero_denominator_classes: Vec<usize>,
}

/// Per class: `P = cm[c][c]/colsum`, `R = cm[c][c]/rowsum`,
/// `F1 = 2PR/(P+R)`; zero denominators define the metric as 0. Macro is
/// the unweighted mean, weighted is the support-weighted mean, accuracy is
/// `trace/total`.
pub fn compute_metrics(cm: &ConfusionMatrix) -> Result<MetricsReport, EvalError> {
    let total = cm.total();
    if total == 0 {
        return Err(EvalError::EmptyConfusion);
    }
    let classes = cm.classes();
    let mut per_class = Vec::with_capacity(classes);
    let mut zero_denominator_classes = Vec::new();
    for c in 0..classes {
        let tp = cm.get(c, c) as f64;
        let col = cm.col_sum(c) as f64;
        let row = cm.row_sum(c) as f64;
        if col == 0.0 || row == 0.0 {
            zero_denominator_classes.push(c);
        }
        let precision = if col > 0.0 { tp / col } else { 0.0 };
        let recall = if row > 0.0 { tp / row } else { 0.0 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        per_class.push(ClassMetrics { precision, recall, f1, support: cm.row_sum(c) });
    }

    let k = classes as f64;
    let macro_precision = per_class.iter().map(|m| m.precision).sum::<f64>() / k;
    let macro_recall = per_class.iter().map(|m| m.recall).sum::<f64>() / k;
    let macro_f1 = per_class.iter().map(|m| m.f1).sum::<f64>() / k;
    let tf = total as f64;
    let weighted = |f: fn(&ClassMetrics) -> f64| {
        per_class.iter().map(|m| f(m) * m.support as f64).sum::<f64>() / tf
    };
    // support-weighted recall: sum over classes of (tp_c/row_c)*row_c / N
    // reduces to trace/N; computing it that way keeps the accuracy
    // identity exact
    let weighted_recall = cm.trace() as f64 / tf;
    Ok(MetricsReport {
        macro_precision,
        macro_recall,
        macro_f1,
        weighted_precision: weighted(|m| m.precision),
        weighted_recall,
        weighted_f1: weighted(|m| m.f1),
        accuracy: cm.trace() as f64 / tf,
        samples: total,
        per_class,
        zero_denominator_classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions_give_all_ones() {
        let preds = vec![0, 1, 2, 3, 2, 1];
        let cm = confusion(&preds, &preds, 4).unwrap();
        assert_eq!(cm.trace(), 6);
        let m = compute_metrics(&cm).unwrap();
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(m.macro_f1, 1.0);
        assert_eq!(m.weighted_precision, 1.0);
    }

    #[test]
    fn degenerate_predictor_fills_one_column() {
        let truths = vec![0, 1, 2, 3];
        let preds = vec![0, 0, 0, 0];
        let cm = confusion(&preds, &truths, 4).unwrap();
        for p in 1..4 {
            assert_eq!(cm.col_sum(p), 0);
        }
        assert_eq!(cm.col_sum(0), 4);
        let m = compute_metrics(&cm).unwrap();
        // classes 1..3 have zero predicted volume → precision 0, recorded
        assert_eq!(m.zero_denominator_classes, vec![1, 2, 3]);
        assert_eq!(m.accuracy, 0.25);
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn random_vectors_match_counting_oracle() {
        // deterministic pseudo-random pairs
        let n = 1000;
        let preds: Vec<usize> = (0..n).map(|i| (i * 7 + 3) % 4).collect();
        let truths: Vec<usize> = (0..n).map(|i| (i * 13 + 1) % 4).collect();
        let cm = confusion(&preds, &truths, 4).unwrap();
        let mut oracle = [[0u64; 4]; 4];
        for i in 0..n {
            oracle[truths[i]][preds[i]] += 1;
        }
        for t in 0..4 {
            for p in 0..4 {
                assert_eq!(cm.get(t, p), oracle[t][p]);
            }
        }
    }

    #[test]
    fn binary_case_hand_computed() {
        // TP=8, FN=1, FP=2, TN=9 for class 0
        let mut cm = ConfusionMatrix::new(2);
        for _ in 0..8 {
            cm.increment(0, 0);
        }
        cm.increment(0, 1);
        for _ in 0..2 {
            cm.increment(1, 0);
        }
        for _ in 0..9 {
            cm.increment(1, 1);
        }
        let m = compute_metrics(&cm).unwrap();
        assert!((m.per_class[0].precision - 0.8).abs() < 1e-12);
        assert!((m.per_class[0].recall - 8.0 / 9.0).abs() < 1e-12);
        let f1 = 2.0 * 0.8 * (8.0 / 9.0) / (0.8 + 8.0 / 9.0);
        assert!((m.per_class[0].f1 - f1).abs() < 1e-12);
        assert!((f1 - 0.842).abs() < 1e-3);
    }

    #[test]
    fn zero_support_class_still_averaged() {
        // class 3 never appears in truths or predictions
        let truths = vec![0, 1, 2, 0, 1, 2];
        let preds = vec![0, 1, 2, 1, 2, 0];
        let cm = confusion(&preds, &truths, 4).unwrap();
        let m = compute_metrics(&cm).unwrap();
        assert_eq!(m.per_class[3].precision, 0.0);
        assert_eq!(m.per_class[3].recall, 0.0);
        assert_eq!(m.per_class[3].f1, 0.0);
        // macro mean still divides by 4
        let expected = m.per_class.iter().map(|c| c.precision).sum::<f64>() / 4.0;
        assert_eq!(m.macro_precision, expected);
    }

    #[test]
    fn weighted_recall_equals_accuracy() {
        // algebraic identity: Σ_c (R_c · support_c) / N = trace/N
        let preds: Vec<usize> = (0..500).map(|i| (i * 11 + 2) % 4).collect();
        let truths: Vec<usize> = (0..500).map(|i| (i * 17 + 5) % 4).collect();
        let cm = confusion(&preds, &truths, 4).unwrap();
        let m = compute_metrics(&cm).unwrap();
        assert!((m.weighted_recall - m.accuracy).abs() < 1e-15);
    }

    #[test]
    fn length_mismatch_rejected() {
        assert!(matches!(
            confusion(&[0, 1], &[0], 4),
            Err(EvalError::LengthMismatch { preds: 2, truths: 1 })
        ));
    }

    #[test]
    fn csv_grid_shape() {
        let cm = confusion(&[0, 1], &[1, 1], 2).unwrap();
        let names = vec!["A".to_string(), "B".to_string()];
        let csv = cm.to_csv(&names);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], "true\\pred,A,B");
        assert_eq!(lines[1], "A,0,0");
        assert_eq!(lines[2], "B,1,1");
    }
}
