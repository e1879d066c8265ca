//! Accuracy and macro-averaged precision, recall and F1.

use std::fmt::Write as _;

use super::ModelParams;
use crate::catalog::LabeledTable;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassMetrics>,
    /// `confusion[truth][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Metrics over `n_classes` classes. Any 0/0 ratio counts as 0, so a class
/// absent from both truth and predictions contributes zeros to the macro
/// means.
pub fn metrics_from_predictions(truth: &[usize], predicted: &[usize], n_classes: usize) -> MetricReport {
    assert_eq!(truth.len(), predicted.len(), "one prediction per row");
    let mut confusion = vec![vec![0usize; n_classes]; n_classes];
    for (&t, &p) in truth.iter().zip(predicted) {
        confusion[t][p] += 1;
    }
    let per_class: Vec<ClassMetrics> = (0..n_classes)
        .map(|c| {
            let tp = confusion[c][c];
            let support: usize = confusion[c].iter().sum();
            let predicted_c: usize = confusion.iter().map(|row| row[c]).sum();
            let precision = ratio(tp, predicted_c);
            let recall = ratio(tp, support);
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            ClassMetrics {
                precision,
                recall,
                f1,
                support,
            }
        })
        .collect();
    let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / n_classes as f64;
    MetricReport {
        accuracy: ratio((0..n_classes).map(|c| confusion[c][c]).sum(), truth.len()),
        macro_precision: mean(|m| m.precision),
        macro_recall: mean(|m| m.recall),
        macro_f1: mean(|m| m.f1),
        per_class,
        confusion,
    }
}

pub fn evaluate(model: &ModelParams, table: &LabeledTable) -> MetricReport {
    let predicted = model.predict(table.features.view());
    metrics_from_predictions(&table.labels, &predicted, table.n_classes)
}

impl MetricReport {
    /// Headline metrics, per-class table and confusion matrix. `labels`
    /// names the classes in index order.
    pub fn to_text(&self, labels: &[String]) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "accuracy = {:.6}", self.accuracy);
        let _ = writeln!(out, "macro_precision = {:.6}", self.macro_precision);
        let _ = writeln!(out, "macro_recall = {:.6}", self.macro_recall);
        let _ = writeln!(out, "macro_f1 = {:.6}", self.macro_f1);
        let _ = writeln!(out, "{:<20} {:>10} {:>10} {:>10} {:>8}", "class", "precision", "recall", "f1", "support");
        for (c, m) in self.per_class.iter().enumerate() {
            let name = labels.get(c).map_or("?", String::as_str);
            let _ = writeln!(
                out,
                "{:<20} {:>10.6} {:>10.6} {:>10.6} {:>8}",
                name, m.precision, m.recall, m.f1, m.support
            );
        }
        let _ = writeln!(out, "confusion (rows = truth, columns = predicted)");
        for row in &self.confusion {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:>6}")).collect();
            let _ = writeln!(out, "{}", cells.join(""));
        }
        out
    }
}
