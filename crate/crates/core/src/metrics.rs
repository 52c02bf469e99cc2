//! Confusion matrices, per-class F1 and run reports.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("predictions ({preds}) and labels ({labels}) differ in length")]
    LengthMismatch { preds: usize, labels: usize },
    #[error("class {class} out of range for {classes} classes")]
    ClassOutOfRange { class: usize, classes: usize },
}

/// `C × C` counts, rows = true class, columns = predicted class.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|i| self.counts[i][i]).sum()
    }

    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            0.0
        } else {
            self.trace() as f64 / total as f64
        }
    }

    /// Row sums (true-class counts).
    pub fn support(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    /// CSV body: header `true\pred,0,..,C-1`, then one row per true class.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("true\\pred");
        for j in 0..self.classes {
            s.push_str(&format!(",{j}"));
        }
        s.push('\n');
        for (i, row) in self.counts.iter().enumerate() {
            s.push_str(&i.to_string());
            for c in row {
                s.push_str(&format!(",{c}"));
            }
            s.push('\n');
        }
        s
    }
}

pub fn confusion(preds: &[usize], labels: &[usize], classes: usize) -> Result<ConfusionMatrix, MetricsError> {
    if preds.len() != labels.len() {
        return Err(MetricsError::LengthMismatch {
            preds: preds.len(),
            labels: labels.len(),
        });
    }
    let mut counts = vec![vec![0u64; classes]; classes];
    for (&p, &y) in preds.iter().zip(labels) {
        for class in [p, y] {
            if class >= classes {
                return Err(MetricsError::ClassOutOfRange { class, classes });
            }
        }
        counts[y][p] += 1;
    }
    Ok(ConfusionMatrix { classes, counts })
}

/// F1 per class. A class with zero precision and recall (including a class
/// absent from both truth and predictions) scores 0.
pub fn per_class_f1(cm: &ConfusionMatrix) -> Vec<f64> {
    (0..cm.classes)
        .map(|c| {
            let tp = cm.counts[c][c] as f64;
            let predicted: u64 = (0..cm.classes).map(|i| cm.counts[i][c]).sum();
            let actual: u64 = cm.counts[c].iter().sum();
            let precision = if predicted == 0 { 0.0 } else { tp / predicted as f64 };
            let recall = if actual == 0 { 0.0 } else { tp / actual as f64 };
            if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            }
        })
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub subject_id: String,
    pub seed: u64,
    pub config_digest: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub per_class_f1: Vec<f64>,
    pub macro_f1: f64,
    pub confusion: ConfusionMatrix,
    pub n_eval: usize,
    pub metadata: ReportMetadata,
}

impl MetricsReport {
    pub fn from_predictions(
        preds: &[usize],
        labels: &[usize],
        classes: usize,
        metadata: ReportMetadata,
    ) -> Result<Self, MetricsError> {
        let cm = confusion(preds, labels, classes)?;
        let f1 = per_class_f1(&cm);
        let macro_f1 = if f1.is_empty() {
            0.0
        } else {
            f1.iter().sum::<f64>() / f1.len() as f64
        };
        Ok(Self {
            accuracy: cm.accuracy(),
            per_class_f1: f1,
            macro_f1,
            n_eval: preds.len(),
            confusion: cm,
            metadata,
        })
    }
}
