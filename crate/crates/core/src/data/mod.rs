//! Subject recordings, per-subject normalization and adjacent-pair windows.

mod csv;
mod synth;

use std::path::PathBuf;
use std::sync::Arc;

use thiserror::Error;

use crate::autodiff::Matrix;

pub use self::csv::{load_cohort, load_subject, write_cohort, write_subject};
pub use synth::{synth_generate, synth_generate_with_truth, SubjectTruth, SynthCohort, SynthSpec, STAGE_PERSISTENCE};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("{file}:{line}: bad header: expected `{expected}`, found `{found}`")]
    Header {
        file: PathBuf,
        line: usize,
        expected: String,
        found: String,
    },
    #[error("{file}:{line}: {message}")]
    Shape {
        file: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{file}:{line}: label {label} out of range for {classes} classes")]
    LabelRange {
        file: PathBuf,
        line: usize,
        label: i64,
        classes: usize,
    },
    #[error("{file}:{line}: non-numeric cell `{cell}`")]
    NonNumeric { file: PathBuf, line: usize, cell: String },
    #[error("subject {subject}: recording has {t_steps} steps, need at least 2")]
    TooShort { subject: String, t_steps: usize },
    #[error("invalid recording: {0}")]
    Invalid(String),
}

/// One subject's feature sequence `T × N × d` with one stage label per step.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectRecording {
    subject_id: Arc<str>,
    t_steps: usize,
    channels: usize,
    feature_dim: usize,
    classes: usize,
    /// Row-major `[t][channel][feature]`.
    features: Vec<f64>,
    labels: Vec<usize>,
}

impl SubjectRecording {
    pub fn new(
        subject_id: impl Into<String>,
        channels: usize,
        feature_dim: usize,
        classes: usize,
        features: Vec<f64>,
        labels: Vec<usize>,
    ) -> Result<Self, DataError> {
        let subject_id: String = subject_id.into();
        let t_steps = labels.len();
        if t_steps < 2 {
            return Err(DataError::TooShort {
                subject: subject_id,
                t_steps,
            });
        }
        if channels < 2 || feature_dim < 1 || classes < 1 {
            return Err(DataError::Invalid(format!(
                "need N >= 2, d >= 1, C >= 1 (got N={channels}, d={feature_dim}, C={classes})"
            )));
        }
        if features.len() != t_steps * channels * feature_dim {
            return Err(DataError::Invalid(format!(
                "feature length {} != T*N*d = {}",
                features.len(),
                t_steps * channels * feature_dim
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(DataError::Invalid(format!("label {bad} >= C={classes}")));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(DataError::Invalid("non-finite feature".into()));
        }
        Ok(Self {
            subject_id: subject_id.into(),
            t_steps,
            channels,
            feature_dim,
            classes,
            features,
            labels,
        })
    }

    pub fn subject_id(&self) -> &str {
        &self.subject_id
    }
    pub fn t_steps(&self) -> usize {
        self.t_steps
    }
    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }
    pub fn classes(&self) -> usize {
        self.classes
    }
    pub fn labels(&self) -> &[usize] {
        &self.labels
    }
    pub fn features(&self) -> &[f64] {
        &self.features
    }

    /// `N·d` values of step `t`, channel-major.
    pub fn step(&self, t: usize) -> &[f64] {
        let w = self.channels * self.feature_dim;
        &self.features[t * w..(t + 1) * w]
    }

    pub fn value(&self, t: usize, channel: usize, feature: usize) -> f64 {
        self.features[(t * self.channels + channel) * self.feature_dim + feature]
    }

    /// Number of steps carrying each label.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

/// Window `(t−1, t)` as `2N` node rows of width `d`, labelled with `y_t`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairSample {
    /// Rows `0..N` are channels at `t−1`, rows `N..2N` are channels at `t`.
    pub features: Matrix,
    pub label: usize,
    pub subject_id: Arc<str>,
    pub t: usize,
}

impl PairSample {
    pub fn channels(&self) -> usize {
        self.features.rows() / 2
    }
}

/// Per-subject z-scoring of every (channel, feature) coordinate over time,
/// using the population standard deviation. Zero-variance coordinates are
/// left unchanged.
pub fn normalize(rec: &SubjectRecording) -> SubjectRecording {
    let w = rec.channels * rec.feature_dim;
    let t = rec.t_steps as f64;
    let mut out = rec.clone();
    for k in 0..w {
        let mean = (0..rec.t_steps).map(|s| rec.features[s * w + k]).sum::<f64>() / t;
        let var = (0..rec.t_steps)
            .map(|s| {
                let d = rec.features[s * w + k] - mean;
                d * d
            })
            .sum::<f64>()
            / t;
        let std = var.sqrt();
        if std == 0.0 {
            continue;
        }
        for s in 0..rec.t_steps {
            out.features[s * w + k] = (rec.features[s * w + k] - mean) / std;
        }
    }
    out
}

/// All `T − 1` adjacent windows of a recording, in time order.
pub fn make_pairs(rec: &SubjectRecording) -> Result<Vec<PairSample>, DataError> {
    if rec.t_steps < 2 {
        return Err(DataError::TooShort {
            subject: rec.subject_id.to_string(),
            t_steps: rec.t_steps,
        });
    }
    let (n, d) = (rec.channels, rec.feature_dim);
    Ok((1..rec.t_steps)
        .map(|t| {
            let mut data = Vec::with_capacity(2 * n * d);
            data.extend_from_slice(rec.step(t - 1));
            data.extend_from_slice(rec.step(t));
            PairSample {
                features: Matrix::from_vec(2 * n, d, data),
                label: rec.labels[t],
                subject_id: rec.subject_id.clone(),
                t,
            }
        })
        .collect())
}
