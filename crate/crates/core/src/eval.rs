//! Leave-one-subject-out evaluation and hyperparameter sweeps.

use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::learner::ModelDims;
use crate::meta::{meta_test, meta_train, MetaConfig, MetaError, MetaTestReport, SubjectPairs};
use crate::metrics::ReportMetadata;

/// Outcome for one held-out subject.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub subject_id: String,
    #[serde(flatten)]
    pub report: MetaTestReport,
}

impl FoldReport {
    pub fn gain(&self) -> f64 {
        self.report.adapted.accuracy - self.report.control.accuracy
    }
}

fn run_fold(
    cohort: &[SubjectPairs],
    held_out: usize,
    dims: &ModelDims,
    cfg: &MetaConfig,
    config_digest: &str,
) -> Result<FoldReport, MetaError> {
    let train: Vec<SubjectPairs> = cohort
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != held_out)
        .map(|(_, s)| s.clone())
        .collect();
    let (theta, _) = meta_train(&train, dims, cfg)?;
    let subject = &cohort[held_out];
    let report = meta_test(
        &theta,
        subject,
        dims,
        cfg,
        ReportMetadata {
            subject_id: subject.subject_id.clone(),
            seed: cfg.seed,
            config_digest: config_digest.to_string(),
        },
    )?;
    Ok(FoldReport {
        subject_id: subject.subject_id.clone(),
        report,
    })
}

/// Meta-trains on all but one subject and meta-tests on the held-out one,
/// for every subject. Folds share `cfg.seed`.
pub fn leave_one_subject_out(
    cohort: &[SubjectPairs],
    dims: &ModelDims,
    cfg: &MetaConfig,
    config_digest: &str,
) -> Result<Vec<FoldReport>, MetaError> {
    if cohort.len() < 2 {
        return Err(MetaError::Config(
            "leave-one-subject-out needs at least 2 subjects".into(),
        ));
    }
    let fold = |i: usize| run_fold(cohort, i, dims, cfg, config_digest);
    if cfg.deterministic {
        (0..cohort.len()).map(fold).collect()
    } else {
        (0..cohort.len()).into_par_iter().map(fold).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    AdaptSteps,
    KShot,
}

impl SweepAxis {
    pub fn apply(self, cfg: &MetaConfig, value: usize) -> MetaConfig {
        let mut cfg = cfg.clone();
        match self {
            SweepAxis::AdaptSteps => cfg.adapt_steps = value,
            SweepAxis::KShot => cfg.k_shot = value,
        }
        cfg
    }
}

impl FromStr for SweepAxis {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "adapt_steps" => Ok(Self::AdaptSteps),
            "k_shot" => Ok(Self::KShot),
            other => Err(format!("unknown sweep axis `{other}` (adapt_steps|k_shot)")),
        }
    }
}

/// One sweep cell. Failed cells carry `error` and no means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: usize,
    pub mean_accuracy: Option<f64>,
    pub mean_macro_f1: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub axis: SweepAxis,
    pub seed: u64,
    pub config_digest: String,
    pub rows: Vec<SweepRow>,
}

fn sweep_cell(
    cohort: &[SubjectPairs],
    dims: &ModelDims,
    cfg: &MetaConfig,
    config_digest: &str,
    value: usize,
) -> SweepRow {
    let outcome = cfg
        .validate()
        .and_then(|_| leave_one_subject_out(cohort, dims, cfg, config_digest));
    match outcome {
        Ok(folds) => {
            let n = folds.len() as f64;
            SweepRow {
                value,
                mean_accuracy: Some(folds.iter().map(|f| f.report.adapted.accuracy).sum::<f64>() / n),
                mean_macro_f1: Some(folds.iter().map(|f| f.report.adapted.macro_f1).sum::<f64>() / n),
                error: None,
            }
        }
        Err(e) => SweepRow {
            value,
            mean_accuracy: None,
            mean_macro_f1: None,
            error: Some(e.to_string()),
        },
    }
}

/// Full leave-one-subject-out cycle per value. A failing cell is reported in
/// its row and does not stop the sweep.
pub fn sweep(
    cohort: &[SubjectPairs],
    dims: &ModelDims,
    base: &MetaConfig,
    axis: SweepAxis,
    values: &[usize],
    config_digest: &str,
) -> SweepReport {
    let cell = |&v: &usize| sweep_cell(cohort, dims, &axis.apply(base, v), config_digest, v);
    let rows = if base.deterministic {
        values.iter().map(cell).collect()
    } else {
        values.par_iter().map(cell).collect()
    };
    SweepReport {
        axis,
        seed: base.seed,
        config_digest: config_digest.to_string(),
        rows,
    }
}

impl SweepReport {
    /// `value,mean_accuracy,mean_macro_f1,error` with empty cells for
    /// missing entries.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("value,mean_accuracy,mean_macro_f1,error\n");
        for r in &self.rows {
            let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            let err = r.error.as_deref().unwrap_or("").replace([',', '\n'], " ");
            s.push_str(&format!(
                "{},{},{},{}\n",
                r.value,
                opt(r.mean_accuracy),
                opt(r.mean_macro_f1),
                err
            ));
        }
        s
    }
}
