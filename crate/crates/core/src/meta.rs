//! Episodic task construction and the MAML training and meta-test loops.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{adapt, adapt_and_differentiate, evaluate, AutodiffError, GradSet, MetaGradMode, ParamSet};
use crate::data::{make_pairs, normalize, DataError, PairSample, SubjectRecording};
use crate::learner::{accuracy, init_params, predict, LearnerError, ModelDims, TaskLoss};
use crate::metrics::{MetricsError, MetricsReport, ReportMetadata};

#[derive(Debug, Error)]
pub enum MetaError {
    #[error("subject {subject}: class {class} has {available} samples, need {needed}")]
    InsufficientClass {
        subject: String,
        class: usize,
        available: usize,
        needed: usize,
    },
    #[error("subject {subject}: no samples left for evaluation")]
    NothingToEvaluate { subject: String },
    #[error("invalid meta config: {0}")]
    Config(String),
    #[error("meta update diverged at iteration {iteration}")]
    Divergence { iteration: usize },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Learner(#[from] LearnerError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("log write failed: {0}")]
    Log(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaConfig {
    /// Inner-loop learning rate.
    pub eta_inner: f64,
    /// Meta (outer) learning rate.
    pub beta: f64,
    /// Tasks per meta-batch.
    pub meta_batch: usize,
    pub adapt_steps: usize,
    /// Weight of the reconstruction term in the task loss.
    pub lambda_mix: f64,
    /// Decoupled L2 on the outer update.
    pub weight_decay: f64,
    pub n_way: usize,
    pub k_shot: usize,
    pub meta_iterations: usize,
    pub mode: MetaGradMode,
    pub seed: u64,
    /// Sequential reduction and no dropout. Not part of the config file.
    #[serde(skip)]
    pub deterministic: bool,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            eta_inner: 0.001,
            beta: 0.0005,
            meta_batch: 3,
            adapt_steps: 3,
            lambda_mix: 0.3,
            weight_decay: 0.01,
            n_way: 5,
            k_shot: 5,
            meta_iterations: 300,
            mode: MetaGradMode::FirstOrder,
            seed: 0,
            deterministic: false,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<(), MetaError> {
        let bad = |m: &str| Err(MetaError::Config(m.to_string()));
        if !(self.eta_inner > 0.0) || !(self.beta > 0.0) {
            return bad("eta_inner and beta must be > 0");
        }
        if self.meta_batch < 1 || self.adapt_steps < 1 || self.k_shot < 1 || self.n_way < 1 {
            return bad("meta_batch, adapt_steps, k_shot and n_way must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.lambda_mix) {
            return bad("lambda_mix must lie in [0, 1]");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be >= 0");
        }
        Ok(())
    }
}

/// Windows of one subject, indexed by class.
#[derive(Clone, Debug)]
pub struct SubjectPairs {
    pub subject_id: String,
    pub classes: usize,
    pub pairs: Vec<PairSample>,
    pub by_class: Vec<Vec<usize>>,
}

impl SubjectPairs {
    pub fn from_pairs(subject_id: impl Into<String>, classes: usize, pairs: Vec<PairSample>) -> Self {
        let mut by_class = vec![Vec::new(); classes];
        for (i, p) in pairs.iter().enumerate() {
            by_class[p.label].push(i);
        }
        Self {
            subject_id: subject_id.into(),
            classes,
            pairs,
            by_class,
        }
    }

    /// Z-scores the recording and windows it.
    pub fn prepare(rec: &SubjectRecording) -> Result<Self, DataError> {
        let pairs = make_pairs(&normalize(rec))?;
        Ok(Self::from_pairs(rec.subject_id(), rec.classes(), pairs))
    }

    pub fn class_counts(&self) -> Vec<usize> {
        self.by_class.iter().map(Vec::len).collect()
    }
}

/// Support and query windows drawn class-balanced from one subject.
#[derive(Clone, Debug)]
pub struct EpisodicTask {
    pub subject_id: String,
    pub classes: Vec<usize>,
    pub support: Vec<PairSample>,
    pub query: Vec<PairSample>,
    /// Indices into the subject's pairs, for bookkeeping.
    pub support_idx: Vec<usize>,
    pub query_idx: Vec<usize>,
}

impl EpisodicTask {
    pub fn len(&self) -> usize {
        self.support.len() + self.query.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Draws `n_way` classes and `k_shot` support plus `k_shot` disjoint query
/// windows per class, without replacement.
pub fn sample_task(subject: &SubjectPairs, cfg: &MetaConfig, rng: &mut ChaCha8Rng) -> Result<EpisodicTask, MetaError> {
    if cfg.n_way > subject.classes {
        return Err(MetaError::Config(format!(
            "n_way {} exceeds class count {}",
            cfg.n_way, subject.classes
        )));
    }
    let need = 2 * cfg.k_shot;
    let classes: Vec<usize> = if cfg.n_way == subject.classes {
        (0..subject.classes).collect()
    } else {
        let eligible: Vec<usize> = (0..subject.classes)
            .filter(|&c| subject.by_class[c].len() >= need)
            .collect();
        if eligible.len() < cfg.n_way {
            let class = (0..subject.classes)
                .find(|&c| subject.by_class[c].len() < need)
                .unwrap_or(0);
            return Err(MetaError::InsufficientClass {
                subject: subject.subject_id.clone(),
                class,
                available: subject.by_class[class].len(),
                needed: need,
            });
        }
        let mut chosen: Vec<usize> = eligible.choose_multiple(rng, cfg.n_way).copied().collect();
        chosen.sort_unstable();
        chosen
    };
    let mut support_idx = Vec::with_capacity(cfg.n_way * cfg.k_shot);
    let mut query_idx = Vec::with_capacity(cfg.n_way * cfg.k_shot);
    for &c in &classes {
        let pool = &subject.by_class[c];
        if pool.len() < need {
            return Err(MetaError::InsufficientClass {
                subject: subject.subject_id.clone(),
                class: c,
                available: pool.len(),
                needed: need,
            });
        }
        let picked: Vec<usize> = pool.choose_multiple(rng, need).copied().collect();
        support_idx.extend_from_slice(&picked[..cfg.k_shot]);
        query_idx.extend_from_slice(&picked[cfg.k_shot..]);
    }
    Ok(EpisodicTask {
        subject_id: subject.subject_id.clone(),
        classes,
        support: support_idx.iter().map(|&i| subject.pairs[i].clone()).collect(),
        query: query_idx.iter().map(|&i| subject.pairs[i].clone()).collect(),
        support_idx,
        query_idx,
    })
}

/// One task per subject (one epoch), reproducible from `seed`.
pub fn build_tasks(cohort: &[SubjectPairs], cfg: &MetaConfig, seed: u64) -> Result<Vec<EpisodicTask>, MetaError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    cohort.iter().map(|s| sample_task(s, cfg, &mut rng)).collect()
}

/// `adapt_steps` full-batch gradient steps on the support loss. `theta0` is
/// not modified.
pub fn inner_adapt(
    theta0: &ParamSet,
    support: &[PairSample],
    dims: &ModelDims,
    cfg: &MetaConfig,
) -> Result<ParamSet, MetaError> {
    inner_adapt_seeded(theta0, support, dims, cfg, None)
}

fn inner_adapt_seeded(
    theta0: &ParamSet,
    support: &[PairSample],
    dims: &ModelDims,
    cfg: &MetaConfig,
    dropout_seed: Option<u64>,
) -> Result<ParamSet, MetaError> {
    let loss = TaskLoss::new(support, dims, cfg.lambda_mix);
    Ok(adapt(theta0, &loss, cfg.adapt_steps, cfg.eta_inner, dropout_seed)?.0)
}

/// `Σ_b task_loss(query_b, inner_adapt(θ₀, support_b))`, dropout off.
pub fn meta_objective(
    theta0: &ParamSet,
    tasks: &[EpisodicTask],
    dims: &ModelDims,
    cfg: &MetaConfig,
) -> Result<f64, MetaError> {
    let mut total = 0.0;
    for task in tasks {
        let adapted = inner_adapt(theta0, &task.support, dims, cfg)?;
        total += evaluate(&TaskLoss::new(&task.query, dims, cfg.lambda_mix), &adapted)?;
    }
    Ok(total)
}

/// Per-task contribution to a meta-step.
#[derive(Clone, Debug)]
pub struct TaskOutcome {
    pub meta_grad: GradSet,
    pub query_loss: f64,
    pub query_acc: f64,
}

fn task_outcome(
    theta0: &ParamSet,
    task: &EpisodicTask,
    dims: &ModelDims,
    cfg: &MetaConfig,
    dropout_seed: Option<u64>,
) -> Result<TaskOutcome, MetaError> {
    let support = TaskLoss::new(&task.support, dims, cfg.lambda_mix);
    let query = TaskLoss::new(&task.query, dims, cfg.lambda_mix);
    let out = adapt_and_differentiate(
        theta0,
        &support,
        &query,
        cfg.adapt_steps,
        cfg.eta_inner,
        cfg.mode,
        dropout_seed,
    )?;
    let query_acc = accuracy(&out.adapted, dims, &task.query)?;
    Ok(TaskOutcome {
        meta_grad: out.meta_grad,
        query_loss: out.query_loss,
        query_acc,
    })
}

/// Gradient of the meta-objective w.r.t. `theta0` (per `cfg.mode`), summed
/// over tasks in task order. `dropout_seeds`, when given, has one entry per
/// task.
pub fn meta_gradient(
    theta0: &ParamSet,
    tasks: &[EpisodicTask],
    dims: &ModelDims,
    cfg: &MetaConfig,
    dropout_seeds: Option<&[u64]>,
) -> Result<(GradSet, Vec<TaskOutcome>), MetaError> {
    let seed_of = |i: usize| dropout_seeds.map(|s| s[i]);
    let outcomes: Vec<TaskOutcome> = if cfg.deterministic {
        tasks
            .iter()
            .enumerate()
            .map(|(i, t)| task_outcome(theta0, t, dims, cfg, seed_of(i)))
            .collect::<Result<_, _>>()?
    } else {
        tasks
            .par_iter()
            .enumerate()
            .map(|(i, t)| task_outcome(theta0, t, dims, cfg, seed_of(i)))
            .collect::<Result<_, _>>()?
    };
    let mut grad = theta0.zeros_like();
    for o in &outcomes {
        grad.axpy(1.0, &o.meta_grad)?;
    }
    Ok((grad, outcomes))
}

/// Summary of one meta-update.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub meta_loss: f64,
    pub query_acc: f64,
}

/// `θ₀ − β (∇ meta_objective + weight_decay · θ₀)`.
pub fn meta_step(
    theta0: &ParamSet,
    tasks: &[EpisodicTask],
    dims: &ModelDims,
    cfg: &MetaConfig,
) -> Result<ParamSet, MetaError> {
    Ok(meta_step_with_stats(theta0, tasks, dims, cfg, None)?.0)
}

/// Decoupled outer update `θ₀ − β·grad − β·weight_decay·θ₀`.
pub fn apply_meta_update(theta0: &ParamSet, grad: &GradSet, cfg: &MetaConfig) -> Result<ParamSet, MetaError> {
    let mut next = theta0.clone();
    next.axpy(-cfg.beta, grad)?;
    if cfg.weight_decay != 0.0 {
        next.axpy(-cfg.beta * cfg.weight_decay, theta0)?;
    }
    if !next.all_finite() {
        return Err(MetaError::Autodiff(AutodiffError::Divergence { step: cfg.adapt_steps }));
    }
    Ok(next)
}

pub fn meta_step_with_stats(
    theta0: &ParamSet,
    tasks: &[EpisodicTask],
    dims: &ModelDims,
    cfg: &MetaConfig,
    dropout_seeds: Option<&[u64]>,
) -> Result<(ParamSet, StepStats), MetaError> {
    let (grad, outcomes) = meta_gradient(theta0, tasks, dims, cfg, dropout_seeds)?;
    let next = apply_meta_update(theta0, &grad, cfg)?;
    let b = outcomes.len().max(1) as f64;
    Ok((
        next,
        StepStats {
            meta_loss: outcomes.iter().map(|o| o.query_loss).sum(),
            query_acc: outcomes.iter().map(|o| o.query_acc).sum::<f64>() / b,
        },
    ))
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iteration: usize,
    pub meta_loss: f64,
    pub query_acc: f64,
}

/// Meta-training loop from a fresh initialization seeded by `cfg.seed`.
pub fn meta_train(
    cohort: &[SubjectPairs],
    dims: &ModelDims,
    cfg: &MetaConfig,
) -> Result<(ParamSet, Vec<LogRecord>), MetaError> {
    let mut log = Vec::with_capacity(cfg.meta_iterations);
    let theta = meta_train_with(cohort, dims, cfg, init_params(dims, cfg.seed)?, |r| {
        log.push(*r);
        Ok(())
    })?;
    Ok((theta, log))
}

/// Training loop from `theta0`; `on_record` sees every log record as it is
/// produced.
pub fn meta_train_with(
    cohort: &[SubjectPairs],
    dims: &ModelDims,
    cfg: &MetaConfig,
    theta0: ParamSet,
    mut on_record: impl FnMut(&LogRecord) -> std::io::Result<()>,
) -> Result<ParamSet, MetaError> {
    cfg.validate()?;
    if cohort.is_empty() {
        return Err(MetaError::Config("empty training cohort".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_7A5C);
    let mut theta = theta0;
    let use_dropout = !cfg.deterministic && dims.dropout > 0.0;
    let mut order: Vec<usize> = (0..cohort.len()).collect();
    for iteration in 0..cfg.meta_iterations {
        order.shuffle(&mut rng);
        let tasks = (0..cfg.meta_batch)
            .map(|b| sample_task(&cohort[order[b % order.len()]], cfg, &mut rng))
            .collect::<Result<Vec<_>, _>>()?;
        let seeds: Vec<u64> = (0..tasks.len()).map(|_| rng.random()).collect();
        let (next, stats) = meta_step_with_stats(&theta, &tasks, dims, cfg, use_dropout.then_some(seeds.as_slice()))
            .map_err(|e| match e {
                MetaError::Autodiff(AutodiffError::Divergence { .. }) => MetaError::Divergence { iteration },
                other => other,
            })?;
        theta = next;
        on_record(&LogRecord {
            iteration,
            meta_loss: stats.meta_loss,
            query_acc: stats.query_acc,
        })?;
    }
    Ok(theta)
}

/// Adapted and no-adaptation metrics on an unseen subject.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaTestReport {
    pub adapted: MetricsReport,
    pub control: MetricsReport,
    pub support_size: usize,
}

/// Fine-tunes on `k_shot` windows of every class present in `subject` and
/// evaluates on all remaining windows. `cfg.adapt_steps == 0` is allowed.
pub fn meta_test(
    theta0: &ParamSet,
    subject: &SubjectPairs,
    dims: &ModelDims,
    cfg: &MetaConfig,
    metadata: ReportMetadata,
) -> Result<MetaTestReport, MetaError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7E57_0000);
    let mut in_support = vec![false; subject.pairs.len()];
    for (class, pool) in subject.by_class.iter().enumerate() {
        if pool.is_empty() {
            continue;
        }
        if pool.len() < cfg.k_shot {
            return Err(MetaError::InsufficientClass {
                subject: subject.subject_id.clone(),
                class,
                available: pool.len(),
                needed: cfg.k_shot,
            });
        }
        for &i in pool.choose_multiple(&mut rng, cfg.k_shot) {
            in_support[i] = true;
        }
    }
    let (support, eval): (Vec<_>, Vec<_>) = subject.pairs.iter().zip(&in_support).partition(|(_, &s)| s);
    let support: Vec<PairSample> = support.into_iter().map(|(p, _)| p.clone()).collect();
    let eval: Vec<PairSample> = eval.into_iter().map(|(p, _)| p.clone()).collect();
    if eval.is_empty() {
        return Err(MetaError::NothingToEvaluate {
            subject: subject.subject_id.clone(),
        });
    }
    let adapted = if cfg.adapt_steps == 0 {
        theta0.clone()
    } else {
        inner_adapt(theta0, &support, dims, cfg)?
    };
    let labels: Vec<usize> = eval.iter().map(|p| p.label).collect();
    let report = |theta: &ParamSet| -> Result<MetricsReport, MetaError> {
        let preds = predict(theta, dims, &eval)?;
        Ok(MetricsReport::from_predictions(
            &preds,
            &labels,
            subject.classes,
            metadata.clone(),
        )?)
    };
    Ok(MetaTestReport {
        adapted: report(&adapted)?,
        control: report(theta0)?,
        support_size: support.len(),
    })
}

/// Classes whose window count is below `needed`, per subject.
pub fn preflight(cohort: &[SubjectPairs], needed: usize) -> Vec<(String, Vec<(usize, usize)>)> {
    cohort
        .iter()
        .map(|s| {
            let short = s
                .class_counts()
                .into_iter()
                .enumerate()
                .filter(|&(_, n)| n < needed)
                .collect();
            (s.subject_id.clone(), short)
        })
        .collect()
}
