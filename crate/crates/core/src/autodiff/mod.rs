//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Computation`] records itself onto a [`Tape`]; [`gradient`] sweeps the
//! tape backwards. Because the tape is generic over [`Scalar`], recording the
//! same computation on [`Dual`] leaves gives exact Hessian-vector products,
//! which is how [`gradient_through_adaptation`] differentiates through an
//! unrolled inner loop in second-order mode.

mod check;
mod matrix;
mod params;
mod scalar;
mod tape;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use check::{finite_difference_gradient, relative_error, GroupError};
pub use matrix::Matrix;
pub use params::{GradSet, ParamSet, TensorSet};
pub use scalar::{Dual, Scalar};
pub use tape::{GatherMap, Tape, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("duplicate parameter `{0}`")]
    DuplicateParam(String),
    #[error("parameter `{0}` has non-finite values")]
    NonFiniteParam(String),
    #[error("parameter sets have different names or shapes")]
    StructureMismatch,
    #[error("output must be 1x1, got {0:?}")]
    NonScalarOutput((usize, usize)),
    #[error("tape has no output")]
    NoOutput,
    #[error("tape replay diverged: recorded {recorded}, replayed {replayed}")]
    ReplayDivergence { recorded: f64, replayed: f64 },
    #[error("adapted parameters diverged at inner step {step}")]
    Divergence { step: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// A scalar-valued function of a [`ParamSet`], expressed in tape primitives.
///
/// `record` must only reach parameters through [`Tape::param`] and must be a
/// pure function of the tape's leaves and dropout stream.
pub trait Computation: Sync {
    fn record<S: Scalar>(&self, tape: &mut Tape<S>) -> Result<Var, AutodiffError>;
}

impl<C: Computation + ?Sized> Computation for &C {
    fn record<S: Scalar>(&self, tape: &mut Tape<S>) -> Result<Var, AutodiffError> {
        (**self).record(tape)
    }
}

/// Weighted sum `Σ wᵢ fᵢ` of computations.
pub struct Combination<'a, C> {
    pub terms: Vec<(f64, &'a C)>,
}

impl<C: Computation> Computation for Combination<'_, C> {
    fn record<S: Scalar>(&self, tape: &mut Tape<S>) -> Result<Var, AutodiffError> {
        let mut acc: Option<Var> = None;
        for (w, f) in &self.terms {
            let v = f.record(tape)?;
            let v = tape.scale(v, *w)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, v)?,
                None => v,
            });
        }
        acc.ok_or_else(|| AutodiffError::InvalidArgument("empty combination".into()))
    }
}

/// Records `f` at `params` with dropout disabled.
pub fn eval_with_tape<C: Computation>(f: &C, params: &ParamSet) -> Result<(f64, Tape), AutodiffError> {
    eval_with_tape_seeded(f, params, None)
}

/// As [`eval_with_tape`], with dropout masks drawn from `dropout_seed` when set.
pub fn eval_with_tape_seeded<C: Computation>(
    f: &C,
    params: &ParamSet,
    dropout_seed: Option<u64>,
) -> Result<(f64, Tape), AutodiffError> {
    let mut tape = Tape::new(params).with_dropout_seed(dropout_seed);
    let out = f.record(&mut tape)?;
    let value = tape.set_output(out)?;
    Ok((value, tape))
}

/// Plain evaluation, dropout disabled.
pub fn evaluate<C: Computation>(f: &C, params: &ParamSet) -> Result<f64, AutodiffError> {
    Ok(eval_with_tape(f, params)?.0)
}

pub fn gradient(tape: &Tape) -> Result<GradSet, AutodiffError> {
    let grads = tape.backward()?;
    tape.to_grad_set(&grads)
}

/// Replays `tape` and fails if the replayed scalar differs from the recorded
/// one in any bit.
pub fn verify_replay(tape: &Tape) -> Result<f64, AutodiffError> {
    let out = tape.output().ok_or(AutodiffError::NoOutput)?;
    let recorded = tape.value(out).as_slice()[0];
    let replayed = tape.replay()?;
    if recorded.to_bits() != replayed.to_bits() {
        return Err(AutodiffError::ReplayDivergence { recorded, replayed });
    }
    Ok(replayed)
}

pub fn value_and_grad<C: Computation>(
    f: &C,
    params: &ParamSet,
    dropout_seed: Option<u64>,
) -> Result<(f64, GradSet), AutodiffError> {
    let (v, tape) = eval_with_tape_seeded(f, params, dropout_seed)?;
    Ok((v, gradient(&tape)?))
}

/// Exact Hessian-vector product `∇²f(params) · direction` by forward-over-reverse.
pub fn hessian_vector_product<C: Computation>(
    f: &C,
    params: &ParamSet,
    direction: &ParamSet,
    dropout_seed: Option<u64>,
) -> Result<GradSet, AutodiffError> {
    let mut tape = Tape::with_tangent(params, direction)?.with_dropout_seed(dropout_seed);
    let out = f.record(&mut tape)?;
    tape.set_output(out)?;
    let grads = tape.backward()?;
    let mut hv = GradSet::new();
    for (name, g) in tape.param_names().iter().zip(&grads) {
        let data = g.as_slice().iter().map(|d| d.eps).collect();
        hv.insert(name.clone(), Matrix::from_vec(g.rows(), g.cols(), data))?;
    }
    Ok(hv)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetaGradMode {
    /// Adapted parameters treated as constants w.r.t. the initialization.
    #[default]
    FirstOrder,
    /// Exact differentiation through the unrolled inner updates.
    SecondOrder,
}

impl std::str::FromStr for MetaGradMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "first_order" => Ok(Self::FirstOrder),
            "second_order" => Ok(Self::SecondOrder),
            other => Err(format!("unknown mode `{other}` (first_order|second_order)")),
        }
    }
}

impl std::fmt::Display for MetaGradMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::FirstOrder => "first_order",
            Self::SecondOrder => "second_order",
        })
    }
}

/// Dropout seed for inner step `step` (the query pass uses `step == steps`).
pub fn step_seed(base: Option<u64>, step: usize) -> Option<u64> {
    base.map(|b| {
        let mut z = b ^ (step as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    })
}

/// Result of adapting on a support loss and differentiating a query loss.
#[derive(Clone, Debug)]
pub struct AdaptOutcome {
    pub meta_grad: GradSet,
    /// Query loss at the adapted parameters.
    pub query_loss: f64,
    pub adapted: ParamSet,
}

/// Runs `steps` gradient steps on `support` from `meta`; returns the adapted
/// parameters and the support-loss value before each step.
pub fn adapt<C: Computation>(
    meta: &ParamSet,
    support: &C,
    steps: usize,
    eta: f64,
    dropout_seed: Option<u64>,
) -> Result<(ParamSet, Vec<ParamSet>), AutodiffError> {
    let mut theta = meta.clone();
    let mut trajectory = Vec::with_capacity(steps);
    for step in 0..steps {
        let (loss, grad) = value_and_grad(support, &theta, step_seed(dropout_seed, step)).map_err(|e| match e {
            AutodiffError::NonFinite { .. } => AutodiffError::Divergence { step },
            other => other,
        })?;
        if !loss.is_finite() {
            return Err(AutodiffError::Divergence { step });
        }
        trajectory.push(theta.clone());
        theta.axpy(-eta, &grad)?;
        if !theta.all_finite() {
            return Err(AutodiffError::Divergence { step });
        }
    }
    Ok((theta, trajectory))
}

/// Gradient of `query(θ'(meta))` w.r.t. `meta`, where θ' is `steps` plain
/// gradient steps of size `eta` on `support`.
pub fn gradient_through_adaptation<A: Computation, B: Computation>(
    meta: &ParamSet,
    support: &A,
    query: &B,
    steps: usize,
    eta: f64,
    mode: MetaGradMode,
) -> Result<GradSet, AutodiffError> {
    Ok(adapt_and_differentiate(meta, support, query, steps, eta, mode, None)?.meta_grad)
}

/// [`gradient_through_adaptation`] that also returns the adapted parameters
/// and query loss, with optional seeded dropout.
pub fn adapt_and_differentiate<A: Computation, B: Computation>(
    meta: &ParamSet,
    support: &A,
    query: &B,
    steps: usize,
    eta: f64,
    mode: MetaGradMode,
    dropout_seed: Option<u64>,
) -> Result<AdaptOutcome, AutodiffError> {
    if steps == 0 {
        return Err(AutodiffError::InvalidArgument("steps must be >= 1".into()));
    }
    if !(eta > 0.0) {
        return Err(AutodiffError::InvalidArgument("eta_inner must be > 0".into()));
    }
    let (adapted, trajectory) = adapt(meta, support, steps, eta, dropout_seed)?;
    let (query_loss, mut v) = value_and_grad(query, &adapted, step_seed(dropout_seed, steps))?;
    if mode == MetaGradMode::SecondOrder {
        // dθ_{k+1}/dθ_k = I − η H_k, applied in reverse.
        for (k, theta_k) in trajectory.iter().enumerate().rev() {
            let hv = hessian_vector_product(support, theta_k, &v, step_seed(dropout_seed, k))?;
            v.axpy(-eta, &hv)?;
        }
    }
    if !v.all_finite() {
        return Err(AutodiffError::Divergence { step: steps });
    }
    Ok(AdaptOutcome {
        meta_grad: v,
        query_loss,
        adapted,
    })
}
