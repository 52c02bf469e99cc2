//! Finite-difference verification of the task-loss gradient and of the
//! second-order meta-gradient on small fixed fixtures.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{
    adapt, evaluate, finite_difference_gradient, gradient_through_adaptation, relative_error, value_and_grad,
    AutodiffError, GroupError, Matrix, MetaGradMode, ParamSet,
};
use crate::data::PairSample;
use crate::hypergraph::{P_SPA, P_TEM};
use crate::learner::{init_params, param_group, LearnerError, ModelDims, TaskLoss};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Random windows with labels cycling through the classes.
pub fn random_samples(dims: &ModelDims, count: usize, seed: u64) -> Vec<PairSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let id: Arc<str> = Arc::from("fixture");
    (0..count)
        .map(|i| {
            let rows = 2 * dims.channels;
            let data = (0..rows * dims.feature_dim)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect();
            PairSample {
                features: Matrix::from_vec(rows, dims.feature_dim, data),
                label: i % dims.classes,
                subject_id: id.clone(),
                t: i + 1,
            }
        })
        .collect()
}

/// Initial parameters with biases and coefficients moved off their constant
/// starting values, so every parameter group carries a generic gradient.
pub fn randomized_params(dims: &ModelDims, seed: u64) -> Result<ParamSet, LearnerError> {
    let mut params = init_params(dims, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let coefficient = name == P_SPA || name == P_TEM;
        for v in params.values_mut(&name).expect("listed name") {
            if coefficient {
                // Signed, away from the ReLU kink at 0.
                let mag = rng.random_range(0.05..0.5);
                *v = if rng.random::<bool>() { mag } else { -mag };
            } else if *v == 0.0 {
                *v = rng.random_range(-0.1..0.1);
            }
        }
    }
    Ok(params)
}

/// Dimensions of the task-loss gradient fixture: `N = 3`, `d = 4`,
/// `d_proj = 4`, two heads of width 2, three classes, dropout off.
pub fn task_fixture_dims() -> ModelDims {
    let mut dims = ModelDims::new(3, 4, 2, 2, 3);
    dims.dropout = 0.0;
    dims
}

/// Dimensions of the meta-gradient fixture: `N = 2`, `d = 2`, one head of
/// width 2, two classes, dropout off.
pub fn meta_fixture_dims() -> ModelDims {
    let mut dims = ModelDims::new(2, 2, 1, 2, 2);
    dims.dropout = 0.0;
    dims
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupCheck {
    pub group: String,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub groups: Vec<GroupCheck>,
    pub max_rel_error: f64,
    /// Second-order meta-gradient vs finite differences of the meta-objective.
    pub meta_rel_error: f64,
}

fn max_of(groups: &[GroupCheck]) -> f64 {
    groups.iter().map(|g| g.rel_error).fold(0.0, f64::max)
}

/// Analytic vs central-difference gradient of the task loss, per group.
pub fn check_task_loss(seed: u64, lambda_mix: f64) -> Result<Vec<GroupCheck>, LearnerError> {
    let dims = task_fixture_dims();
    let params = randomized_params(&dims, seed)?;
    let samples = random_samples(&dims, 6, seed ^ 0xF1C7);
    let loss = TaskLoss::new(&samples, &dims, lambda_mix);
    let (_, analytic) = value_and_grad(&loss, &params, None)?;
    let numeric = finite_difference_gradient(&loss, &params, FD_STEP)?;
    Ok(GroupError::by_group(&analytic, &numeric, param_group)
        .into_iter()
        .map(|g| GroupCheck {
            group: g.group,
            rel_error: g.rel_error,
        })
        .collect())
}

/// `query_loss(θ₀ − η ∇ support_loss(θ₀))`.
fn one_step_objective(theta0: &ParamSet, support: &TaskLoss, query: &TaskLoss, eta: f64) -> Result<f64, AutodiffError> {
    let (adapted, _) = adapt(theta0, support, 1, eta, None)?;
    evaluate(query, &adapted)
}

/// Relative error of the second-order meta-gradient (one inner step, one
/// task) against central differences of the meta-objective over `θ₀`.
pub fn check_meta_gradient(seed: u64, eta_inner: f64, lambda_mix: f64) -> Result<f64, LearnerError> {
    let dims = meta_fixture_dims();
    let theta0 = randomized_params(&dims, seed)?;
    let support = random_samples(&dims, 4, seed ^ 0x5u64);
    let query = random_samples(&dims, 4, seed ^ 0x9u64);
    let support_loss = TaskLoss::new(&support, &dims, lambda_mix);
    let query_loss = TaskLoss::new(&query, &dims, lambda_mix);
    let analytic = gradient_through_adaptation(
        &theta0,
        &support_loss,
        &query_loss,
        1,
        eta_inner,
        MetaGradMode::SecondOrder,
    )?;
    let flat = theta0.flatten();
    let mut numeric = Vec::with_capacity(flat.len());
    for i in 0..flat.len() {
        let mut shifted = flat.clone();
        shifted[i] = flat[i] + FD_STEP;
        let plus = one_step_objective(&theta0.with_flat(&shifted)?, &support_loss, &query_loss, eta_inner)?;
        shifted[i] = flat[i] - FD_STEP;
        let minus = one_step_objective(&theta0.with_flat(&shifted)?, &support_loss, &query_loss, eta_inner)?;
        numeric.push((plus - minus) / (2.0 * FD_STEP));
    }
    Ok(relative_error(&analytic.flatten(), &numeric))
}

pub fn run(seed: u64, eta_inner: f64, lambda_mix: f64) -> Result<GradcheckReport, LearnerError> {
    let groups = check_task_loss(seed, lambda_mix)?;
    let meta_rel_error = check_meta_gradient(seed, eta_inner, lambda_mix)?;
    Ok(GradcheckReport {
        max_rel_error: max_of(&groups),
        groups,
        meta_rel_error,
    })
}
