use std::collections::HashSet;

use sthsleep_core::autodiff::{
    evaluate, gradient_through_adaptation, value_and_grad, AutodiffError, Computation, Matrix, MetaGradMode, ParamSet,
    Scalar, Tape, Var,
};
use sthsleep_core::data::{synth_generate, PairSample, SynthSpec};
use sthsleep_core::gradcheck::{meta_fixture_dims, random_samples, randomized_params, task_fixture_dims};
use sthsleep_core::learner::{init_params, ModelDims, TaskLoss};
use sthsleep_core::meta::{
    apply_meta_update, build_tasks, inner_adapt, meta_gradient, meta_objective, meta_step, meta_test, meta_train,
    EpisodicTask, MetaConfig, MetaError, SubjectPairs,
};
use sthsleep_core::metrics::ReportMetadata;

fn cohort(spec: &SynthSpec, seed: u64) -> Vec<SubjectPairs> {
    synth_generate(spec, seed)
        .unwrap()
        .iter()
        .map(|r| SubjectPairs::prepare(r).unwrap())
        .collect()
}

fn small_spec(n_subjects: usize, t_steps: usize) -> SynthSpec {
    SynthSpec {
        n_subjects,
        t_steps,
        channels: 3,
        feature_dim: 2,
        ..SynthSpec::default()
    }
}

fn small_dims() -> ModelDims {
    let mut dims = ModelDims::new(3, 2, 1, 2, 5);
    dims.dropout = 0.0;
    dims
}

fn assert_balanced(task: &EpisodicTask, cfg: &MetaConfig) {
    for set in [&task.support, &task.query] {
        for &c in &task.classes {
            assert_eq!(set.iter().filter(|p| p.label == c).count(), cfg.k_shot);
        }
        assert_eq!(set.len(), cfg.n_way * cfg.k_shot);
        assert!(set.iter().all(|p| &*p.subject_id == task.subject_id));
    }
    let s: HashSet<usize> = task.support_idx.iter().copied().collect();
    assert_eq!(s.len(), task.support_idx.len());
    assert!(task.query_idx.iter().all(|i| !s.contains(i)));
}

#[test]
fn nine_subjects_ten_shot_gives_nine_hundred_instances() {
    let subjects = cohort(&small_spec(9, 600), 3);
    let cfg = MetaConfig {
        n_way: 5,
        k_shot: 10,
        ..MetaConfig::default()
    };
    let tasks = build_tasks(&subjects, &cfg, 11).unwrap();
    assert_eq!(tasks.len(), 9);
    assert!(tasks.iter().all(|t| t.len() == 100));
    assert_eq!(tasks.iter().map(EpisodicTask::len).sum::<usize>(), 900);
    for t in &tasks {
        assert_balanced(t, &cfg);
    }
    let again = build_tasks(&subjects, &cfg, 11).unwrap();
    for (a, b) in tasks.iter().zip(&again) {
        assert_eq!(a.support_idx, b.support_idx);
        assert_eq!(a.query_idx, b.query_idx);
    }
}

#[test]
fn sampling_is_class_balanced_for_every_seed() {
    let subjects = cohort(&small_spec(2, 300), 8);
    let cfg = MetaConfig::default();
    for seed in 0..100 {
        for t in build_tasks(&subjects, &cfg, seed).unwrap() {
            assert_balanced(&t, &cfg);
        }
    }
    // Fewer ways than classes picks a subset.
    let three = MetaConfig {
        n_way: 3,
        ..MetaConfig::default()
    };
    for seed in 0..20 {
        for t in build_tasks(&subjects, &three, seed).unwrap() {
            assert_eq!(t.classes.len(), 3);
            assert_balanced(&t, &three);
        }
    }
}

fn fixture_subject(id: &str, dims: &ModelDims, per_class: usize) -> SubjectPairs {
    let samples = random_samples(dims, per_class * dims.classes, 77);
    SubjectPairs::from_pairs(id, dims.classes, samples)
}

#[test]
fn one_shot_with_two_windows_per_class_splits_them() {
    let dims = task_fixture_dims();
    let subject = fixture_subject("fixture", &dims, 2);
    let cfg = MetaConfig {
        n_way: 3,
        k_shot: 1,
        ..MetaConfig::default()
    };
    for seed in 0..10 {
        let task = &build_tasks(std::slice::from_ref(&subject), &cfg, seed).unwrap()[0];
        assert_balanced(task, &cfg);
        let mut all: Vec<usize> = task.support_idx.iter().chain(&task.query_idx).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..6).collect::<Vec<_>>());
    }
}

#[test]
fn short_class_is_reported_by_subject_and_class() {
    let dims = task_fixture_dims();
    let mut samples = random_samples(&dims, 12, 1);
    // Leave class 2 with a single window.
    samples.retain(|p| p.label != 2);
    samples.push(PairSample {
        label: 2,
        ..samples[0].clone()
    });
    let subject = SubjectPairs::from_pairs("s07", 3, samples);
    let cfg = MetaConfig {
        n_way: 3,
        k_shot: 2,
        ..MetaConfig::default()
    };
    let err = build_tasks(&[subject], &cfg, 0).unwrap_err();
    match &err {
        MetaError::InsufficientClass {
            subject,
            class,
            available,
            needed,
        } => {
            assert_eq!((subject.as_str(), *class, *available, *needed), ("s07", 2, 1, 4));
        }
        other => panic!("unexpected {other:?}"),
    }
    let msg = err.to_string();
    assert!(msg.contains("s07") && msg.contains("class 2"), "{msg}");
}

#[test]
fn inner_adapt_is_pure_and_descends() {
    let dims = task_fixture_dims();
    let cfg = MetaConfig {
        eta_inner: 1e-3,
        ..MetaConfig::default()
    };
    for seed in 0..20 {
        let theta0 = randomized_params(&dims, seed).unwrap();
        let copy = theta0.clone();
        let support = random_samples(&dims, 6, seed + 1000);
        let adapted = inner_adapt(&theta0, &support, &dims, &cfg).unwrap();
        assert_eq!(theta0, copy);
        let loss = TaskLoss::new(&support, &dims, cfg.lambda_mix);
        let before = evaluate(&loss, &theta0).unwrap();
        let after = evaluate(&loss, &adapted).unwrap();
        assert!(after <= before, "seed {seed}: {after} > {before}");
    }
}

fn fixture_task(dims: &ModelDims, seed: u64) -> EpisodicTask {
    let support = random_samples(dims, 4, seed);
    let query = random_samples(dims, 4, seed + 1);
    EpisodicTask {
        subject_id: "fixture".into(),
        classes: (0..dims.classes).collect(),
        support,
        query,
        support_idx: Vec::new(),
        query_idx: Vec::new(),
    }
}

/// Inner loop and query loss written directly against the tape API.
fn naive_objective(theta0: &ParamSet, tasks: &[EpisodicTask], dims: &ModelDims, cfg: &MetaConfig) -> f64 {
    let mut total = 0.0;
    for task in tasks {
        let support = TaskLoss::new(&task.support, dims, cfg.lambda_mix);
        let mut theta = theta0.clone();
        for _ in 0..cfg.adapt_steps {
            let (_, g) = value_and_grad(&support, &theta, None).unwrap();
            let flat: Vec<f64> = theta
                .flatten()
                .iter()
                .zip(g.flatten())
                .map(|(t, g)| t - cfg.eta_inner * g)
                .collect();
            theta = theta.with_flat(&flat).unwrap();
        }
        total += evaluate(&TaskLoss::new(&task.query, dims, cfg.lambda_mix), &theta).unwrap();
    }
    total
}

#[test]
fn meta_objective_is_additive_and_matches_a_naive_loop() {
    let dims = task_fixture_dims();
    let cfg = MetaConfig {
        eta_inner: 0.01,
        ..MetaConfig::default()
    };
    let theta0 = randomized_params(&dims, 4).unwrap();
    let task = fixture_task(&dims, 40);
    let single = meta_objective(&theta0, std::slice::from_ref(&task), &dims, &cfg).unwrap();
    let double = meta_objective(&theta0, &[task.clone(), task.clone()], &dims, &cfg).unwrap();
    assert_eq!(double, 2.0 * single);

    let tasks = vec![task, fixture_task(&dims, 50), fixture_task(&dims, 60)];
    let ours = meta_objective(&theta0, &tasks, &dims, &cfg).unwrap();
    let naive = naive_objective(&theta0, &tasks, &dims, &cfg);
    assert!(
        (ours - naive).abs() <= 1e-12 * naive.abs().max(1.0),
        "{ours} vs {naive}"
    );
}

#[test]
fn zero_meta_rate_leaves_parameters_unchanged() {
    let dims = task_fixture_dims();
    let cfg = MetaConfig {
        beta: 0.0,
        deterministic: true,
        ..MetaConfig::default()
    };
    let theta0 = randomized_params(&dims, 2).unwrap();
    let next = meta_step(&theta0, &[fixture_task(&dims, 3)], &dims, &cfg).unwrap();
    assert_eq!(next, theta0);
}

/// `θ²` over a single scalar parameter.
struct Square;
impl Computation for Square {
    fn record<S: Scalar>(&self, t: &mut Tape<S>) -> Result<Var, AutodiffError> {
        let x = t.param("theta")?;
        let sq = t.mul(x, x)?;
        t.sum(sq)
    }
}

#[test]
fn quadratic_outer_update() {
    let mut theta = ParamSet::new();
    theta.insert("theta", Matrix::row_vector(vec![1.0])).unwrap();
    let grad = gradient_through_adaptation(&theta, &Square, &Square, 1, 0.1, MetaGradMode::FirstOrder).unwrap();
    let cfg = MetaConfig {
        beta: 0.1,
        weight_decay: 0.0,
        ..MetaConfig::default()
    };
    let next = apply_meta_update(&theta, &grad, &cfg).unwrap();
    assert!((next.get("theta").unwrap().get(0, 0) - 0.84).abs() <= 1e-15);

    let decayed = apply_meta_update(
        &theta,
        &grad,
        &MetaConfig {
            weight_decay: 0.01,
            ..cfg
        },
    )
    .unwrap();
    assert!((decayed.get("theta").unwrap().get(0, 0) - (0.84 - 0.1 * 0.01)).abs() <= 1e-15);
}

#[test]
fn second_order_meta_gradient_points_along_finite_differences() {
    let dims = meta_fixture_dims();
    let cfg = MetaConfig {
        eta_inner: 0.1,
        adapt_steps: 1,
        meta_batch: 1,
        mode: MetaGradMode::SecondOrder,
        deterministic: true,
        ..MetaConfig::default()
    };
    let theta0 = randomized_params(&dims, 6).unwrap();
    let tasks = vec![fixture_task(&dims, 70)];
    let (grad, _) = meta_gradient(&theta0, &tasks, &dims, &cfg, None).unwrap();
    let flat = theta0.flatten();
    let h = 1e-5;
    let mut probe = flat.clone();
    let mut fd = Vec::with_capacity(flat.len());
    for i in 0..flat.len() {
        probe[i] = flat[i] + h;
        let plus = meta_objective(&theta0.with_flat(&probe).unwrap(), &tasks, &dims, &cfg).unwrap();
        probe[i] = flat[i] - h;
        let minus = meta_objective(&theta0.with_flat(&probe).unwrap(), &tasks, &dims, &cfg).unwrap();
        probe[i] = flat[i];
        fd.push((plus - minus) / (2.0 * h));
    }
    let g = grad.flatten();
    let dot: f64 = g.iter().zip(&fd).map(|(a, b)| a * b).sum();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let cosine = dot / (norm(&g) * norm(&fd));
    assert!(cosine >= 0.999, "cosine {cosine}");
}

#[test]
fn zero_iterations_return_the_initialization() {
    let subjects = cohort(&small_spec(2, 200), 1);
    let dims = small_dims();
    let cfg = MetaConfig {
        meta_iterations: 0,
        seed: 12,
        ..MetaConfig::default()
    };
    let (theta, log) = meta_train(&subjects, &dims, &cfg).unwrap();
    assert!(log.is_empty());
    assert_eq!(theta, init_params(&dims, 12).unwrap());
}

#[test]
fn training_is_bitwise_reproducible() {
    let subjects = cohort(&small_spec(3, 200), 2);
    let mut dims = small_dims();
    for (deterministic, dropout) in [(true, 0.0), (false, 0.3)] {
        dims.dropout = dropout;
        let cfg = MetaConfig {
            meta_iterations: 5,
            eta_inner: 0.05,
            beta: 0.01,
            deterministic,
            ..MetaConfig::default()
        };
        let (a, log_a) = meta_train(&subjects, &dims, &cfg).unwrap();
        let (b, log_b) = meta_train(&subjects, &dims, &cfg).unwrap();
        assert_eq!(log_a, log_b);
        let bits = |p: &ParamSet| p.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }
}

#[test]
fn meta_test_without_adaptation_matches_the_control() {
    let subjects = cohort(&small_spec(1, 120), 4);
    let dims = small_dims();
    let theta = init_params(&dims, 3).unwrap();
    let cfg = MetaConfig {
        adapt_steps: 0,
        ..MetaConfig::default()
    };
    let report = meta_test(&theta, &subjects[0], &dims, &cfg, ReportMetadata::default()).unwrap();
    assert_eq!(report.adapted, report.control);
    let present = subjects[0].class_counts().iter().filter(|&&n| n > 0).count();
    assert_eq!(report.support_size, present * cfg.k_shot);
    assert_eq!(report.adapted.n_eval, subjects[0].pairs.len() - report.support_size);
    assert_eq!(report.adapted.confusion.total() as usize, report.adapted.n_eval);
    let recount = report.adapted.confusion.trace() as f64 / report.adapted.n_eval as f64;
    assert!((recount - report.adapted.accuracy).abs() <= 1e-12);
}

#[test]
fn meta_training_lifts_query_accuracy_and_adaptation_helps() {
    let spec = SynthSpec::default();
    let mut all = cohort(&spec, 0);
    let held_out = all.remove(0);
    let mut dims = ModelDims::new(spec.channels, spec.feature_dim, 2, 8, spec.classes);
    dims.dropout = 0.0;
    let cfg = MetaConfig {
        eta_inner: 0.01,
        beta: 0.01,
        lambda_mix: 0.1,
        deterministic: true,
        ..MetaConfig::default()
    };
    let (theta, log) = meta_train(&all, &dims, &cfg).unwrap();
    assert_eq!(log.len(), 300);
    let window = |r: &[sthsleep_core::meta::LogRecord]| r.iter().map(|x| x.query_acc).sum::<f64>() / r.len() as f64;
    let first = window(&log[..10]);
    let last = window(&log[log.len() - 10..]);
    assert!(last - first >= 0.2, "query accuracy {first:.3} -> {last:.3}");

    let report = meta_test(&theta, &held_out, &dims, &cfg, ReportMetadata::default()).unwrap();
    assert!(
        report.adapted.accuracy >= report.control.accuracy,
        "adapted {} < control {}",
        report.adapted.accuracy,
        report.control.accuracy
    );
}
