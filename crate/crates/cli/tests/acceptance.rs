//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde_json::Value;

use sthsleep_core::autodiff::{
    gradient_through_adaptation, value_and_grad, AutodiffError, Computation, Matrix, MetaGradMode, ParamSet, Scalar,
    Tape, Var,
};
use sthsleep_core::data::{make_pairs, synth_generate, synth_generate_with_truth, SynthSpec};
use sthsleep_core::eval::leave_one_subject_out;
use sthsleep_core::gradcheck::check_meta_gradient;
use sthsleep_core::hypergraph::{
    build_incidence, candidate_sets, hyperedge_embedding, reconstruction_error, CoefficientBank, NodeSet,
    ReconstructionLoss, P_SPA, P_TEM, THETA_SPA, THETA_TEM,
};
use sthsleep_core::learner::{classify, graph_pool, init_params, node_update, AttentionParams, HeadParams, ModelDims};
use sthsleep_core::meta::{build_tasks, MetaConfig, SubjectPairs};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn sthsleep(args: &[&str], deterministic: bool) -> std::process::Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_sthsleep"));
    cmd.args(args);
    if deterministic {
        cmd.env("STH_DETERMINISTIC", "1");
    } else {
        cmd.env_remove("STH_DETERMINISTIC");
    }
    cmd.output().expect("spawn sthsleep")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
    )
}

fn uniform_bank(rng: &mut ChaCha8Rng, n: usize) -> CoefficientBank {
    let mut u = |r, c| Matrix::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect());
    CoefficientBank {
        spa: u(2 * n, n - 1),
        tem: u(2 * n, n),
    }
}

fn gradient_correctness() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("fixture.cfg");
    fs::write(&cfg, "seed = 0\n").unwrap();
    let start = Instant::now();
    let out = sthsleep(&["gradcheck", "--config", p(&cfg)], true);
    let secs = start.elapsed().as_secs_f64();
    let stdout = String::from_utf8_lossy(&out.stdout);
    let summary: Value = serde_json::from_str(stdout.lines().last().unwrap_or("{}")).unwrap_or(Value::Null);
    let max = summary["max_rel_error"].as_f64().unwrap_or(f64::INFINITY);
    check(
        out.status.success() && max <= 1e-4 && secs < 60.0,
        format!("max rel. error {max:.2e} (<= 1e-4), {secs:.2} s (< 60 s)"),
    )
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

fn meta_gradient_correctness() -> Outcome {
    let rel = (0..5)
        .map(|seed| check_meta_gradient(seed, 0.1, 0.3).unwrap())
        .fold(0.0, f64::max);
    let mut theta = ParamSet::new();
    theta.insert("theta", Matrix::row_vector(vec![1.0])).unwrap();
    let toy = |mode| {
        gradient_through_adaptation(&theta, &Square, &Square, 1, 0.1, mode)
            .unwrap()
            .get("theta")
            .unwrap()
            .get(0, 0)
    };
    let (so, fo) = (toy(MetaGradMode::SecondOrder), toy(MetaGradMode::FirstOrder));
    check(
        rel <= 1e-3 && (so - 1.28).abs() <= 1e-12 && (fo - 1.6).abs() <= 1e-12,
        format!("fixture rel. error {rel:.2e} (<= 1e-3, 5 seeds, eta 0.1); toy second-order {so}, first-order {fo}"),
    )
}

/// Coordinate descent for `min_p λ‖b − p·A‖² + ‖p‖₁ + γ‖p‖²`.
fn elastic_net_cd(a: &Matrix, b: &[f64], lambda: f64, gamma: f64) -> Vec<f64> {
    let (k, dp) = a.shape();
    let mut p = vec![0.0; k];
    for _ in 0..100_000 {
        let mut delta: f64 = 0.0;
        for i in 0..k {
            let mut rho = 0.0;
            let mut norm = 0.0;
            for c in 0..dp {
                let others: f64 = (0..k).filter(|&j| j != i).map(|j| p[j] * a.get(j, c)).sum();
                rho += a.get(i, c) * (b[c] - others);
                norm += a.get(i, c) * a.get(i, c);
            }
            let r = 2.0 * lambda * rho;
            let new = r.signum() * (r.abs() - 1.0).max(0.0) / (2.0 * lambda * norm + 2.0 * gamma);
            delta = delta.max((new - p[i]).abs());
            p[i] = new;
        }
        if delta < 1e-15 {
            break;
        }
    }
    p
}

fn rows_of(features: &Matrix, idx: &[usize]) -> Matrix {
    let d = features.cols();
    Matrix::from_vec(
        idx.len(),
        d,
        idx.iter().flat_map(|&i| features.row(i).to_vec()).collect(),
    )
}

fn row_objective(x: &[f64], p: &[f64], cands: &Matrix, theta: &Matrix, lambda: f64, gamma: f64) -> f64 {
    lambda * reconstruction_error(x, p, cands, theta).unwrap()
        + p.iter().map(|v| v.abs()).sum::<f64>()
        + gamma * p.iter().map(|v| v * v).sum::<f64>()
}

fn elastic_net_oracle() -> Outcome {
    let start = Instant::now();
    let (lambda, gamma) = (1.0, 0.1);
    let (n, d) = (3, 4);
    let mut worst: f64 = 0.0;
    let mut below = false;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let features = gaussian(&mut rng, 2 * n, d);
        let theta_spa = gaussian(&mut rng, d, d);
        let theta_tem = gaussian(&mut rng, d, d);
        let loss = ReconstructionLoss {
            nodes: &features,
            lambda,
            gamma,
        };
        let mut params = ParamSet::new();
        params.insert(THETA_SPA, theta_spa.clone()).unwrap();
        params.insert(THETA_TEM, theta_tem.clone()).unwrap();
        let bank = CoefficientBank::constant(n, 0.0);
        params.insert(P_SPA, bank.spa).unwrap();
        params.insert(P_TEM, bank.tem).unwrap();
        let lip = [&theta_spa, &theta_tem]
            .iter()
            .map(|t| {
                let gram = t.matmul_t(t);
                2.0 * lambda * features.matmul(&gram).matmul_t(&features).frobenius_sq().sqrt() + 2.0 * gamma
            })
            .fold(0.0, f64::max);
        for k in 0..40_000 {
            let (_, grad) = value_and_grad(&loss, &params, None).unwrap();
            let lr = 0.5_f64.powf(k as f64 / 2000.0) / lip;
            for name in [P_SPA, P_TEM] {
                let g = grad.get(name).unwrap().clone();
                for (v, gv) in params.values_mut(name).unwrap().iter_mut().zip(g.as_slice()) {
                    *v -= lr * gv;
                }
            }
        }
        let m = rng.random_range(0..2 * n);
        let (spa, tem) = candidate_sets(m, n).unwrap();
        for (cands, theta, name) in [(&spa, &theta_spa, P_SPA), (&tem, &theta_tem, P_TEM)] {
            let c = rows_of(&features, cands);
            let a = c.matmul(theta);
            let b = Matrix::row_vector(features.row(m).to_vec()).matmul(theta);
            let p_star = elastic_net_cd(&a, b.as_slice(), lambda, gamma);
            let oracle = row_objective(features.row(m), &p_star, &c, theta, lambda, gamma);
            let gd = row_objective(
                features.row(m),
                params.get(name).unwrap().row(m),
                &c,
                theta,
                lambda,
                gamma,
            );
            worst = worst.max(gd - oracle);
            below |= gd < oracle - 1e-9;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        worst <= 1e-4 && !below && secs < 30.0,
        format!("20 masters, worst gap {worst:.2e} (<= 1e-4), {secs:.2} s (< 30 s)"),
    )
}

fn structural_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut violations = 0usize;
    let mut worst_scale: f64 = 0.0;
    let mut argmax_flips = 0usize;
    for i in 0..1000u64 {
        let n = rng.random_range(2..=6);
        let d = rng.random_range(1..=4);
        let nodes = NodeSet {
            features: gaussian(&mut rng, 2 * n, d),
        };
        let bank = uniform_bank(&mut rng, n);
        let snap = build_incidence(&nodes, &bank).unwrap();
        for e in 0..4 * n {
            let m = snap.masters[e];
            let (spa, tem) = candidate_sets(m, n).unwrap();
            let cands = if e < 2 * n { spa } else { tem };
            if snap.incidence.get(m, e) != 1.0 {
                violations += 1;
            }
            for v in 0..2 * n {
                let w = snap.incidence.get(v, e);
                if w < 0.0 || (w != 0.0 && v != m && !cands.contains(&v)) {
                    violations += 1;
                }
            }
        }

        let e = rng.random_range(0..4 * n);
        let c = rng.random_range(0.01..100.0);
        let mut scaled = snap.clone();
        for v in 0..2 * n {
            scaled.incidence.set(v, e, c * snap.incidence.get(v, e));
        }
        let a = hyperedge_embedding(&snap, e).unwrap();
        let b = hyperedge_embedding(&scaled, e).unwrap();
        for (x, y) in a.iter().zip(&b) {
            worst_scale = worst_scale.max((x - y).abs() / x.abs().max(1.0));
        }

        let dims = ModelDims::new(n, d, 1, 2, 5);
        let params = init_params(&dims, i).unwrap();
        let att = AttentionParams::from_params(&params, &dims).unwrap();
        let head = HeadParams::from_params(&params).unwrap();
        let mut z: Vec<Vec<f64>> = (0..2 * n)
            .map(|v| node_update(v, &snap, &att, &head).unwrap())
            .collect();
        let (_, pred) = classify(&graph_pool(&z).unwrap(), &head).unwrap();
        z.shuffle(&mut rng);
        let (_, shuffled) = classify(&graph_pool(&z).unwrap(), &head).unwrap();
        if pred != shuffled {
            argmax_flips += 1;
        }
    }
    check(
        violations == 0 && worst_scale <= 1e-12 && argmax_flips == 0,
        format!(
            "1000 snapshots: {violations} incidence violations, scale deviation {worst_scale:.1e} (<= 1e-12), {argmax_flips} argmax changes under node permutation"
        ),
    )
}

/// Nearest-class-mean accuracy on single raw slices, with per-subject and
/// population means, plus the best accuracy reachable by a rule that cannot
/// tell the two slices of a window apart.
fn generator_oracle(spec: &SynthSpec, seed: u64) -> (f64, f64, f64) {
    let cohort = synth_generate_with_truth(spec, seed).unwrap();
    let (mut own, mut pop, mut total) = (0usize, 0usize, 0usize);
    let (mut same, mut pairs) = (0usize, 0usize);
    let nearest = |slice: &[f64], means: &[Matrix]| {
        (0..means.len())
            .min_by(|&a, &b| {
                let da: f64 = slice
                    .iter()
                    .zip(means[a].as_slice())
                    .map(|(x, m)| (x - m).powi(2))
                    .sum();
                let db: f64 = slice
                    .iter()
                    .zip(means[b].as_slice())
                    .map(|(x, m)| (x - m).powi(2))
                    .sum();
                da.total_cmp(&db)
            })
            .unwrap()
    };
    for (rec, truth) in cohort.recordings.iter().zip(&cohort.truth) {
        for t in 0..rec.t_steps() {
            let y = rec.labels()[t];
            own += usize::from(nearest(rec.step(t), &truth.class_means) == y);
            pop += usize::from(nearest(rec.step(t), &cohort.population_means) == y);
            total += 1;
        }
        for t in 1..rec.t_steps() {
            same += usize::from(rec.labels()[t] == rec.labels()[t - 1]);
            pairs += 1;
        }
    }
    let ceiling = (same as f64 + 0.5 * (pairs - same) as f64) / pairs as f64;
    (own as f64 / total as f64, pop as f64 / total as f64, ceiling)
}

fn few_shot_effect() -> Outcome {
    let spec = SynthSpec::default();
    let (own, pop, ceiling) = generator_oracle(&spec, 0);
    println!(
        "        generator oracle: nearest subject mean {own:.3}, nearest population mean {pop:.3}, window-pooling ceiling {ceiling:.3}"
    );
    let start = Instant::now();
    let cohort: Vec<SubjectPairs> = synth_generate(&spec, 0)
        .unwrap()
        .iter()
        .map(|r| SubjectPairs::prepare(r).unwrap())
        .collect();
    let mut dims = ModelDims::new(spec.channels, spec.feature_dim, 2, 8, spec.classes);
    dims.dropout = 0.0;
    let cfg = MetaConfig {
        eta_inner: 0.1,
        beta: 0.01,
        lambda_mix: 0.1,
        n_way: 5,
        k_shot: 5,
        meta_iterations: 300,
        ..MetaConfig::default()
    };
    let folds = leave_one_subject_out(&cohort, &dims, &cfg, "acceptance").unwrap();
    let secs = start.elapsed().as_secs_f64();
    for f in &folds {
        println!(
            "        {}: adapted {:.3}, control {:.3}, gain {:+.3}",
            f.subject_id,
            f.report.adapted.accuracy,
            f.report.control.accuracy,
            f.gain()
        );
    }
    let mean = folds.iter().map(|f| f.report.adapted.accuracy).sum::<f64>() / folds.len() as f64;
    let gains = folds.iter().filter(|f| f.gain() >= 0.10).count();
    check(
        folds.len() == 8 && mean >= 0.60 && gains >= 6 && secs <= 900.0,
        format!(
            "mean adapted accuracy {mean:.3} (>= 0.60), {gains}/8 subjects gain >= 0.10 (need 6), {secs:.1} s (<= 900 s)"
        ),
    )
}

fn protocol_fidelity() -> Outcome {
    let spec = SynthSpec {
        n_subjects: 9,
        t_steps: 600,
        channels: 3,
        feature_dim: 2,
        ..SynthSpec::default()
    };
    let cohort: Vec<SubjectPairs> = synth_generate(&spec, 9)
        .unwrap()
        .iter()
        .map(|r| SubjectPairs::prepare(r).unwrap())
        .collect();
    let cfg = MetaConfig {
        n_way: 5,
        k_shot: 10,
        ..MetaConfig::default()
    };
    let tasks = build_tasks(&cohort, &cfg, 0).unwrap();
    let sizes: Vec<usize> = tasks.iter().map(|t| t.len()).collect();
    let total: usize = sizes.iter().sum();
    let balanced = tasks.iter().all(|t| {
        [&t.support, &t.query]
            .iter()
            .all(|set| (0..5).all(|c| set.iter().filter(|p| p.label == c).count() == 10))
    });
    let windows: usize = cohort.iter().map(|s| s.pairs.len()).sum();
    let expected_windows: usize = synth_generate(&spec, 9)
        .unwrap()
        .iter()
        .map(|r| make_pairs(r).unwrap().len())
        .sum();
    check(
        sizes.iter().all(|&s| s == 100) && total == 900 && balanced && windows == expected_windows,
        format!(
            "{} tasks of sizes {:?}, {total} instances per epoch (== 900), class-balanced: {balanced}",
            tasks.len(),
            sizes.iter().collect::<std::collections::BTreeSet<_>>()
        ),
    )
}

const SMALL_RUN: &str = "\
n_subjects = 3
t_steps = 300
channels = 4
feature_dim = 3
classes = 5
meta_iterations = 20
eta_inner = 0.05
beta = 0.01
";

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, SMALL_RUN).unwrap();
    let data = dir.path().join("data");
    let synth = sthsleep(&["synth", "--spec", p(&cfg), "--seed", "7", "--out", p(&data)], true);
    if !synth.status.success() {
        return Err(format!("synth failed: {}", String::from_utf8_lossy(&synth.stderr)));
    }
    let mut bytes = Vec::new();
    for name in ["a.ckpt", "b.ckpt"] {
        let out = dir.path().join(name);
        let run = sthsleep(
            &["train", "--data", p(&data), "--config", p(&cfg), "--out", p(&out)],
            true,
        );
        if !run.status.success() {
            return Err(format!("train failed: {}", String::from_utf8_lossy(&run.stderr)));
        }
        bytes.push(fs::read(&out).unwrap());
    }
    check(
        bytes[0] == bytes[1] && bytes[0].starts_with(b"STHM1"),
        format!(
            "two STH_DETERMINISTIC=1 training runs, {} checkpoint bytes each, identical: {}",
            bytes[0].len(),
            bytes[0] == bytes[1]
        ),
    )
}

fn sweep_harness() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("sweep.cfg");
    fs::write(&cfg, SMALL_RUN).unwrap();
    let csv = dir.path().join("sweep.csv");
    let out = sthsleep(
        &[
            "sweep",
            "--axis",
            "adapt_steps",
            "--values",
            "1,3,5,7",
            "--config",
            p(&cfg),
            "--csv",
            p(&csv),
        ],
        false,
    );
    if !out.status.success() {
        return Err(format!("sweep failed: {}", String::from_utf8_lossy(&out.stderr)));
    }
    let report: Value = serde_json::from_slice(&out.stdout).map_err(|e| e.to_string())?;
    let rows = report["rows"].as_array().cloned().unwrap_or_default();
    let values: Vec<u64> = rows.iter().filter_map(|r| r["value"].as_u64()).collect();
    let unit = |v: &Value| v.as_f64().is_some_and(|x| (0.0..=1.0).contains(&x));
    let well_formed = rows
        .iter()
        .all(|r| unit(&r["mean_accuracy"]) && unit(&r["mean_macro_f1"]) && r["error"].is_null());
    let csv_lines = fs::read_to_string(&csv).map(|s| s.lines().count()).unwrap_or(0);
    let summary: Vec<String> = rows
        .iter()
        .map(|r| format!("{}:{:.3}", r["value"], r["mean_accuracy"].as_f64().unwrap_or(f64::NAN)))
        .collect();
    check(
        values == [1, 3, 5, 7] && well_formed && report["axis"] == "adapt_steps" && csv_lines == 5,
        format!(
            "{} rows [{}], well-formed: {well_formed}",
            rows.len(),
            summary.join(", ")
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("1 gradient correctness", gradient_correctness),
        ("2 meta-gradient correctness", meta_gradient_correctness),
        ("3 elastic-net oracle", elastic_net_oracle),
        ("4 structural invariants", structural_invariants),
        ("5 synthetic few-shot effect", few_shot_effect),
        ("6 protocol fidelity", protocol_fidelity),
        ("7 determinism", determinism),
        ("8 sweep harness", sweep_harness),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("PASS criterion {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {name}: {detail}");
            }
        }
    }
    println!("acceptance: {} of 8 criteria passed", 8 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
