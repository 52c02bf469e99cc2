use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const SMALL: &str = "\
# three tiny subjects
n_subjects = 3
t_steps = 120
channels = 3
feature_dim = 2
classes = 3
n_way = 3
k_shot = 2
meta_iterations = 4
meta_batch = 2
heads = 1
d_attn = 2
";

fn sthsleep(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sthsleep"))
        .args(args)
        .env_remove("STH_DETERMINISTIC")
        .output()
        .expect("spawn sthsleep")
}

fn stdout_lines(out: &Output) -> Vec<Value> {
    String::from_utf8_lossy(&out.stdout)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap_or_else(|e| panic!("{l}: {e}")))
        .collect()
}

fn error_of(out: &Output) -> Value {
    let err = String::from_utf8_lossy(&out.stderr);
    let lines: Vec<&str> = err.lines().collect();
    assert_eq!(lines.len(), 1, "stderr: {err}");
    serde_json::from_str(lines[0]).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn setup(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
    let cfg = dir.join("run.cfg");
    fs::write(&cfg, SMALL).unwrap();
    let data = dir.join("data");
    let out = sthsleep(&["synth", "--spec", p(&cfg), "--seed", "4", "--out", p(&data)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    (cfg, data)
}

#[test]
fn synth_train_test_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data) = setup(dir.path());
    for s in ["synth00", "synth01", "synth02"] {
        assert!(data.join(s).join("features.csv").is_file());
        assert!(data.join(s).join("labels.csv").is_file());
    }

    let ckpt = dir.path().join("model.ckpt");
    let out = sthsleep(&[
        "train",
        "--data",
        p(&data),
        "--config",
        p(&cfg),
        "--out",
        p(&ckpt),
        "--exclude",
        "synth02",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = &stdout_lines(&out)[0];
    assert_eq!(summary["subjects"], 2);
    assert_eq!(&fs::read(&ckpt).unwrap()[..5], b"STHM1");
    let log = fs::read_to_string(dir.path().join("model.ckpt.log")).unwrap();
    let records: Vec<Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), 4);
    for (i, r) in records.iter().enumerate() {
        assert_eq!(r["iteration"], i);
        assert!(r["meta_loss"].as_f64().unwrap().is_finite());
        assert!((0.0..=1.0).contains(&r["query_acc"].as_f64().unwrap()));
    }

    let report_dir = dir.path().join("report");
    let out = sthsleep(&[
        "test",
        "--ckpt",
        p(&ckpt),
        "--subject",
        p(&data.join("synth02")),
        "--config",
        p(&cfg),
        "--out",
        p(&report_dir),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = &stdout_lines(&out)[0];
    for side in ["adapted", "control"] {
        let r = &report[side];
        let n_eval = r["n_eval"].as_u64().unwrap();
        let counts = r["confusion"]["counts"].as_array().unwrap();
        let total: u64 = counts
            .iter()
            .flat_map(|row| row.as_array().unwrap())
            .map(|v| v.as_u64().unwrap())
            .sum();
        let trace: u64 = (0..counts.len()).map(|i| counts[i][i].as_u64().unwrap()).sum();
        assert_eq!(total, n_eval);
        assert!((trace as f64 / n_eval as f64 - r["accuracy"].as_f64().unwrap()).abs() <= 1e-12);
        assert_eq!(r["metadata"]["subject_id"], "synth02");
        assert_eq!(r["metadata"]["config_digest"], summary["config_digest"]);
    }
    assert_eq!(report["support_size"], 6);
    let csv = fs::read_to_string(report_dir.join("confusion.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(report_dir.join("control_confusion.csv").is_file());
    let written: Value = serde_json::from_str(&fs::read_to_string(report_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(&written, report);
}

#[test]
fn preflight_reports_feasibility_per_subject() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data) = setup(dir.path());
    let out = sthsleep(&["preflight", "--data", p(&data), "--config", p(&cfg)]);
    assert!(out.status.success());
    let lines = stdout_lines(&out);
    assert_eq!(lines.len(), 4);
    assert_eq!(lines[0]["subject_id"], "synth00");
    assert_eq!(lines[3]["needed_per_class"], 4);
    assert_eq!(lines[3]["feasible"], true);

    let greedy = dir.path().join("greedy.cfg");
    fs::write(&greedy, format!("{SMALL}k_shot = 1000\n").replace("k_shot = 2\n", "")).unwrap();
    let out = sthsleep(&["preflight", "--data", p(&data), "--config", p(&greedy)]);
    assert!(out.status.success());
    let lines = stdout_lines(&out);
    assert_eq!(lines[0]["short_classes"], serde_json::json!([0, 1, 2]));
    assert_eq!(lines[3]["feasible"], false);

    let out = sthsleep(&[
        "train",
        "--data",
        p(&data),
        "--config",
        p(&greedy),
        "--out",
        p(&dir.path().join("x")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err = error_of(&out);
    assert_eq!(err["kind"], "meta");
    assert!(err["error"].as_str().unwrap().contains("synth0"));
}

#[test]
fn failures_are_single_line_json() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.cfg");
    let out = sthsleep(&["gradcheck", "--config", p(&missing)]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_of(&out)["kind"], "config");

    let bad = dir.path().join("bad.cfg");
    fs::write(&bad, "seed = 1\nlearning_rate = 3\n").unwrap();
    let out = sthsleep(&["gradcheck", "--config", p(&bad)]);
    assert_eq!(out.status.code(), Some(1));
    let err = error_of(&out);
    assert!(err["error"].as_str().unwrap().contains("learning_rate"));

    let out = sthsleep(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_of(&out)["kind"], "usage");

    let out = sthsleep(&["sweep", "--axis", "depth", "--values", "1", "--config", p(&bad)]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_of(&out)["kind"], "usage");

    let (cfg, data) = setup(dir.path());
    let ckpt = dir.path().join("junk.ckpt");
    fs::write(&ckpt, b"not a checkpoint").unwrap();
    let out = sthsleep(&[
        "test",
        "--ckpt",
        p(&ckpt),
        "--subject",
        p(&data.join("synth00")),
        "--config",
        p(&cfg),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_of(&out)["kind"], "checkpoint");

    let help = sthsleep(&["--help"]);
    assert!(help.status.success());
}

#[test]
fn gradcheck_prints_one_line_per_group() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("g.cfg");
    fs::write(&cfg, "seed = 3\n").unwrap();
    let out = sthsleep(&["gradcheck", "--config", p(&cfg)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let lines = stdout_lines(&out);
    let groups: Vec<&str> = lines.iter().filter_map(|l| l["group"].as_str()).collect();
    for g in [
        "projection",
        "coefficients",
        "attention_q",
        "attention_k",
        "attention_v",
        "mlp",
        "classifier",
        "meta_gradient",
    ] {
        assert!(groups.contains(&g), "missing {g}");
    }
    let summary = lines.last().unwrap();
    assert!(summary["max_rel_error"].as_f64().unwrap() <= 1e-4);
}
