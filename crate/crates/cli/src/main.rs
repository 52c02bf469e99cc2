use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use sthsleep_core::checkpoint::{self, CheckpointError};
use sthsleep_core::config::{deterministic_from_env, ConfigError, RunConfig};
use sthsleep_core::data::{load_cohort, load_subject, synth_generate, write_cohort, DataError, SubjectRecording};
use sthsleep_core::eval::{sweep, SweepAxis};
use sthsleep_core::gradcheck;
use sthsleep_core::learner::{init_params, LearnerError};
use sthsleep_core::meta::{meta_test, meta_train_with, preflight, MetaError, SubjectPairs};
use sthsleep_core::metrics::ReportMetadata;

/// Tolerance on the task-loss gradient check.
const TASK_GRAD_TOL: f64 = 1e-4;
/// Tolerance on the second-order meta-gradient check.
const META_GRAD_TOL: f64 = 1e-3;

#[derive(Parser)]
#[command(
    name = "sthsleep",
    version,
    about = "Few-shot sleep staging with hypergraph meta-learning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort in the on-disk subject layout.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Meta-train on every subject under `--data` and write a checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Subject ids to leave out of training.
        #[arg(long, value_delimiter = ',')]
        exclude: Vec<String>,
    },
    /// Fine-tune a checkpoint on one subject and report metrics.
    Test {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        subject: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Directory for `report.json` and the confusion CSVs.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic gradients against finite differences.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
    },
    /// Leave-one-subject-out runs over a range of one hyperparameter.
    Sweep {
        #[arg(long)]
        axis: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<usize>,
        #[arg(long)]
        config: PathBuf,
        /// Cohort directory; a synthetic cohort from the config is used when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Also write the rows as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Report per-subject class counts against the sampling requirements.
    Preflight {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Debug)]
struct Failure {
    kind: &'static str,
    message: String,
}

impl Failure {
    fn new(kind: &'static str, message: impl Into<String>) -> Self {
        Self {
            kind,
            message: message.into(),
        }
    }
}

macro_rules! failure_from {
    ($($t:ty => $kind:literal),* $(,)?) => {
        $(impl From<$t> for Failure {
            fn from(e: $t) -> Self {
                Failure::new($kind, e.to_string())
            }
        })*
    };
}

failure_from! {
    ConfigError => "config",
    DataError => "data",
    MetaError => "meta",
    LearnerError => "model",
    CheckpointError => "checkpoint",
    std::io::Error => "io",
    serde_json::Error => "io",
}

fn io_at(path: &Path) -> impl Fn(std::io::Error) -> Failure + '_ {
    move |e| Failure::new("io", format!("{}: {e}", path.display()))
}

fn load_config(path: &Path) -> Result<RunConfig, Failure> {
    Ok(RunConfig::load(path)?.with_deterministic(deterministic_from_env()))
}

fn check_shape(rec: &SubjectRecording, cfg: &RunConfig) -> Result<(), Failure> {
    if rec.channels() != cfg.dims.channels || rec.feature_dim() != cfg.dims.feature_dim {
        return Err(Failure::new(
            "data",
            format!(
                "subject {} has N={} d={}, config expects N={} d={}",
                rec.subject_id(),
                rec.channels(),
                rec.feature_dim(),
                cfg.dims.channels,
                cfg.dims.feature_dim
            ),
        ));
    }
    Ok(())
}

fn prepare(recordings: &[SubjectRecording], cfg: &RunConfig) -> Result<Vec<SubjectPairs>, Failure> {
    recordings
        .iter()
        .map(|r| {
            check_shape(r, cfg)?;
            Ok(SubjectPairs::prepare(r)?)
        })
        .collect()
}

fn synth(spec: &Path, seed: u64, out: &Path) -> Result<(), Failure> {
    let cfg = RunConfig::load(spec)?;
    let cohort = synth_generate(&cfg.synth, seed)?;
    fs::create_dir_all(out).map_err(io_at(out))?;
    write_cohort(&cohort, out)?;
    println!(
        "{}",
        json!({
            "subjects": cohort.iter().map(|r| r.subject_id()).collect::<Vec<_>>(),
            "t_steps": cfg.synth.t_steps,
            "out": out.display().to_string(),
        })
    );
    Ok(())
}

fn log_path(ckpt: &Path) -> PathBuf {
    let mut name = ckpt.as_os_str().to_owned();
    name.push(".log");
    PathBuf::from(name)
}

fn train(data: &Path, config: &Path, out: &Path, exclude: &[String]) -> Result<(), Failure> {
    let cfg = load_config(config)?;
    let mut recordings = load_cohort(data, cfg.dims.classes)?;
    recordings.retain(|r| !exclude.iter().any(|x| x == r.subject_id()));
    let cohort = prepare(&recordings, &cfg)?;

    let log = log_path(out);
    let mut writer = BufWriter::new(fs::File::create(&log).map_err(io_at(&log))?);
    let mut last = None;
    let theta0 = init_params(&cfg.dims, cfg.meta.seed)?;
    let result = meta_train_with(&cohort, &cfg.dims, &cfg.meta, theta0, |r| {
        last = Some(*r);
        writeln!(writer, "{}", serde_json::to_string(r).map_err(std::io::Error::other)?)
    });
    writer.flush().map_err(io_at(&log))?;
    let theta = result?;
    checkpoint::save(out, &theta)?;
    println!(
        "{}",
        json!({
            "checkpoint": out.display().to_string(),
            "log": log.display().to_string(),
            "subjects": cohort.len(),
            "iterations": cfg.meta.meta_iterations,
            "final": last,
            "config_digest": cfg.digest(),
        })
    );
    Ok(())
}

fn test(ckpt: &Path, subject: &Path, config: &Path, out: Option<&Path>) -> Result<(), Failure> {
    let cfg = load_config(config)?;
    let theta = checkpoint::load(ckpt)?;
    let expected = init_params(&cfg.dims, 0)?;
    if !theta.same_structure(&expected) {
        return Err(Failure::new(
            "checkpoint",
            "checkpoint parameters do not match the configured model dimensions",
        ));
    }
    let rec = load_subject(subject, cfg.dims.classes)?;
    check_shape(&rec, &cfg)?;
    let pairs = SubjectPairs::prepare(&rec)?;
    let report = meta_test(
        &theta,
        &pairs,
        &cfg.dims,
        &cfg.meta,
        ReportMetadata {
            subject_id: rec.subject_id().to_string(),
            seed: cfg.meta.seed,
            config_digest: cfg.digest(),
        },
    )?;
    let doc = serde_json::to_string(&report)?;
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(io_at(dir))?;
        let write = |name: &str, body: &str| {
            let p = dir.join(name);
            fs::write(&p, body).map_err(io_at(&p))
        };
        write("report.json", &serde_json::to_string_pretty(&report)?)?;
        write("confusion.csv", &report.adapted.confusion.to_csv())?;
        write("control_confusion.csv", &report.control.confusion.to_csv())?;
    }
    println!("{doc}");
    Ok(())
}

fn run_gradcheck(config: &Path) -> Result<(), Failure> {
    let cfg = load_config(config)?;
    let report = gradcheck::run(cfg.meta.seed, cfg.meta.eta_inner, cfg.meta.lambda_mix)?;
    for g in &report.groups {
        println!("{}", json!({ "group": g.group, "max_rel_error": g.rel_error }));
    }
    println!(
        "{}",
        json!({ "group": "meta_gradient", "max_rel_error": report.meta_rel_error })
    );
    println!(
        "{}",
        json!({
            "max_rel_error": report.max_rel_error,
            "meta_rel_error": report.meta_rel_error,
            "task_tolerance": TASK_GRAD_TOL,
            "meta_tolerance": META_GRAD_TOL,
        })
    );
    if report.max_rel_error > TASK_GRAD_TOL || report.meta_rel_error > META_GRAD_TOL {
        return Err(Failure::new(
            "gradcheck",
            format!(
                "relative error above tolerance (task {:e}, meta {:e})",
                report.max_rel_error, report.meta_rel_error
            ),
        ));
    }
    Ok(())
}

fn run_sweep(
    axis: &str,
    values: &[usize],
    config: &Path,
    data: Option<&Path>,
    csv: Option<&Path>,
) -> Result<(), Failure> {
    let axis: SweepAxis = axis.parse().map_err(|e: String| Failure::new("usage", e))?;
    let cfg = load_config(config)?;
    let recordings = match data {
        Some(dir) => load_cohort(dir, cfg.dims.classes)?,
        None => synth_generate(&cfg.synth, cfg.meta.seed)?,
    };
    let cohort = prepare(&recordings, &cfg)?;
    let report = sweep(&cohort, &cfg.dims, &cfg.meta, axis, values, &cfg.digest());
    if let Some(path) = csv {
        fs::write(path, report.to_csv()).map_err(io_at(path))?;
    }
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

fn run_preflight(data: &Path, config: &Path) -> Result<(), Failure> {
    let cfg = load_config(config)?;
    let recordings = load_cohort(data, cfg.dims.classes)?;
    let cohort = prepare(&recordings, &cfg)?;
    let needed = 2 * cfg.meta.k_shot;
    let mut feasible = true;
    for (subject, (id, short)) in cohort.iter().zip(preflight(&cohort, needed)) {
        let ok = cohort_subject_ok(&short, cfg.meta.n_way, cfg.dims.classes);
        feasible &= ok;
        println!(
            "{}",
            json!({
                "subject_id": id,
                "class_counts": subject.class_counts(),
                "short_classes": short.iter().map(|(c, _)| c).collect::<Vec<_>>(),
                "feasible": ok,
            })
        );
    }
    println!("{}", json!({ "needed_per_class": needed, "feasible": feasible }));
    Ok(())
}

/// With `n_way == C` every class must be sufficient; otherwise `n_way`
/// sufficient classes are enough.
fn cohort_subject_ok(short: &[(usize, usize)], n_way: usize, classes: usize) -> bool {
    if n_way >= classes {
        short.is_empty()
    } else {
        classes - short.len() >= n_way
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Synth { spec, seed, out } => synth(&spec, seed, &out),
        Command::Train {
            data,
            config,
            out,
            exclude,
        } => train(&data, &config, &out, &exclude),
        Command::Test {
            ckpt,
            subject,
            config,
            out,
        } => test(&ckpt, &subject, &config, out.as_deref()),
        Command::Gradcheck { config } => run_gradcheck(&config),
        Command::Sweep {
            axis,
            values,
            config,
            data,
            csv,
        } => run_sweep(&axis, &values, &config, data.as_deref(), csv.as_deref()),
        Command::Preflight { data, config } => run_preflight(&data, &config),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            eprintln!(
                "{}",
                json!({ "error": first.trim_start_matches("error: "), "kind": "usage" })
            );
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", json!({ "error": f.message, "kind": f.kind }));
            ExitCode::FAILURE
        }
    }
}
