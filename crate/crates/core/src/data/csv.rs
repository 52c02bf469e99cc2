//! On-disk subject layout: `<subject>/features.csv` and `<subject>/labels.csv`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{DataError, SubjectRecording};

const FEATURES: &str = "features.csv";
const LABELS: &str = "labels.csv";

fn read(path: &Path) -> Result<String, DataError> {
    if !path.is_file() {
        return Err(DataError::MissingFile(path.to_path_buf()));
    }
    fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn parse_int(file: &Path, line: usize, cell: &str) -> Result<i64, DataError> {
    cell.trim().parse::<i64>().map_err(|_| DataError::NonNumeric {
        file: file.to_path_buf(),
        line,
        cell: cell.to_string(),
    })
}

fn parse_real(file: &Path, line: usize, cell: &str) -> Result<f64, DataError> {
    match cell.trim().parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(DataError::NonNumeric {
            file: file.to_path_buf(),
            line,
            cell: cell.to_string(),
        }),
    }
}

fn shape(file: &Path, line: usize, message: impl Into<String>) -> DataError {
    DataError::Shape {
        file: file.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Non-empty lines with their 1-based line numbers.
fn lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.is_empty())
}

fn read_labels(path: &Path, classes: usize) -> Result<Vec<usize>, DataError> {
    let text = read(path)?;
    let mut it = lines(&text);
    let header = it.next().map(|(_, h)| h).unwrap_or("");
    if header != "t,label" {
        return Err(DataError::Header {
            file: path.to_path_buf(),
            line: 1,
            expected: "t,label".into(),
            found: header.into(),
        });
    }
    let mut labels = Vec::new();
    for (line, row) in it {
        let cells: Vec<&str> = row.split(',').collect();
        if cells.len() != 2 {
            return Err(shape(path, line, format!("expected 2 cells, found {}", cells.len())));
        }
        let t = parse_int(path, line, cells[0])?;
        if t != labels.len() as i64 {
            return Err(shape(path, line, format!("expected t={}, found {t}", labels.len())));
        }
        let label = parse_int(path, line, cells[1])?;
        if label < 0 || label as usize >= classes {
            return Err(DataError::LabelRange {
                file: path.to_path_buf(),
                line,
                label,
                classes,
            });
        }
        labels.push(label as usize);
    }
    Ok(labels)
}

/// Loads one subject directory. The subject id is the directory name; `T`,
/// `N` and `d` are inferred from the files.
pub fn load_subject(dir: &Path, classes: usize) -> Result<SubjectRecording, DataError> {
    let subject_id = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string());
    let labels_path = dir.join(LABELS);
    let labels = read_labels(&labels_path, classes)?;

    let path = dir.join(FEATURES);
    let text = read(&path)?;
    let mut it = lines(&text);
    let header = it.next().map(|(_, h)| h).unwrap_or("");
    let cols: Vec<&str> = header.split(',').collect();
    let d = cols.len().saturating_sub(2);
    let expected: Vec<String> = ["t".to_string(), "channel".to_string()]
        .into_iter()
        .chain((0..d).map(|k| format!("f{k}")))
        .collect();
    if d == 0 || cols != expected {
        return Err(DataError::Header {
            file: path.clone(),
            line: 1,
            expected: "t,channel,f0,...,f{d-1}".into(),
            found: header.into(),
        });
    }

    let mut rows: Vec<(usize, i64, i64, Vec<f64>)> = Vec::new();
    for (line, row) in it {
        let cells: Vec<&str> = row.split(',').collect();
        if cells.len() != d + 2 {
            return Err(shape(
                &path,
                line,
                format!("expected {} cells, found {}", d + 2, cells.len()),
            ));
        }
        let t = parse_int(&path, line, cells[0])?;
        let ch = parse_int(&path, line, cells[1])?;
        let vals = cells[2..]
            .iter()
            .map(|c| parse_real(&path, line, c))
            .collect::<Result<Vec<_>, _>>()?;
        rows.push((line, t, ch, vals));
    }
    let n = rows.iter().take_while(|r| r.1 == 0).count();
    let t_steps = labels.len();
    if n == 0 {
        return Err(shape(&path, 2, "no rows for t=0"));
    }
    let mut features = Vec::with_capacity(rows.len() * d);
    for (i, (line, t, ch, vals)) in rows.iter().enumerate() {
        let (et, ec) = ((i / n) as i64, (i % n) as i64);
        if (*t, *ch) != (et, ec) {
            return Err(shape(
                &path,
                *line,
                format!(
                    "expected (t={et}, channel={ec}), found (t={t}, channel={ch}); rows must be sorted by (t, channel)"
                ),
            ));
        }
        features.extend_from_slice(vals);
    }
    if rows.len() != t_steps * n {
        let line = rows.last().map_or(1, |r| r.0);
        return Err(shape(
            &path,
            line,
            format!(
                "found {} rows, labels imply T*N = {}*{} = {}",
                rows.len(),
                t_steps,
                n,
                t_steps * n
            ),
        ));
    }
    SubjectRecording::new(subject_id, n, d, classes, features, labels)
}

/// Writes `rec` into `dir` (created if needed).
pub fn write_subject(rec: &SubjectRecording, dir: &Path) -> Result<(), DataError> {
    let io = |path: PathBuf| move |source| DataError::Io { path, source };
    fs::create_dir_all(dir).map_err(io(dir.to_path_buf()))?;

    let mut f = String::from("t,channel");
    for k in 0..rec.feature_dim() {
        let _ = write!(f, ",f{k}");
    }
    f.push('\n');
    for t in 0..rec.t_steps() {
        for c in 0..rec.channels() {
            let _ = write!(f, "{t},{c}");
            for k in 0..rec.feature_dim() {
                let _ = write!(f, ",{}", rec.value(t, c, k));
            }
            f.push('\n');
        }
    }
    let fp = dir.join(FEATURES);
    fs::write(&fp, f).map_err(io(fp.clone()))?;

    let mut l = String::from("t,label\n");
    for (t, y) in rec.labels().iter().enumerate() {
        let _ = writeln!(l, "{t},{y}");
    }
    let lp = dir.join(LABELS);
    fs::write(&lp, l).map_err(io(lp.clone()))?;
    Ok(())
}

/// Loads every subject directory under `dir`, ordered by subject id.
pub fn load_cohort(dir: &Path, classes: usize) -> Result<Vec<SubjectRecording>, DataError> {
    let entries = fs::read_dir(dir).map_err(|source| DataError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut subjects: Vec<PathBuf> = entries
        .filter_map(Result::ok)
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    subjects.sort();
    if subjects.is_empty() {
        return Err(DataError::Invalid(format!(
            "no subject directories in {}",
            dir.display()
        )));
    }
    subjects.iter().map(|p| load_subject(p, classes)).collect()
}

pub fn write_cohort(cohort: &[SubjectRecording], dir: &Path) -> Result<(), DataError> {
    for rec in cohort {
        write_subject(rec, &dir.join(rec.subject_id()))?;
    }
    Ok(())
}
