//! Central finite differences, the oracle for every analytic gradient.

use super::params::{GradSet, ParamSet};
use super::{evaluate, AutodiffError, Computation};

/// `(f(θ + h eᵢ) − f(θ − h eᵢ)) / 2h` for every coordinate, dropout disabled.
pub fn finite_difference_gradient<C: Computation>(f: &C, params: &ParamSet, h: f64) -> Result<GradSet, AutodiffError> {
    if !(h > 0.0) {
        return Err(AutodiffError::InvalidArgument("h must be > 0".into()));
    }
    let flat = params.flatten();
    let mut out = Vec::with_capacity(flat.len());
    let mut probe = flat.clone();
    for i in 0..flat.len() {
        probe[i] = flat[i] + h;
        let plus = evaluate(f, &params.with_flat(&probe)?)?;
        probe[i] = flat[i] - h;
        let minus = evaluate(f, &params.with_flat(&probe)?)?;
        probe[i] = flat[i];
        out.push((plus - minus) / (2.0 * h));
    }
    params.with_flat(&out)
}

/// Norm-wise relative error `‖a − b‖ / max(‖a‖, ‖b‖)`; zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "relative_error length mismatch");
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = na.max(nb);
    if denom == 0.0 {
        0.0
    } else {
        diff / denom
    }
}

/// Relative error between two gradients for one parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupError {
    pub group: String,
    pub rel_error: f64,
    pub analytic_norm: f64,
}

impl GroupError {
    /// Compares `analytic` and `numeric` entry by entry, grouping entries by
    /// `group_of(name)`.
    pub fn by_group(analytic: &GradSet, numeric: &GradSet, group_of: impl Fn(&str) -> String) -> Vec<GroupError> {
        let mut groups: Vec<(String, Vec<f64>, Vec<f64>)> = Vec::new();
        for ((name, a), (_, n)) in analytic.iter().zip(numeric.iter()) {
            let g = group_of(name);
            let slot = match groups.iter().position(|(k, ..)| *k == g) {
                Some(i) => i,
                None => {
                    groups.push((g, Vec::new(), Vec::new()));
                    groups.len() - 1
                }
            };
            groups[slot].1.extend_from_slice(a.as_slice());
            groups[slot].2.extend_from_slice(n.as_slice());
        }
        groups
            .into_iter()
            .map(|(group, a, n)| GroupError {
                rel_error: relative_error(&a, &n),
                analytic_norm: a.iter().map(|x| x * x).sum::<f64>().sqrt(),
                group,
            })
            .collect()
    }
}
