use indexmap::IndexMap;

use super::matrix::Matrix;
use super::AutodiffError;

/// Named collection of dense 64-bit tensors.
///
/// Entry order is insertion order and is part of the identity of the set:
/// flattening, checkpointing and the tape's leaf numbering all follow it.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorSet {
    entries: IndexMap<String, Matrix>,
}

/// Trainable parameters (θ, θ₀, adapted θ').
pub type ParamSet = TensorSet;
/// Gradient with the same keyed structure as a [`ParamSet`].
pub type GradSet = TensorSet;

impl TensorSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) -> Result<(), AutodiffError> {
        let name = name.into();
        if !value.all_finite() {
            return Err(AutodiffError::NonFiniteParam(name));
        }
        if self.entries.contains_key(&name) {
            return Err(AutodiffError::DuplicateParam(name));
        }
        self.entries.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.entries.get(name)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.get_index_of(name)
    }

    /// In-place access to the values of one entry; the shape cannot change.
    pub fn values_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        self.entries.get_mut(name).map(|m| m.as_mut_slice())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar entries.
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(Matrix::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(Matrix::all_finite)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), Matrix::zeros(v.rows(), v.cols())))
                .collect(),
        }
    }

    pub fn same_structure(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((ka, va), (kb, vb))| ka == kb && va.shape() == vb.shape())
    }

    fn check_structure(&self, other: &Self) -> Result<(), AutodiffError> {
        if self.same_structure(other) {
            Ok(())
        } else {
            Err(AutodiffError::StructureMismatch)
        }
    }

    /// `self += alpha · other`.
    pub fn axpy(&mut self, alpha: f64, other: &Self) -> Result<(), AutodiffError> {
        self.check_structure(other)?;
        for (a, b) in self.entries.values_mut().zip(other.entries.values()) {
            for (x, &y) in a.as_mut_slice().iter_mut().zip(b.as_slice()) {
                *x += alpha * y;
            }
        }
        Ok(())
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), v.map(|x| alpha * x)))
                .collect(),
        }
    }

    pub fn dot(&self, other: &Self) -> Result<f64, AutodiffError> {
        self.check_structure(other)?;
        Ok(self
            .entries
            .values()
            .zip(other.entries.values())
            .flat_map(|(a, b)| a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| x * y))
            .sum())
    }

    pub fn norm(&self) -> f64 {
        self.entries.values().map(Matrix::frobenius_sq).sum::<f64>().sqrt()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.entries
            .values()
            .flat_map(|m| m.as_slice().iter().copied())
            .collect()
    }

    /// Rebuilds a set with this structure from a flat vector in entry order.
    pub fn with_flat(&self, flat: &[f64]) -> Result<Self, AutodiffError> {
        if flat.len() != self.num_scalars() {
            return Err(AutodiffError::StructureMismatch);
        }
        let mut off = 0;
        let mut entries = IndexMap::with_capacity(self.entries.len());
        for (k, v) in &self.entries {
            let n = v.len();
            entries.insert(
                k.clone(),
                Matrix::from_vec(v.rows(), v.cols(), flat[off..off + n].to_vec()),
            );
            off += n;
        }
        Ok(Self { entries })
    }

    /// Largest absolute entry-wise difference; `None` on structure mismatch.
    pub fn max_abs_diff(&self, other: &Self) -> Option<f64> {
        if !self.same_structure(other) {
            return None;
        }
        Some(
            self.entries
                .values()
                .zip(other.entries.values())
                .map(|(a, b)| a.max_abs_diff(b))
                .fold(0.0, f64::max),
        )
    }
}
