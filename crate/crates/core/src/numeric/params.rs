use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use crate::error::{shape_err, Error, Result};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named, learnable tensors.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Matrix>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Matrix] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Matrix] {
        &mut self.tensors
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Matrix::len).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn assign_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.numel() {
            return Err(shape_err(
                "assign_flat",
                format!("{} values for {} parameters", values.len(), self.numel()),
            ));
        }
        let mut offset = 0;
        for t in &mut self.tensors {
            let len = t.len();
            t.data_mut().copy_from_slice(&values[offset..offset + len]);
            offset += len;
        }
        Ok(())
    }

    /// Replaces tensors by name from `other`; every name must be present with
    /// a matching shape.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            let src = other
                .find(name)
                .map(|id| other.get(id))
                .ok_or_else(|| Error::Format(format!("missing tensor {name}")))?;
            if src.shape() != t.shape() {
                return Err(shape_err(
                    "load_from",
                    format!("{name}: {:?} vs {:?}", src.shape(), t.shape()),
                ));
            }
            *t = src.clone();
        }
        Ok(())
    }
}

/// Gradient tensors aligned with a [`ParamStore`].
pub fn flatten_grads(grads: &[Matrix]) -> Vec<f64> {
    grads.iter().flat_map(|g| g.data().iter().copied()).collect()
}
