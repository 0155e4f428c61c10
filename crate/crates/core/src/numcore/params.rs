use crate::error::{Error, Result};

use super::Matrix;

#[derive(Clone, Debug, PartialEq)]
struct Param {
    name: String,
    value: Matrix,
    velocity: Matrix,
}

/// Ordered, named parameter tensors with one momentum buffer each.
///
/// A parameter's shape is fixed once inserted; [`ParamStore::set`] only
/// accepts a value of the same shape. Replacing a parameter with a different
/// shape requires [`ParamStore::remove`] followed by [`ParamStore::insert`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a parameter with a zeroed momentum buffer. Returns its index.
    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) -> Result<usize> {
        let name = name.into();
        if self.index_of(&name).is_some() {
            return Err(Error::InvalidArgument(format!(
                "duplicate parameter {name}"
            )));
        }
        let velocity = Matrix::zeros(value.rows(), value.cols());
        self.entries.push(Param {
            name,
            value,
            velocity,
        });
        Ok(self.entries.len() - 1)
    }

    pub fn remove(&mut self, name: &str) -> Option<Matrix> {
        let idx = self.index_of(name)?;
        Some(self.entries.remove(idx).value)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|p| p.name == name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index_of(name).is_some()
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.index_of(name).map(|i| &self.entries[i].value)
    }

    pub fn name(&self, index: usize) -> &str {
        &self.entries[index].name
    }

    pub fn value(&self, index: usize) -> &Matrix {
        &self.entries[index].value
    }

    pub fn velocity(&self, index: usize) -> &Matrix {
        &self.entries[index].velocity
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|p| p.name.as_str())
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.entries.iter().map(|p| p.value.shape()).collect()
    }

    /// Total scalar parameter count.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|p| p.value.len()).sum()
    }

    pub fn set(&mut self, name: &str, value: Matrix) -> Result<()> {
        let idx = self
            .index_of(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))?;
        self.set_value(idx, value)
    }

    pub fn set_value(&mut self, index: usize, value: Matrix) -> Result<()> {
        let entry = &mut self.entries[index];
        if entry.value.shape() != value.shape() {
            return Err(Error::dim(
                format!("parameter {}", entry.name),
                entry.value.shape_str(),
                value.shape_str(),
            ));
        }
        entry.value = value;
        Ok(())
    }

    pub fn set_velocity(&mut self, index: usize, velocity: Matrix) -> Result<()> {
        let entry = &mut self.entries[index];
        if entry.velocity.shape() != velocity.shape() {
            return Err(Error::dim(
                format!("velocity of {}", entry.name),
                entry.velocity.shape_str(),
                velocity.shape_str(),
            ));
        }
        entry.velocity = velocity;
        Ok(())
    }

    pub fn reset_velocity(&mut self) {
        for p in &mut self.entries {
            p.velocity = Matrix::zeros(p.value.rows(), p.value.cols());
        }
    }

    pub(crate) fn value_mut(&mut self, index: usize) -> &mut Matrix {
        &mut self.entries[index].value
    }

    pub(crate) fn value_and_velocity_mut(&mut self, index: usize) -> (&mut Matrix, &mut Matrix) {
        let p = &mut self.entries[index];
        (&mut p.value, &mut p.velocity)
    }
}

/// Gradients aligned with the parameter order of a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    tensors: Vec<Matrix>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            tensors: store
                .shapes()
                .into_iter()
                .map(|(r, c)| Matrix::zeros(r, c))
                .collect(),
        }
    }

    pub fn from_tensors(tensors: Vec<Matrix>) -> Self {
        Self { tensors }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, index: usize) -> &Matrix {
        &self.tensors[index]
    }

    pub fn by_name<'a>(&'a self, store: &ParamStore, name: &str) -> Option<&'a Matrix> {
        store.index_of(name).and_then(|i| self.tensors.get(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Matrix> {
        self.tensors.iter()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Matrix::is_finite)
    }
}
