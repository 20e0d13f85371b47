//! Named parameter storage shared by every model component.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tape::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Optimizer group. Encoders and everything else get separate learning rates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamGroup {
    Encoder,
    Other,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub value: Matrix,
    pub group: ParamGroup,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix, group: ParamGroup) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(ParamEntry { name, value, group });
        ParamId(self.entries.len() - 1)
    }

    /// Xavier-uniform initialized weight, rounded to `f32` so checkpoints
    /// reproduce it bit for bit.
    pub fn add_xavier<R: Rng>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        group: ParamGroup,
        rng: &mut R,
    ) -> ParamId {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let value = Array2::from_shape_fn((rows, cols), |_| {
            let u: f64 = rng.random_range(-bound..bound);
            u as f32 as f64
        });
        self.add(name, value, group)
    }

    pub fn add_filled(&mut self, name: impl Into<String>, rows: usize, cols: usize, fill: f64, group: ParamGroup) -> ParamId {
        self.add(name, Array2::from_elem((rows, cols), fill), group)
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.entries[id.0].value
    }

    pub fn set(&mut self, id: ParamId, value: Matrix) {
        let slot = &mut self.entries[id.0].value;
        assert_eq!(slot.dim(), value.dim(), "shape change for parameter {}", self.entries[id.0].name);
        *slot = value;
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.entries[id.0].group
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Round every value to the nearest `f32`.
    pub fn round_to_f32(&mut self) {
        for e in &mut self.entries {
            e.value.mapv_inplace(|v| v as f32 as f64);
        }
    }
}
