//! Minibatches in stacked-token layout.

use ndarray::Array2;

use crate::data::{Label, MultimodalSample, Task};
use crate::error::{Error, Result};
use crate::tape::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub enum Labels {
    Regression(Vec<f64>),
    Classification { classes: Vec<usize>, num_classes: usize },
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Regression(v) => v.len(),
            Labels::Classification { classes, .. } => classes.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn task(&self) -> Task {
        match self {
            Labels::Regression(_) => Task::Regression,
            Labels::Classification { .. } => Task::Classification,
        }
    }

    /// `N x 1` column of regression targets.
    pub fn regression_column(&self) -> Result<Matrix> {
        match self {
            Labels::Regression(v) => Ok(Array2::from_shape_vec((v.len(), 1), v.clone()).expect("column shape")),
            _ => Err(Error::TaskMismatch("expected regression labels".into())),
        }
    }

    /// `N x V` one-hot matrix of class targets.
    pub fn one_hot(&self) -> Result<Matrix> {
        match self {
            Labels::Classification { classes, num_classes } => {
                let mut m = Array2::zeros((classes.len(), *num_classes));
                for (i, &c) in classes.iter().enumerate() {
                    m[[i, c]] = 1.0;
                }
                Ok(m)
            }
            _ => Err(Error::TaskMismatch("expected class labels".into())),
        }
    }
}

/// Per-modality token matrices for `N` samples, each `(N*L) x C_u`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalBatch {
    pub modalities: Vec<Matrix>,
    pub labels: Labels,
    pub num_samples: usize,
    pub seq_len: usize,
}

impl MultimodalBatch {
    pub fn num_modalities(&self) -> usize {
        self.modalities.len()
    }

    /// Gathers `indices` from `samples` into one batch.
    pub fn from_samples(samples: &[MultimodalSample], indices: &[usize], task: Task, num_classes: usize) -> Result<Self> {
        let first = indices
            .first()
            .map(|&i| &samples[i])
            .ok_or(Error::EmptyInput("MultimodalBatch::from_samples"))?;
        let u = first.modalities.len();
        let seq_len = first.modalities[0].nrows();
        let dims: Vec<usize> = first.modalities.iter().map(|m| m.ncols()).collect();
        let n = indices.len();
        let mut modalities: Vec<Matrix> = dims.iter().map(|&c| Array2::zeros((n * seq_len, c))).collect();
        let mut reg = Vec::new();
        let mut cls = Vec::new();
        for (row, &idx) in indices.iter().enumerate() {
            let s = &samples[idx];
            if s.modalities.len() != u {
                return Err(Error::dim(format!("sample {}", s.sample_id), u, s.modalities.len()));
            }
            for (m, t) in s.modalities.iter().enumerate() {
                if t.dim() != (seq_len, dims[m]) {
                    return Err(Error::dim(
                        format!("sample {} modality {m}", s.sample_id),
                        format!("{seq_len}x{}", dims[m]),
                        format!("{}x{}", t.nrows(), t.ncols()),
                    ));
                }
                modalities[m].slice_mut(ndarray::s![row * seq_len..(row + 1) * seq_len, ..]).assign(t);
            }
            match (task, s.label) {
                (Task::Regression, Label::Regression(y)) => reg.push(y),
                (Task::Classification, Label::Class(c)) => cls.push(c as usize),
                (t, l) => return Err(Error::TaskMismatch(format!("label {l:?} in a {t} batch"))),
            }
        }
        let labels = match task {
            Task::Regression => Labels::Regression(reg),
            Task::Classification => Labels::Classification { classes: cls, num_classes },
        };
        Ok(Self { modalities, labels, num_samples: n, seq_len })
    }
}
