//! Fixtures shared by the benchmarks.

use cyin_core::{CyinModel, Dataset, ExperimentConfig, Matrix, MultimodalBatch, Result};
use ndarray::Array2;

pub struct Fixture {
    pub config: ExperimentConfig,
    pub data: Dataset,
    pub model: CyinModel,
    pub batch: MultimodalBatch,
}

/// Desk-sized model and one training batch.
pub fn fixture(num_samples: usize) -> Result<Fixture> {
    let mut config = ExperimentConfig::desk();
    config.data.num_samples = num_samples;
    let data = Dataset::generate(&config.data)?;
    let model = CyinModel::new(&config)?;
    let n = num_samples.min(config.train.batch_size);
    let idx: Vec<usize> = (0..n).collect();
    let batch = MultimodalBatch::from_samples(&data.samples, &idx, config.data.task, config.data.num_classes)?;
    Ok(Fixture { config, data, model, batch })
}

/// Deterministic latent tokens of shape `(rows, dim)`.
pub fn latent(rows: usize, dim: usize, phase: f64) -> Matrix {
    Array2::from_shape_fn((rows, dim), |(i, j)| ((i * dim + j) as f64 * 0.37 + phase).sin())
}
