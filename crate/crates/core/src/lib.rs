//! Cyclic informative bottlenecks with cross-modal translation for
//! multimodal learning under missing modalities.
//!
//! Pipeline: [`encoders`] map raw tokens to unimodal representations,
//! [`bottleneck`] compresses them into Gaussian latents, [`translation`]
//! learns cross-modal translators used to fill in missing latents, and
//! [`fusion`] fuses latents pairwise with cross-modal attention before the
//! prediction head. [`trainer`] ties the losses together and [`protocols`]
//! and [`metrics`] drive evaluation.

pub mod batch;
pub mod bottleneck;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod protocols;
pub mod rng;
pub mod tape;
pub mod trainer;
pub mod translation;

pub use batch::{Labels, MultimodalBatch};
pub use bottleneck::{BottleneckLatent, IbConfig, Sampling};
pub use checkpoint::{load_checkpoint, load_checkpoint_for, save_checkpoint};
pub use config::{Ablation, ExperimentConfig};
pub use data::{read_dataset, write_dataset, Dataset, DatasetSpec, Label, MultimodalSample, Task};
pub use error::{Error, FormatError, Result};
pub use fusion::FusionConfig;
pub use metrics::MetricReport;
pub use model::CyinModel;
pub use protocols::{PresenceMask, Protocol};
pub use tape::{Matrix, Tape, Var};
pub use trainer::{evaluate, train, train_observed, LossBundle, TrainOutcome};
pub use translation::TranslationConfig;
