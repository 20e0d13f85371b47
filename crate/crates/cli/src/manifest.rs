use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use cyin_core::{Ablation, ExperimentConfig, MetricReport, Task};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunKind {
    Train,
    Eval,
}

/// Provenance of one `train` or `eval` invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: RunKind,
    pub ablation: Ablation,
    pub task: Task,
    pub seed: u64,
    pub config_hash: String,
    pub config_path: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub log: Option<PathBuf>,
    pub config: ExperimentConfig,
    pub results: Vec<MetricReport>,
    pub started_unix: u64,
    pub finished_unix: u64,
}

impl Manifest {
    pub fn write(&self, dir: &Path) -> CliResult {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        write_file(&dir.join(MANIFEST_FILE), text.as_bytes())
    }

    pub fn read(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::usage(format!("{}: not a run manifest: {e}", path.display())))
    }
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

pub fn write_file(path: &Path, bytes: &[u8]) -> CliResult {
    std::fs::write(path, bytes).map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))
}

pub fn create_dir(path: &Path) -> CliResult {
    std::fs::create_dir_all(path).map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))
}
