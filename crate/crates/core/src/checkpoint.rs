//! Binary checkpoints of a trained model.
//!
//! Layout, little-endian:
//!
//! ```text
//! "CYCK" | version u16 | config hash, 64 ASCII hex bytes
//! | config JSON length u32 | config JSON
//! | tensor count u32 | per tensor: name length u16, name, rows u32, cols u32, rows*cols f32
//! | SHA-256 of everything before it (32 bytes)
//! ```

use std::path::Path;

use ndarray::Array2;
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::{Error, FormatError, Result};
use crate::model::CyinModel;

const MAGIC: &[u8; 4] = b"CYCK";
pub const CHECKPOINT_VERSION: u16 = 1;
const HASH_LEN: usize = 64;
const DIGEST_LEN: usize = 32;

pub fn encode_checkpoint(model: &CyinModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(model.config.hash().as_bytes());
    let json = serde_json::to_vec(&model.config).expect("config serializes");
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(model.store.len() as u32).to_le_bytes());
    for (_, e) in model.store.iter() {
        out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.extend_from_slice(&(e.value.nrows() as u32).to_le_bytes());
        out.extend_from_slice(&(e.value.ncols() as u32).to_le_bytes());
        for &v in e.value.iter() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(FormatError::Truncated { expected: end as u64, actual: self.bytes.len() as u64 });
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32(&mut self) -> Result<f32, FormatError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn utf8(&mut self, n: usize, field: &str) -> Result<&'a str, FormatError> {
        std::str::from_utf8(self.take(n)?)
            .map_err(|e| FormatError::Field { field: field.into(), reason: e.to_string() })
    }
}

/// Parsed checkpoint contents before they are bound to a model.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointData {
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub tensors: Vec<(String, Array2<f64>)>,
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<CheckpointData> {
    if bytes.len() >= 4 && &bytes[..4] != MAGIC {
        return Err(FormatError::Magic {
            expected: String::from_utf8_lossy(MAGIC).into_owned(),
            found: String::from_utf8_lossy(&bytes[..4]).into_owned(),
        }
        .into());
    }
    let mut r = Reader { bytes, pos: 0 };
    r.take(4)?;
    let version = r.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(FormatError::Version { found: version, supported: CHECKPOINT_VERSION }.into());
    }
    let config_hash = r.utf8(HASH_LEN, "config_hash")?.to_string();
    let json_len = r.u32()? as usize;
    let json = r.utf8(json_len, "config")?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let name_len = r.u16()? as usize;
        let name = r.utf8(name_len, &format!("tensor[{i}].name"))?.to_string();
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let len = rows
            .checked_mul(cols)
            .ok_or_else(|| FormatError::Shape(format!("tensor {name} is {rows}x{cols}")))?;
        if r.pos + len * 4 > bytes.len() {
            return Err(FormatError::Truncated { expected: (r.pos + len * 4) as u64, actual: bytes.len() as u64 }.into());
        }
        let mut v = Array2::zeros((rows, cols));
        for x in v.iter_mut() {
            *x = r.f32()? as f64;
        }
        tensors.push((name, v));
    }
    let body_end = r.pos;
    let stored = r.take(DIGEST_LEN)?;
    if r.pos != bytes.len() {
        return Err(FormatError::Trailing { expected: r.pos as u64, actual: bytes.len() as u64 }.into());
    }
    if Sha256::digest(&bytes[..body_end]).as_slice() != stored {
        return Err(FormatError::Field { field: "checksum".into(), reason: "SHA-256 does not match contents".into() }.into());
    }
    let config: ExperimentConfig =
        serde_json::from_str(json).map_err(|e| FormatError::Field { field: "config".into(), reason: e.to_string() })?;
    if config.hash() != config_hash {
        return Err(Error::Incompatible(format!(
            "stored config hash {config_hash} does not match the embedded config ({})",
            config.hash()
        )));
    }
    Ok(CheckpointData { config_hash, config, tensors })
}

/// Rebuilds the model described by a checkpoint and loads its tensors.
pub fn model_from_checkpoint(data: CheckpointData) -> Result<CyinModel> {
    let mut model = CyinModel::new(&data.config)?;
    if data.tensors.len() != model.store.len() {
        return Err(Error::Incompatible(format!(
            "checkpoint holds {} tensors, model has {}",
            data.tensors.len(),
            model.store.len()
        )));
    }
    for (name, value) in data.tensors {
        let id = model
            .store
            .find(&name)
            .ok_or_else(|| Error::Incompatible(format!("unknown tensor {name}")))?;
        if model.store.value(id).dim() != value.dim() {
            return Err(FormatError::Shape(format!(
                "tensor {name}: expected {:?}, found {:?}",
                model.store.value(id).dim(),
                value.dim()
            ))
            .into());
        }
        model.store.set(id, value);
    }
    Ok(model)
}

pub fn save_checkpoint(model: &CyinModel, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<CyinModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    model_from_checkpoint(decode_checkpoint(&bytes)?)
}

/// Loads a checkpoint and checks that it was trained under `expected`.
pub fn load_checkpoint_for(path: &Path, expected: &ExperimentConfig) -> Result<CyinModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let data = decode_checkpoint(&bytes)?;
    let want = expected.hash();
    if data.config_hash != want {
        return Err(Error::Incompatible(format!("config hash mismatch: checkpoint {}, expected {want}", data.config_hash)));
    }
    model_from_checkpoint(data)
}
