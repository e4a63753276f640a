//! Single-file checkpoints.
//!
//! ```text
//! magic   b"TFCK"
//! u32     version
//! u64     manifest length in bytes
//! ...     JSON manifest (config echo, parameter table with blob offsets)
//! ...     one TNSR blob per parameter; offsets are relative to the first blob
//! ```

use std::fs;
use std::io::Cursor;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::params::ParamGroup;
use crate::tensor::{read_tensor, write_tensor, Dtype};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TFCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    group: ParamGroup,
    shape: Vec<usize>,
    trainable: bool,
    offset: u64,
    length: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    config: ModelConfig,
    params: Vec<ParamEntry>,
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let mut blobs = Vec::new();
    let mut params = Vec::with_capacity(model.params.len());
    for p in model.params.iter() {
        let offset = blobs.len() as u64;
        let length = write_tensor(&mut blobs, &p.tensor, Dtype::F64)? as u64;
        params.push(ParamEntry {
            name: p.name.clone(),
            group: p.group,
            shape: p.tensor.shape().to_vec(),
            trainable: p.tensor.requires_grad,
            offset,
            length,
        });
    }
    let manifest = Manifest {
        format: "tokenflow-checkpoint".into(),
        version: CHECKPOINT_VERSION,
        config: model.config.clone(),
        params,
    };
    let json = serde_json::to_vec_pretty(&manifest)?;
    let mut out = Vec::with_capacity(16 + json.len() + blobs.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blobs);
    fs::write(path, out)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let bytes = fs::read(path)?;
    if bytes.len() < 16 {
        return Err(Error::Truncated(format!("checkpoint header in {}", path.display())));
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!("{} is not a checkpoint", path.display())));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version { expected: CHECKPOINT_VERSION.to_string(), found: version.to_string() });
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let json_end = 16usize
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Truncated("checkpoint manifest".into()))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[16..json_end])?;
    let blobs = &bytes[json_end..];

    let mut model = Model::new(manifest.config, 0)?;
    if manifest.params.len() != model.params.len() {
        return Err(Error::CountMismatch { manifest: manifest.params.len(), found: model.params.len() });
    }
    for p in model.params.iter_mut() {
        let entry = manifest
            .params
            .iter()
            .find(|e| e.name == p.name)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks parameter {}", p.name)))?;
        let (start, end) = (entry.offset as usize, (entry.offset + entry.length) as usize);
        if end > blobs.len() {
            return Err(Error::Truncated(format!("parameter {}", p.name)));
        }
        let (tensor, _) = read_tensor(&mut Cursor::new(&blobs[start..end]))?;
        if tensor.shape() != p.tensor.shape() || entry.shape != tensor.shape() {
            return Err(Error::Format(format!(
                "parameter {} has shape {:?}, model expects {:?}",
                p.name,
                tensor.shape(),
                p.tensor.shape()
            )));
        }
        p.tensor = tensor.with_requires_grad(entry.trainable);
    }
    Ok(model)
}
