//! Model checkpoint format: magic `RIMW`, version byte, u64 LE header
//! length, JSON header (schema, config, config hash, parameter shape table),
//! then the raw parameter blob as f32 little-endian in table order. Loading
//! validates the shape table against the architecture.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ModelConfig, ModelParams};

const MAGIC: &[u8; 4] = b"RIMW";
const VERSION: u8 = 0x01;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes (expected RIMW)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u8),
    #[error("header parse error: {0}")]
    Header(#[from] serde_json::Error),
    #[error("checkpoint mismatch: {0}")]
    Mismatch(String),
    #[error("file truncated: {0}")]
    Truncated(String),
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    schema: String,
    config_hash: String,
    config: ModelConfig,
    params: Vec<ParamMeta>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
struct ParamMeta {
    name: String,
    rows: usize,
    cols: usize,
}

fn shape_table(params: &ModelParams) -> Vec<ParamMeta> {
    let mut metas = Vec::new();
    params.visit(|name, p| {
        metas.push(ParamMeta {
            name,
            rows: p.rows,
            cols: p.cols,
        })
    });
    metas
}

pub fn save_checkpoint(
    path: &Path,
    config: &ModelConfig,
    params: &ModelParams,
    config_hash: &str,
) -> Result<(), CheckpointError> {
    let header = Header {
        schema: "rimw/1".into(),
        config_hash: config_hash.into(),
        config: config.clone(),
        params: shape_table(params),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION])?;
    w.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    let mut blob = Vec::new();
    params.visit(|_, p| {
        for &v in &p.data {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
    });
    w.write_all(&blob)?;
    w.flush()?;
    Ok(())
}

/// Load a checkpoint: rebuilds the architecture from the stored config,
/// validates the shape table, and fills the weights.
pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, ModelParams, String), CheckpointError> {
    let mut file = File::open(path)?;
    let mut head = [0u8; 13];
    file.read_exact(&mut head)
        .map_err(|_| CheckpointError::Truncated("header".into()))?;
    if &head[0..4] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    if head[4] != VERSION {
        return Err(CheckpointError::BadVersion(head[4]));
    }
    let header_len = u64::from_le_bytes(head[5..13].try_into().unwrap()) as usize;
    let mut header_bytes = vec![0u8; header_len];
    file.read_exact(&mut header_bytes)
        .map_err(|_| CheckpointError::Truncated("json header".into()))?;
    let header: Header = serde_json::from_slice(&header_bytes)?;
    if header.schema != "rimw/1" {
        return Err(CheckpointError::Mismatch(format!(
            "unknown schema {:?}",
            header.schema
        )));
    }

    let mut params = ModelParams::init(&header.config, 0);
    let expected = shape_table(&params);
    if expected != header.params {
        return Err(CheckpointError::Mismatch(
            "parameter shape table does not match the architecture".into(),
        ));
    }

    let total: usize = expected.iter().map(|m| m.rows * m.cols).sum();
    let mut blob = vec![0u8; total * 4];
    file.read_exact(&mut blob)
        .map_err(|_| CheckpointError::Truncated("parameter blob".into()))?;
    let mut offset = 0;
    params.visit_mut(|_, p| {
        for v in &mut p.data {
            let bytes: [u8; 4] = blob[offset..offset + 4].try_into().unwrap();
            *v = f32::from_le_bytes(bytes) as f64;
            offset += 4;
        }
    });
    Ok((header.config, params, header.config_hash))
}
