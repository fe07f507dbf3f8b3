//! Checkpoint file format shared by all trained models: JSON header
//! (config, epoch, loss, parameter manifest) followed by raw little-endian
//! f32 parameter payloads in header order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{ParamSet, Tensor};

const CKPT_MAGIC: [u8; 4] = *b"CKPT";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint: {0}")]
    Format(String),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ParamRecord {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    /// Model kind tag, e.g. "autoencoder", "denoiser", "embedder".
    pub kind: String,
    pub config: serde_json::Value,
    pub epoch: usize,
    pub loss: f64,
    params: Vec<ParamRecord>,
}

pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ParamSet,
}

pub fn save_checkpoint(
    path: &Path,
    kind: &str,
    config: serde_json::Value,
    epoch: usize,
    loss: f64,
    params: &ParamSet,
) -> Result<(), CheckpointError> {
    let header = CheckpointHeader {
        kind: kind.to_string(),
        config,
        epoch,
        loss,
        params: params
            .iter()
            .map(|(n, t)| ParamRecord {
                name: n.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let header_json = serde_json::to_vec(&header)?;
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(&CKPT_MAGIC)?;
    out.write_all(&(header_json.len() as u32).to_le_bytes())?;
    out.write_all(&header_json)?;
    for (_, t) in params.iter() {
        for &v in t.data() {
            out.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let mut input = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if magic != CKPT_MAGIC {
        return Err(CheckpointError::Format(format!("bad magic {magic:?}")));
    }
    let mut len_bytes = [0u8; 4];
    input.read_exact(&mut len_bytes)?;
    let mut header_json = vec![0u8; u32::from_le_bytes(len_bytes) as usize];
    input.read_exact(&mut header_json)?;
    let header: CheckpointHeader = serde_json::from_slice(&header_json)?;
    let mut params = ParamSet::new();
    for rec in &header.params {
        let numel: usize = rec.shape.iter().product();
        let mut payload = vec![0u8; numel * 4];
        input.read_exact(&mut payload).map_err(|_| {
            CheckpointError::Format(format!("truncated payload for parameter {}", rec.name))
        })?;
        let data: Vec<f64> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        params.insert(
            &rec.name,
            Tensor::new(rec.shape.clone(), data)
                .map_err(|e| CheckpointError::Format(e.to_string()))?,
        );
    }
    Ok(Checkpoint { header, params })
}

/// Round parameters to f32 precision, matching what a save/load cycle
/// produces. Training stages apply this before inference-facing stages so
/// in-memory and from-disk pipelines agree bit-exactly.
pub fn quantize_params(params: &ParamSet) -> ParamSet {
    let mut out = ParamSet::new();
    for (n, t) in params.iter() {
        out.insert(n, t.map(|v| v as f32 as f64));
    }
    out
}
