//! Checkpoint file: 8-byte magic, little-endian u64 header length, a JSON
//! header, then every parameter block in declared order as little-endian f32.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ScorerModel};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"VQLCKPT1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockShape {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub architecture: ModelConfig,
    pub seed: u64,
    pub epoch: Option<usize>,
    /// Free-form training configuration snapshot.
    pub config: serde_json::Value,
    pub blocks: Vec<BlockShape>,
    pub param_count: usize,
}

impl CheckpointHeader {
    pub fn for_model(
        model: &ScorerModel,
        seed: u64,
        epoch: Option<usize>,
        config: serde_json::Value,
    ) -> Self {
        Self {
            architecture: model.config().clone(),
            seed,
            epoch,
            config,
            blocks: model
                .blocks()
                .iter()
                .map(|b| BlockShape {
                    name: b.name.clone(),
                    rows: b.rows,
                    cols: b.cols,
                })
                .collect(),
            param_count: model.param_count(),
        }
    }
}

pub fn encode_checkpoint(model: &ScorerModel, header: &CheckpointHeader) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(header)?;
    let mut out = Vec::with_capacity(16 + json.len() + 4 * model.param_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for &v in model.params() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

/// Writes to a temporary sibling and renames it into place.
pub fn save_checkpoint(path: &Path, model: &ScorerModel, header: &CheckpointHeader) -> Result<()> {
    let bytes = encode_checkpoint(model, header)?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint, checking its architecture against `expected` when
/// given.
pub fn load_checkpoint(
    path: &Path,
    expected: Option<&ModelConfig>,
) -> Result<(ScorerModel, CheckpointHeader)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, expected)
}

pub fn decode_checkpoint(
    bytes: &[u8],
    expected: Option<&ModelConfig>,
) -> Result<(ScorerModel, CheckpointHeader)> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes
        .get(16..16 + hlen)
        .ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(body)?;
    if let Some(exp) = expected {
        if exp != &header.architecture {
            return Err(bad(
                "architecture in header does not match the requested model",
            ));
        }
    }
    let mut model = ScorerModel::zeroed(header.architecture.clone())?;
    let shapes_match = model.blocks().len() == header.blocks.len()
        && model
            .blocks()
            .iter()
            .zip(&header.blocks)
            .all(|(a, b)| a.name == b.name && a.rows == b.rows && a.cols == b.cols);
    if !shapes_match || model.param_count() != header.param_count {
        return Err(bad("parameter blocks do not match the architecture"));
    }
    let data = &bytes[16 + hlen..];
    if data.len() != 4 * header.param_count {
        return Err(bad("parameter payload has the wrong size"));
    }
    for (dst, chunk) in model.params_mut().iter_mut().zip(data.chunks_exact(4)) {
        *dst = f32::from_le_bytes(chunk.try_into().expect("4 bytes")) as f64;
    }
    Ok((model, header))
}
