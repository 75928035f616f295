//! Binary checkpoint container.
//!
//! Layout:
//!
//! ```text
//! magic   8 bytes  "GCLCKPT\x01"
//! hlen    u64 LE   length of the JSON header
//! header  hlen     JSON: model config, seed, step, block table
//! blocks           f64 LE values, blocks in header order
//! digest  32 bytes SHA-256 of everything above
//! ```

use super::{ModelConfig, ModelParams};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

const MAGIC: &[u8; 8] = b"GCLCKPT\x01";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockInfo {
    pub name: String,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub seed: u64,
    pub step: u64,
    pub blocks: Vec<BlockInfo>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub blocks: Vec<Vec<f64>>,
}

impl Checkpoint {
    pub fn new(model: ModelConfig, seed: u64, step: u64) -> Self {
        Self {
            header: CheckpointHeader {
                model,
                seed,
                step,
                blocks: Vec::new(),
            },
            blocks: Vec::new(),
        }
    }

    pub fn push_block(&mut self, name: impl Into<String>, data: Vec<f64>) {
        self.header.blocks.push(BlockInfo {
            name: name.into(),
            len: data.len(),
        });
        self.blocks.push(data);
    }

    pub fn block(&self, name: &str) -> Option<&[f64]> {
        self.header
            .blocks
            .iter()
            .position(|b| b.name == name)
            .map(|i| self.blocks[i].as_slice())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let total: usize = self.blocks.iter().map(|b| b.len() * 8).sum();
        let mut out = Vec::with_capacity(8 + 8 + header.len() + total + 32);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for b in &self.blocks {
            for v in b {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 8 + 8 + 32 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(bad("checksum mismatch"));
        }
        let hlen = u64::from_le_bytes(body[8..16].try_into().unwrap()) as usize;
        let hend = 16usize
            .checked_add(hlen)
            .filter(|&e| e <= body.len())
            .ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(&body[16..hend])?;
        let mut blocks = Vec::with_capacity(header.blocks.len());
        let mut off = hend;
        for info in &header.blocks {
            let end = off + info.len * 8;
            if end > body.len() {
                return Err(bad("truncated parameter block"));
            }
            blocks.push(
                body[off..end]
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            );
            off = end;
        }
        if off != body.len() {
            return Err(bad("trailing bytes after parameter blocks"));
        }
        Ok(Self { header, blocks })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Flattens all model weights into one block named `"model"`.
pub fn model_block(params: &ModelParams) -> Vec<f64> {
    params.tensors().iter().flat_map(|t| t.data().iter().copied()).collect()
}

/// Rebuilds weights from a `"model"` block produced by [`model_block`].
pub fn params_from_block(config: &ModelConfig, data: &[f64]) -> Result<ModelParams> {
    let mut params = super::init_model(config, 0)?;
    let expected: usize = params.tensors().iter().map(|t| t.len()).sum();
    if expected != data.len() {
        return Err(Error::Checkpoint(format!(
            "model block holds {} values, config needs {expected}",
            data.len()
        )));
    }
    let mut off = 0;
    for t in params.tensors_mut() {
        let n = t.len();
        t.data_mut().copy_from_slice(&data[off..off + n]);
        off += n;
    }
    Ok(params)
}

pub fn tensor_block(t: &Tensor) -> Vec<f64> {
    t.data().to_vec()
}
