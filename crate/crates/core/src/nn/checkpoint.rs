//! Network checkpoints: an 8-byte magic, a little-endian `u64` header
//! length, a JSON header, then every parameter tensor as raw little-endian
//! `f64` values in layer order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LayerSpec, Network, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"MRMTLCK\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub tensors: Vec<TensorEntry>,
    /// Seeds, training and channel configuration of the producing run.
    pub meta: serde_json::Value,
}

pub fn encode_checkpoint(net: &Network, meta: serde_json::Value) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        input_shape: net.input_shape().to_vec(),
        layers: net.specs().cloned().collect(),
        tensors: net
            .params()
            .iter()
            .enumerate()
            .map(|(i, t)| TensorEntry {
                name: net.param_name(i),
                shape: t.shape().to_vec(),
            })
            .collect(),
        meta,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + 8 * net.num_parameters());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in net.params() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8], file: &str) -> Result<(Network, CheckpointHeader)> {
    let format = |offset: usize, reason: &str| Error::Format {
        file: file.to_string(),
        offset: offset as u64,
        reason: reason.to_string(),
    };
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(format(0, "not a checkpoint (bad magic)"));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = 16usize
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| format(8, "header length exceeds file size"))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[16..body])?;
    if header.format_version != FORMAT_VERSION {
        return Err(format(16, &format!("unsupported format_version {}", header.format_version)));
    }
    // Weights are overwritten below; the init seed is irrelevant.
    let mut net = Network::new(&header.input_shape, header.layers.clone(), 0)?;
    let mut offset = body;
    let mut params = Vec::with_capacity(header.tensors.len());
    for entry in &header.tensors {
        let n: usize = entry.shape.iter().product();
        let end = offset + 8 * n;
        if end > bytes.len() {
            return Err(format(offset, &format!("truncated tensor {}", entry.name)));
        }
        let data = bytes[offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.push(Tensor::from_vec(entry.shape.clone(), data)?);
        offset = end;
    }
    if offset != bytes.len() {
        return Err(format(offset, "trailing bytes after last tensor"));
    }
    net.set_params(params)?;
    Ok((net, header))
}

pub fn save_checkpoint(path: &Path, net: &Network, meta: serde_json::Value) -> Result<()> {
    let bytes = encode_checkpoint(net, meta)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(Network, CheckpointHeader)> {
    let bytes = fs::read(path).map_err(|source| Error::Load {
        path: path.to_path_buf(),
        source,
    })?;
    decode_checkpoint(&bytes, &path.display().to_string())
}
