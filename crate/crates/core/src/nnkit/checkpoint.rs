//! Checkpoint files: magic `SGDS1`, one JSON manifest line, then the raw
//! little-endian f32 payload in manifest order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{NnError, ParamVector, Result, TensorInfo};

const MAGIC: &[u8; 5] = b"SGDS1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Layer widths of the network the tensors belong to.
    pub spec: Vec<usize>,
    pub params: ParamVector,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    spec: Vec<usize>,
    tensors: Vec<TensorInfo>,
}

/// Values are narrowed to f32 on disk.
pub fn save_params(path: &Path, spec: &[usize], params: &ParamVector) -> Result<()> {
    let manifest = Manifest {
        spec: spec.to_vec(),
        tensors: params.manifest().to_vec(),
    };
    let mut bytes = Vec::with_capacity(64 + params.len() * 4);
    bytes.extend_from_slice(MAGIC);
    serde_json::to_writer(&mut bytes, &manifest)
        .map_err(|e| NnError::MalformedManifest(e.to_string()))?;
    bytes.push(b'\n');
    for &v in params.values() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&bytes)?;
    file.sync_all()?;
    Ok(())
}

pub fn load_params(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    decode(&bytes)
}

fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let body = bytes.strip_prefix(MAGIC).ok_or(NnError::UnrecognizedFormat)?;
    let newline = body
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| NnError::MalformedManifest("missing manifest terminator".into()))?;
    let manifest: Manifest = serde_json::from_slice(&body[..newline])
        .map_err(|e| NnError::MalformedManifest(e.to_string()))?;
    let payload = &body[newline + 1..];
    let count: usize = manifest.tensors.iter().map(TensorInfo::numel).sum();
    if payload.len() != count * 4 {
        return Err(NnError::PayloadLengthMismatch {
            expected: count * 4,
            found: payload.len(),
        });
    }
    let values = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    Ok(Checkpoint {
        spec: manifest.spec,
        params: ParamVector::new(values, manifest.tensors)?,
    })
}
