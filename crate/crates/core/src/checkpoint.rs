//! Versioned binary files for global checkpoints (and, through the shared
//! envelope, watermark keys).
//!
//! Layout: 8-byte magic, `u32` format version, `u32` header length, a JSON
//! header, then a little-endian `f32` payload. The header records the
//! payload length and its SHA-256 so truncation and bit rot are detected.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{build_model, flatten_moments, unflatten_moments, ArchConfig, BnMode, ModelGraph, Moments};

pub const FORMAT_VERSION: u32 = 1;
const CHECKPOINT_MAGIC: &[u8; 8] = b"WMFCKPT\0";

#[derive(Serialize, Deserialize)]
struct Envelope<H> {
    payload_len: usize,
    payload_sha256: String,
    header: H,
}

fn sha_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub(crate) fn write_envelope<H: Serialize>(
    path: &Path,
    magic: &[u8; 8],
    header: &H,
    payload: &[f32],
) -> Result<()> {
    let body: Vec<u8> = payload.iter().flat_map(|v| v.to_le_bytes()).collect();
    let env = Envelope {
        payload_len: payload.len(),
        payload_sha256: sha_hex(&body),
        header,
    };
    let json = serde_json::to_vec(&env)?;
    let mut out = Vec::with_capacity(16 + json.len() + body.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&body);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_envelope<H: DeserializeOwned>(path: &Path, magic: &[u8; 8]) -> Result<(H, Vec<f32>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let corrupt = |detail: &str| Error::Corrupt {
        path: path.to_path_buf(),
        detail: detail.to_string(),
    };
    if bytes.len() < 16 {
        return Err(corrupt("file shorter than the fixed preamble"));
    }
    if &bytes[..8] != magic {
        return Err(corrupt("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let hlen = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    let json = bytes.get(16..16 + hlen).ok_or_else(|| corrupt("truncated header"))?;
    let env: Envelope<H> = serde_json::from_slice(json).map_err(|e| corrupt(&format!("header: {e}")))?;
    let body = &bytes[16 + hlen..];
    if body.len() != env.payload_len * 4 {
        return Err(corrupt(&format!(
            "payload holds {} bytes, header promises {}",
            body.len(),
            env.payload_len * 4
        )));
    }
    if sha_hex(body) != env.payload_sha256 {
        return Err(corrupt("payload checksum mismatch"));
    }
    let payload = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((env.header, payload))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointHeader {
    arch: ArchConfig,
    round: usize,
    bn_momentum: f32,
    bn_eps: f32,
    tensors: Vec<TensorEntry>,
    bn_channels: Vec<usize>,
}

/// A global model as the server sees it: learnable parameters plus
/// main-task BN moments. Watermark-mode moments are never stored here.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub arch: ArchConfig,
    pub round: usize,
    pub params: Vec<f32>,
    pub main_bn: Vec<Moments>,
    pub bn_momentum: f32,
    pub bn_eps: f32,
}

impl Checkpoint {
    pub fn from_model(model: &ModelGraph, round: usize) -> Self {
        Checkpoint {
            arch: model.arch().clone(),
            round,
            params: model.flat_params(),
            main_bn: model.bn_state().snapshot(BnMode::Main),
            bn_momentum: model.bn_state().momentum,
            bn_eps: model.bn_state().eps,
        }
    }

    /// Rebuild the model. Watermark-mode moments start fresh.
    pub fn to_model(&self) -> Result<ModelGraph> {
        let mut m = build_model(&self.arch, 0)?;
        m.load_flat_params(&self.params)?;
        let bn = m.bn_state_mut();
        bn.momentum = self.bn_momentum;
        bn.eps = self.bn_eps;
        bn.install(BnMode::Main, &self.main_bn)?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let model = self.to_model()?;
        let header = CheckpointHeader {
            arch: self.arch.clone(),
            round: self.round,
            bn_momentum: self.bn_momentum,
            bn_eps: self.bn_eps,
            tensors: model
                .params()
                .iter()
                .map(|(n, p)| TensorEntry {
                    name: n.to_string(),
                    shape: p.shape.clone(),
                })
                .collect(),
            bn_channels: model.bn_state().channels(),
        };
        let mut payload = self.params.clone();
        payload.extend(flatten_moments(&self.main_bn));
        write_envelope(path, CHECKPOINT_MAGIC, &header, &payload)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (h, payload): (CheckpointHeader, _) = read_envelope(path, CHECKPOINT_MAGIC)?;
        let model = build_model(&h.arch, 0)?;
        let expected: Vec<TensorEntry> = model
            .params()
            .iter()
            .map(|(n, p)| TensorEntry {
                name: n.to_string(),
                shape: p.shape.clone(),
            })
            .collect();
        if expected != h.tensors || model.bn_state().channels() != h.bn_channels {
            return Err(Error::Corrupt {
                path: path.to_path_buf(),
                detail: "tensor table does not match the recorded architecture".into(),
            });
        }
        let n = model.params().count();
        if payload.len() < n {
            return Err(Error::Corrupt {
                path: path.to_path_buf(),
                detail: "payload shorter than the parameter table".into(),
            });
        }
        let main_bn = unflatten_moments(&payload[n..], &h.bn_channels)?;
        Ok(Checkpoint {
            arch: h.arch,
            round: h.round,
            params: payload[..n].to_vec(),
            main_bn,
            bn_momentum: h.bn_momentum,
            bn_eps: h.bn_eps,
        })
    }
}
