//! Binary checkpoint container.
//!
//! Layout: 8-byte magic, little-endian `u32` format version, little-endian
//! `u64` header length, a JSON header, then every tensor's values as
//! little-endian `f64` in header order. The header carries the SHA-256 of the
//! payload, which is audited on load.

use std::path::Path;

use cfgcd_autodiff::Tensor;
use cfgcd_consistency::GuidanceMode;
use cfgcd_nets::NetConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 8] = b"CFGCDCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Teacher,
    Student,
    Embedder,
}

/// Checksums of the components that must never change between runs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrozenChecksums {
    pub world: String,
    pub dataset: String,
    pub embedder: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    kind: CheckpointKind,
    config: RunConfig,
    config_hash: String,
    net: Option<NetConfig>,
    mode: Option<GuidanceMode>,
    frozen: FrozenChecksums,
    tensors: Vec<TensorEntry>,
    payload_sha256: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    /// Resolved configuration of the run that wrote the checkpoint.
    pub config: RunConfig,
    pub net: Option<NetConfig>,
    pub mode: Option<GuidanceMode>,
    pub frozen: FrozenChecksums,
    pub tensors: Vec<(String, Tensor)>,
}

fn payload(tensors: &[(String, Tensor)]) -> Vec<u8> {
    let mut out = Vec::with_capacity(tensors.iter().map(|(_, t)| t.len() * 8).sum());
    for (_, t) in tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn bad(msg: impl Into<String>) -> CliError {
    CliError::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let body = payload(&self.tensors);
        let header = Header {
            kind: self.kind,
            config: self.config.clone(),
            config_hash: self.config.hash(),
            net: self.net.clone(),
            mode: self.mode,
            frozen: self.frozen.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| TensorEntry { name: name.clone(), rows: t.rows(), cols: t.cols() })
                .collect(),
            payload_sha256: hex::encode(Sha256::digest(&body)),
        };
        let json = serde_json::to_vec(&header).expect("header always serializes");
        let mut out = Vec::with_capacity(20 + json.len() + body.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&body);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(bad(format!(
                "checkpoint format version {version} is not supported (expected {FORMAT_VERSION})"
            )));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body_start =
            20usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
        let header: Header =
            serde_json::from_slice(&bytes[20..body_start]).map_err(|e| bad(format!("corrupt header: {e}")))?;
        let body = &bytes[body_start..];
        if hex::encode(Sha256::digest(body)) != header.payload_sha256 {
            return Err(CliError::Checksum {
                what: "checkpoint payload",
                expected: header.payload_sha256,
                found: hex::encode(Sha256::digest(body)),
            });
        }
        if header.config.hash() != header.config_hash {
            return Err(bad("stored config does not match its hash"));
        }
        let needed: usize = header.tensors.iter().map(|e| e.rows * e.cols * 8).sum();
        if needed != body.len() {
            return Err(bad(format!("payload holds {} bytes, header describes {needed}", body.len())));
        }
        let mut off = 0;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let n = e.rows * e.cols;
            let data = body[off..off + 8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            off += 8 * n;
            let t = Tensor::new(e.rows, e.cols, data).map_err(|err| bad(format!("tensor {}: {err}", e.name)))?;
            tensors.push((e.name, t));
        }
        Ok(Checkpoint {
            kind: header.kind,
            config: header.config,
            net: header.net,
            mode: header.mode,
            frozen: header.frozen,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| CliError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn expect_kind(self, kind: CheckpointKind) -> Result<Self> {
        if self.kind != kind {
            return Err(bad(format!("expected a {kind:?} checkpoint, found {:?}", self.kind)));
        }
        Ok(self)
    }
}
