//! Binary container for parameter tensors.
//!
//! Layout: the 8-byte magic `GLABCKPT`, a little-endian `u64` header
//! length, a UTF-8 JSON header, then the payload of little-endian `f32`
//! values. The header records the format version, a content kind, free
//! metadata, every tensor's name, shape and byte offset, the payload
//! length and the payload's SHA-256.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::train::{EpochLog, TrainConfig};
use super::transformer::{Layout, TransformerConfig};
use super::vocab::Vocab;
use super::ModelError;

pub const MAGIC: &[u8; 8] = b"GLABCKPT";
pub const CONTAINER_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset within the payload.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContainerHeader {
    pub version: u32,
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
    pub payload_len: usize,
    pub payload_sha256: String,
}

/// A decoded container: header plus the flat `f32` payload.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub header: ContainerHeader,
    pub payload: Vec<f32>,
}

impl Container {
    /// Values of a named tensor.
    pub fn tensor(&self, name: &str) -> Option<&[f32]> {
        let i = self.header.tensors.iter().position(|t| t.name == name)?;
        let t = &self.header.tensors[i];
        let start = t.offset / 4;
        let len: usize = t.shape.iter().product();
        Some(&self.payload[start..start + len])
    }
}

pub fn encode_container(
    kind: &str,
    meta: serde_json::Value,
    tensors: &[(String, Vec<usize>)],
    payload: &[f32],
) -> Result<Vec<u8>, ModelError> {
    let mut bytes = Vec::with_capacity(payload.len() * 4);
    for v in payload {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0;
    for (name, shape) in tensors {
        entries.push(TensorEntry { name: name.clone(), shape: shape.clone(), offset });
        offset += shape.iter().product::<usize>() * 4;
    }
    if offset != bytes.len() {
        return Err(ModelError::Container(format!("tensors cover {offset} bytes, payload has {}", bytes.len())));
    }
    let header = ContainerHeader {
        version: CONTAINER_VERSION,
        kind: kind.to_string(),
        meta,
        tensors: entries,
        payload_len: bytes.len(),
        payload_sha256: hex::encode(Sha256::digest(&bytes)),
    };
    let json = serde_json::to_vec(&header).map_err(|e| ModelError::Container(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + json.len() + bytes.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&bytes);
    Ok(out)
}

pub fn decode_container(bytes: &[u8]) -> Result<Container, ModelError> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(ModelError::Container("not a checkpoint container".into()));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let header_end = 16usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or(ModelError::Truncated { expected: header_len, actual: bytes.len().saturating_sub(16) })?;
    let header: ContainerHeader =
        serde_json::from_slice(&bytes[16..header_end]).map_err(|e| ModelError::Container(e.to_string()))?;
    if header.version != CONTAINER_VERSION {
        return Err(ModelError::VersionMismatch { found: header.version, expected: CONTAINER_VERSION });
    }
    let payload = &bytes[header_end..];
    if payload.len() != header.payload_len {
        return Err(ModelError::Truncated { expected: header.payload_len, actual: payload.len() });
    }
    let actual = hex::encode(Sha256::digest(payload));
    if actual != header.payload_sha256 {
        return Err(ModelError::HashMismatch { expected: header.payload_sha256, actual });
    }
    let values = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(Container { header, payload: values })
}

pub fn write_container_file(path: &Path, bytes: &[u8]) -> Result<(), ModelError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|source| ModelError::Io { path: parent.to_path_buf(), source })?;
    }
    fs::write(path, bytes).map_err(|source| ModelError::Io { path: path.to_path_buf(), source })
}

pub fn read_container_file(path: &Path) -> Result<Container, ModelError> {
    let bytes = fs::read(path).map_err(|source| ModelError::Io { path: path.to_path_buf(), source })?;
    decode_container(&bytes)
}

/// A trained language model with its training history.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: TransformerConfig,
    pub train_config: TrainConfig,
    pub vocab: Vocab,
    pub params: Vec<f32>,
    pub log: Vec<EpochLog>,
    /// 1-based epoch whose parameters are stored.
    pub best_epoch: usize,
}

impl PartialEq for Checkpoint {
    /// Parameters are compared bitwise.
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.train_config == other.train_config
            && self.vocab == other.vocab
            && self.log == other.log
            && self.best_epoch == other.best_epoch
            && self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: TransformerConfig,
    train_config: TrainConfig,
    vocab: Vocab,
    log: Vec<EpochLog>,
    best_epoch: usize,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>, ModelError> {
        let layout = Layout::new(&self.config, self.vocab.len());
        let tensors: Vec<(String, Vec<usize>)> =
            layout.tensors.iter().map(|(n, s, _)| (n.clone(), s.clone())).collect();
        let meta = CheckpointMeta {
            config: self.config,
            train_config: self.train_config,
            vocab: self.vocab.clone(),
            log: self.log.clone(),
            best_epoch: self.best_epoch,
        };
        let meta = serde_json::to_value(meta).map_err(|e| ModelError::Container(e.to_string()))?;
        encode_container("language_model", meta, &tensors, &self.params)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let c = decode_container(bytes)?;
        if c.header.kind != "language_model" {
            return Err(ModelError::Container(format!("expected a language_model container, found {}", c.header.kind)));
        }
        let meta: CheckpointMeta =
            serde_json::from_value(c.header.meta).map_err(|e| ModelError::Container(e.to_string()))?;
        let layout = Layout::new(&meta.config, meta.vocab.len());
        if layout.total != c.payload.len() {
            return Err(ModelError::Container(format!(
                "payload holds {} values, configuration needs {}",
                c.payload.len(),
                layout.total
            )));
        }
        Ok(Checkpoint {
            config: meta.config,
            train_config: meta.train_config,
            vocab: meta.vocab,
            params: c.payload,
            log: meta.log,
            best_epoch: meta.best_epoch,
        })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), ModelError> {
    write_container_file(path, &ckpt.to_bytes()?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, ModelError> {
    let bytes = fs::read(path).map_err(|source| ModelError::Io { path: path.to_path_buf(), source })?;
    Checkpoint::from_bytes(&bytes)
}
