//! Binary checkpoint: `RUPF`, u32 version, u32 header length, JSON header,
//! then every tensor as little-endian f32 in manifest order.

use std::path::Path;

use rupformer_core::kpi::Normalizer;
use rupformer_core::model::{Hyperparams, ModelError, RupFormer};
use rupformer_core::TrainConfig;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{Error, Result};
use crate::fsutil;

pub const MAGIC: [u8; 4] = *b"RUPF";
pub const VERSION: u32 = 1;
const PREAMBLE: usize = 12;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}, expected {VERSION}")]
    Version(u32),
    #[error("truncated: {section} needs {expected} bytes, {actual} available")]
    Truncated { section: &'static str, expected: usize, actual: usize },
    #[error("{0} trailing bytes after the payload")]
    Trailing(usize),
    #[error("payload checksum {actual:08x} does not match header {expected:08x}")]
    Checksum { expected: u32, actual: u32 },
    #[error("invalid header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the payload.
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    hyperparams: Hyperparams,
    train_config: TrainConfig,
    normalizer: Normalizer,
    tensors: Vec<TensorEntry>,
    payload_bytes: usize,
    payload_crc32: u32,
}

/// A trained model together with everything needed to use it on raw data.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: RupFormer,
    pub train_config: TrainConfig,
    pub normalizer: Normalizer,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::with_capacity(self.model.params().count() * 4);
        let mut tensors = Vec::new();
        for (_, name, t) in self.model.params().iter() {
            tensors.push(TensorEntry { name: name.to_owned(), shape: t.shape().to_vec(), offset: payload.len() });
            payload.extend(t.data().iter().flat_map(|v| v.to_le_bytes()));
        }
        let header = Header {
            hyperparams: self.model.hyperparams().clone(),
            train_config: self.train_config.clone(),
            normalizer: self.normalizer.clone(),
            tensors,
            payload_bytes: payload.len(),
            payload_crc32: crc32fast::hash(&payload),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(PREAMBLE + json.len() + payload.len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let need = |section, expected: usize, actual: usize| {
            if actual < expected {
                Err(CheckpointError::Truncated { section, expected, actual })
            } else {
                Ok(())
            }
        };
        need("preamble", PREAMBLE, bytes.len())?;
        if bytes[..4] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
        let version = word(4);
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let header_len = word(8) as usize;
        need("header", header_len, bytes.len() - PREAMBLE)?;
        let header: Header = serde_json::from_slice(&bytes[PREAMBLE..PREAMBLE + header_len])?;
        let payload = &bytes[PREAMBLE + header_len..];
        need("payload", header.payload_bytes, payload.len())?;
        if payload.len() > header.payload_bytes {
            return Err(CheckpointError::Trailing(payload.len() - header.payload_bytes));
        }
        let actual = crc32fast::hash(payload);
        if actual != header.payload_crc32 {
            return Err(CheckpointError::Checksum { expected: header.payload_crc32, actual });
        }

        let mut model = RupFormer::zeroed(header.hyperparams)?;
        if header.tensors.len() != model.params().len() {
            return Err(CheckpointError::Manifest(format!(
                "{} tensors listed, the configuration has {}",
                header.tensors.len(),
                model.params().len()
            )));
        }
        let mut seen = std::collections::HashSet::new();
        let mut expected_offset = 0;
        for entry in &header.tensors {
            if !seen.insert(entry.name.as_str()) {
                return Err(CheckpointError::Manifest(format!("{} listed twice", entry.name)));
            }
            let len = entry.shape.iter().product::<usize>() * 4;
            if entry.offset != expected_offset || entry.offset + len > payload.len() {
                return Err(CheckpointError::Manifest(format!("{} has offset {} and {len} bytes", entry.name, entry.offset)));
            }
            let data: Vec<f32> = payload[entry.offset..entry.offset + len]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            model.set_param(&entry.name, &entry.shape, &data)?;
            expected_offset += len;
        }
        if expected_offset != payload.len() {
            return Err(CheckpointError::Manifest(format!(
                "manifest covers {expected_offset} of {} payload bytes",
                payload.len()
            )));
        }
        Ok(Self { model, train_config: header.train_config, normalizer: header.normalizer })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsutil::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fsutil::read(path)?;
        Self::from_bytes(&bytes).map_err(|source| Error::Checkpoint { path: path.into(), source })
    }
}
