//! Self-describing checkpoint files.
//!
//! Layout: the 8-byte magic `NALGCKPT`, a little-endian `u32` format version,
//! a little-endian `u64` header length, the JSON header, then every parameter
//! as little-endian `f64` in manifest order. The header holds each stream's
//! [`StreamConfig`] and a manifest of `(name, shape, offset)` where `offset`
//! counts `f64` values from the start of the data section, plus a CRC32 of
//! the data bytes.

use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ModelError, StreamConfig, StreamModel};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"NALGCKPT";
const PREFIX: usize = 8 + 4 + 8;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("checkpoint data checksum mismatch: header says {expected:08x}, data has {found:08x}")]
    Checksum { expected: u32, found: u32 },
    #[error("checkpoint manifest inconsistent: {0}")]
    Manifest(String),
    #[error("checkpoint header: {0}")]
    Header(#[from] serde_json::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StreamEntry {
    config: StreamConfig,
    params: Vec<ParamEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    data_values: usize,
    data_crc32: u32,
    streams: Vec<StreamEntry>,
}

/// Serializes streams to checkpoint bytes.
pub fn write_checkpoint(streams: &[StreamModel]) -> Result<Vec<u8>, CheckpointError> {
    let mut data = Vec::new();
    let mut entries = Vec::with_capacity(streams.len());
    let mut offset = 0;
    for s in streams {
        let mut params = Vec::with_capacity(s.params().len());
        for (name, t) in s.param_names().iter().zip(s.params()) {
            params.push(ParamEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            });
            for v in t.values() {
                data.extend_from_slice(&v.to_le_bytes());
            }
            offset += t.numel();
        }
        entries.push(StreamEntry {
            config: s.config().clone(),
            params,
        });
    }
    let header = Header {
        format_version: CHECKPOINT_VERSION,
        data_values: offset,
        data_crc32: crc32fast::hash(&data),
        streams: entries,
    };
    let header = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(PREFIX + header.len() + data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&data);
    Ok(out)
}

/// Parses checkpoint bytes back into streams.
pub fn read_checkpoint(bytes: &[u8]) -> Result<Vec<StreamModel>, CheckpointError> {
    if bytes.len() < PREFIX {
        if bytes.len() >= 8 && &bytes[..8] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        return Err(CheckpointError::Truncated {
            expected: PREFIX,
            found: bytes.len(),
        });
    }
    if &bytes[..8] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let header_end = PREFIX
        .checked_add(header_len)
        .ok_or_else(|| CheckpointError::Manifest("header length overflows".into()))?;
    if bytes.len() < header_end {
        return Err(CheckpointError::Truncated {
            expected: header_end,
            found: bytes.len(),
        });
    }
    let header: Header = serde_json::from_slice(&bytes[PREFIX..header_end])?;
    if header.format_version != version {
        return Err(CheckpointError::Version {
            found: header.format_version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let expected = header_end + header.data_values * 8;
    if bytes.len() != expected {
        if bytes.len() < expected {
            return Err(CheckpointError::Truncated {
                expected,
                found: bytes.len(),
            });
        }
        return Err(CheckpointError::Manifest(format!(
            "{} trailing bytes after parameter data",
            bytes.len() - expected
        )));
    }
    let data = &bytes[header_end..];
    let crc = crc32fast::hash(data);
    if crc != header.data_crc32 {
        return Err(CheckpointError::Checksum {
            expected: header.data_crc32,
            found: crc,
        });
    }

    let mut streams = Vec::with_capacity(header.streams.len());
    let mut next = 0;
    for entry in header.streams {
        let mut named = Vec::with_capacity(entry.params.len());
        for p in entry.params {
            if p.offset != next {
                return Err(CheckpointError::Manifest(format!(
                    "{} starts at value {}, expected {next}",
                    p.name, p.offset
                )));
            }
            let n: usize = p.shape.iter().product();
            if p.offset + n > header.data_values {
                return Err(CheckpointError::Manifest(format!(
                    "{} runs past the data section",
                    p.name
                )));
            }
            let values = data[p.offset * 8..(p.offset + n) * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(p.shape, values).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
            named.push((p.name, t));
            next += n;
        }
        streams.push(StreamModel::from_named_params(entry.config, named)?);
    }
    if next != header.data_values {
        return Err(CheckpointError::Manifest(format!(
            "manifest covers {next} values, data holds {}",
            header.data_values
        )));
    }
    Ok(streams)
}

pub fn save_checkpoint(path: impl AsRef<Path>, streams: &[StreamModel]) -> Result<(), CheckpointError> {
    fs::write(path, write_checkpoint(streams)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Vec<StreamModel>, CheckpointError> {
    read_checkpoint(&fs::read(path)?)
}
