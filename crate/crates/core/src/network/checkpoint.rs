//! Binary checkpoint: magic, `u32` LE header length, JSON header,
//! little-endian parameter payload, `u32` LE CRC32 of everything before it.

use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Arch, NetworkError, Params};
use crate::autodiff::Tensor;
use crate::rng::PRNG_ALGORITHM;
use crate::scalar::{Scalar, ScalarWidth};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"OSRCKPT\0";

#[derive(Debug)]
pub enum CheckpointError {
    NotFound(PathBuf),
    Io {
        path: PathBuf,
        source: io::Error,
    },
    BadMagic,
    Truncated {
        needed: usize,
        available: usize,
    },
    Checksum {
        stored: u32,
        computed: u32,
    },
    Header(String),
    UnsupportedVersion {
        found: u32,
        supported: u32,
    },
    WidthMismatch {
        found: ScalarWidth,
        expected: ScalarWidth,
    },
}

impl fmt::Display for CheckpointError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::NotFound(p) => write!(f, "checkpoint not found: {}", p.display()),
            Self::Io { path, source } => write!(f, "{}: {source}", path.display()),
            Self::BadMagic => f.write_str("not a checkpoint file (bad magic)"),
            Self::Truncated { needed, available } => {
                write!(f, "checkpoint truncated: need {needed} bytes, have {available}")
            }
            Self::Checksum { stored, computed } => write!(
                f,
                "checkpoint checksum mismatch: stored {stored:08x}, computed {computed:08x}"
            ),
            Self::Header(msg) => write!(f, "malformed checkpoint header: {msg}"),
            Self::UnsupportedVersion { found, supported } => write!(
                f,
                "checkpoint format version {found} is not supported (this build reads version {supported})"
            ),
            Self::WidthMismatch { found, expected } => {
                write!(f, "checkpoint stores {found} parameters, expected {expected}")
            }
        }
    }
}

impl std::error::Error for CheckpointError {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub arch: Arch,
    pub seed: u64,
    pub scalar: ScalarWidth,
    pub prng: String,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

fn header_for<T: Scalar>(params: &Params<T>, version: u32) -> CheckpointHeader {
    CheckpointHeader {
        version,
        arch: params.arch().clone(),
        seed: params.seed(),
        scalar: T::WIDTH,
        prng: PRNG_ALGORITHM.to_string(),
        tensors: params
            .arch()
            .layout()
            .into_iter()
            .map(|(name, shape)| TensorEntry { name, shape })
            .collect(),
    }
}

fn encode_with_header<T: Scalar>(header: &CheckpointHeader, params: &Params<T>) -> Vec<u8> {
    let json = serde_json::to_vec(header).expect("header serialises");
    let mut out = Vec::with_capacity(16 + json.len() + params.n_values() * T::WIDTH.bytes());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for t in params.tensors() {
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn encode_checkpoint<T: Scalar>(params: &Params<T>) -> Vec<u8> {
    encode_with_header(&header_for(params, CHECKPOINT_VERSION), params)
}

/// Validates framing and checksum, returning the header and payload.
fn split(bytes: &[u8]) -> Result<(CheckpointHeader, &[u8]), CheckpointError> {
    let min = MAGIC.len() + 4 + 4;
    if bytes.len() < min {
        return Err(CheckpointError::Truncated {
            needed: min,
            available: bytes.len(),
        });
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let needed = min.saturating_add(hlen);
    if bytes.len() < needed {
        return Err(CheckpointError::Truncated {
            needed,
            available: bytes.len(),
        });
    }
    let body = &bytes[..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(CheckpointError::Checksum { stored, computed });
    }
    let header: CheckpointHeader = serde_json::from_slice(&body[12..12 + hlen])
        .map_err(|e| CheckpointError::Header(e.to_string()))?;
    if header.version != CHECKPOINT_VERSION {
        return Err(CheckpointError::UnsupportedVersion {
            found: header.version,
            supported: CHECKPOINT_VERSION,
        });
    }
    Ok((header, &body[12 + hlen..]))
}

pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<Params<T>, NetworkError> {
    let (header, payload) = split(bytes)?;
    if header.scalar != T::WIDTH {
        return Err(CheckpointError::WidthMismatch {
            found: header.scalar,
            expected: T::WIDTH,
        }
        .into());
    }
    let layout = header.arch.layout();
    let declared: Vec<_> = header
        .tensors
        .iter()
        .map(|e| (e.name.clone(), e.shape.clone()))
        .collect();
    if declared != layout {
        return Err(
            CheckpointError::Header("tensor table does not match the architecture".into()).into(),
        );
    }
    let width = T::WIDTH.bytes();
    let total: usize = layout
        .iter()
        .map(|(_, s)| s.iter().product::<usize>())
        .sum();
    if payload.len() != total * width {
        return Err(CheckpointError::Truncated {
            needed: total * width,
            available: payload.len(),
        }
        .into());
    }
    let mut offset = 0;
    let mut tensors = Vec::with_capacity(layout.len());
    for (_, shape) in layout {
        let n: usize = shape.iter().product();
        let data = payload[offset..offset + n * width]
            .chunks_exact(width)
            .map(T::read_le)
            .collect();
        offset += n * width;
        tensors.push(Tensor::new(shape, data)?);
    }
    Params::from_tensors(header.arch, tensors, header.seed)
}

fn read_bytes(path: &Path) -> Result<Vec<u8>, CheckpointError> {
    fs::read(path).map_err(|e| match e.kind() {
        io::ErrorKind::NotFound => CheckpointError::NotFound(path.to_path_buf()),
        _ => CheckpointError::Io {
            path: path.to_path_buf(),
            source: e,
        },
    })
}

/// Header of a checkpoint file, after framing and checksum validation.
pub fn read_header(path: &Path) -> Result<CheckpointHeader, CheckpointError> {
    let bytes = read_bytes(path)?;
    split(&bytes).map(|(h, _)| h)
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Params<T>, NetworkError> {
    decode_checkpoint(&read_bytes(path)?)
}

pub fn save_checkpoint<T: Scalar>(params: &Params<T>, path: &Path) -> Result<(), NetworkError> {
    fs::write(path, encode_checkpoint(params)).map_err(|e| {
        CheckpointError::Io {
            path: path.to_path_buf(),
            source: e,
        }
        .into()
    })
}
