//! Model checkpoints.
//!
//! Layout (little-endian):
//!
//! ```text
//! "DTCK"  u16 version  u32 header-length  header (UTF-8 JSON)
//! per tensor:  u16 name-length  name  u8 rank  u32 x rank dims  f64 x product(dims)
//! ```
//!
//! The header carries the model configuration, the label set, the tensor
//! count and free-form metadata (resource paths and digests). Tensors appear
//! in [`ModelParams::tensors`] order, and fixed CRF entries are stored as
//! negative infinity.

use std::fs;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::LabelSet;
use crate::network::{Model, ModelConfig, ModelParams, NetworkError};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DTCK";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("bad checkpoint: {0}")]
    Format(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ModelConfig,
    labels: LabelSet,
    tensors: usize,
    #[serde(default)]
    meta: serde_json::Value,
}

/// A model plus the metadata stored next to it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn new(model: Model) -> Self {
        Checkpoint {
            model,
            meta: serde_json::Value::Null,
        }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), CheckpointError> {
        let fmt = |e: io::Error| CheckpointError::Format(e.to_string());
        let tensors = self.model.params.tensors();
        let header = Header {
            config: self.model.config.clone(),
            labels: self.model.labels.clone(),
            tensors: tensors.len(),
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| CheckpointError::Format(e.to_string()))?;
        w.write_all(CHECKPOINT_MAGIC).map_err(fmt)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(fmt)?;
        w.write_all(&(json.len() as u32).to_le_bytes()).map_err(fmt)?;
        w.write_all(&json).map_err(fmt)?;
        for (name, shape, values) in tensors {
            w.write_all(&(name.len() as u16).to_le_bytes()).map_err(fmt)?;
            w.write_all(name.as_bytes()).map_err(fmt)?;
            w.write_all(&[shape.len() as u8]).map_err(fmt)?;
            for d in &shape {
                w.write_all(&(*d as u32).to_le_bytes()).map_err(fmt)?;
            }
            for v in values {
                w.write_all(&v.to_le_bytes()).map_err(fmt)?;
            }
        }
        w.flush().map_err(fmt)
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, CheckpointError> {
        let magic: [u8; 4] = read_array(&mut r, "magic")?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(CheckpointError::Format("not a checkpoint file".into()));
        }
        let version = u16::from_le_bytes(read_array(&mut r, "version")?);
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Format(format!("unsupported version {version}")));
        }
        let len = u32::from_le_bytes(read_array(&mut r, "header length")?) as usize;
        let mut json = vec![0u8; len];
        read_exact(&mut r, &mut json, "header")?;
        let header: Header =
            serde_json::from_slice(&json).map_err(|e| CheckpointError::Format(format!("header: {e}")))?;
        header.config.validate()?;

        let mut params = ModelParams::zeros(&header.config);
        let expected: Vec<(String, Vec<usize>)> =
            params.tensors().into_iter().map(|(n, s, _)| (n, s)).collect();
        if expected.len() != header.tensors {
            return Err(CheckpointError::Format(format!(
                "header lists {} tensors, configuration implies {}",
                header.tensors,
                expected.len()
            )));
        }
        for ((name, shape), (_, _, dest)) in expected.into_iter().zip(params.tensors_mut()) {
            let name_len = u16::from_le_bytes(read_array(&mut r, "tensor name length")?) as usize;
            let mut raw = vec![0u8; name_len];
            read_exact(&mut r, &mut raw, "tensor name")?;
            if raw != name.as_bytes() {
                return Err(CheckpointError::Format(format!(
                    "expected tensor `{name}`, found `{}`",
                    String::from_utf8_lossy(&raw)
                )));
            }
            let [rank] = read_array::<_, 1>(&mut r, "tensor rank")?;
            let mut dims = Vec::with_capacity(rank as usize);
            for _ in 0..rank {
                dims.push(u32::from_le_bytes(read_array(&mut r, "tensor shape")?) as usize);
            }
            if dims != shape {
                return Err(CheckpointError::Format(format!("tensor `{name}` has shape {dims:?}, expected {shape:?}")));
            }
            for v in dest.iter_mut() {
                *v = f64::from_le_bytes(read_array(&mut r, "tensor values")?);
            }
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest).map_err(|e| CheckpointError::Format(e.to_string()))? != 0 {
            return Err(CheckpointError::Format("trailing bytes after last tensor".into()));
        }
        let model = Model::new(header.config, header.labels, params)?;
        Ok(Checkpoint { model, meta: header.meta })
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<(), CheckpointError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => CheckpointError::Format(format!("truncated while reading {what}")),
        _ => CheckpointError::Format(e.to_string()),
    })
}

fn read_array<R: Read, const N: usize>(r: &mut R, what: &str) -> Result<[u8; N], CheckpointError> {
    let mut buf = [0u8; N];
    read_exact(r, &mut buf, what)?;
    Ok(buf)
}

pub fn save(checkpoint: &Checkpoint, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    checkpoint.write_to(BufWriter::new(file))
}

pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint, CheckpointError> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Checkpoint::read_from(BufReader::new(file))
}
