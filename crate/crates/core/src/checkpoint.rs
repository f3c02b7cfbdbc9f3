//! Binary checkpoint: magic, version, JSON header, raw little-endian f32 payload and a
//! trailing SHA-256 of everything before it.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{ModelConfig, ModelError, Network};
use crate::nn::Module;
use crate::training::optim::{AdamW, AdamWConfig};

pub const MAGIC: &[u8; 8] = b"SUBSEGCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint format version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint is truncated or corrupted: {0}")]
    Corrupt(String),
    #[error("checkpoint model config differs from the requested one")]
    ConfigMismatch { expected: Box<ModelConfig>, found: Box<ModelConfig> },
    #[error("checkpoint label table fingerprint {found} differs from {expected}")]
    LabelTableMismatch { expected: String, found: String },
    #[error("checkpoint tensor {0}: {1}")]
    Tensor(String, String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct OptimizerHeader {
    config: AdamWConfig,
    t: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    model: ModelConfig,
    label_fingerprint: String,
    step: u64,
    best_val_dsc: Option<f64>,
    optimizer: Option<OptimizerHeader>,
    tensors: Vec<TensorEntry>,
}

/// A loaded checkpoint.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub network: Network,
    pub optimizer: Option<AdamW>,
    pub label_fingerprint: String,
    pub step: u64,
    pub best_val_dsc: Option<f64>,
}

/// What `load` checks the file against.
#[derive(Clone, Debug, Default)]
pub struct LoadOptions<'a> {
    pub expected_config: Option<&'a ModelConfig>,
    pub expected_fingerprint: Option<&'a str>,
    /// Load despite config / label table mismatches.
    pub force: bool,
}

pub fn to_bytes(ckpt: &Checkpoint) -> Vec<u8> {
    let mut tensors = Vec::new();
    let mut payload: Vec<f32> = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, data: &[f32]| {
        tensors.push(TensorEntry { name, shape, offset: payload.len() });
        payload.extend_from_slice(data);
    };
    ckpt.network.visit("", &mut |name, p| push(name.to_string(), p.shape.clone(), &p.value));
    if let Some(opt) = &ckpt.optimizer {
        let mut shapes = Vec::new();
        ckpt.network.visit("", &mut |name, p| shapes.push((name.to_string(), p.shape.clone())));
        for ((name, shape), m) in shapes.iter().zip(&opt.m) {
            push(format!("optim.m.{name}"), shape.clone(), m);
        }
        for ((name, shape), v) in shapes.iter().zip(&opt.v) {
            push(format!("optim.v.{name}"), shape.clone(), v);
        }
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        model: ckpt.network.config().clone(),
        label_fingerprint: ckpt.label_fingerprint.clone(),
        step: ckpt.step,
        best_val_dsc: ckpt.best_val_dsc,
        optimizer: ckpt.optimizer.as_ref().map(|o| OptimizerHeader { config: o.config.clone(), t: o.t }),
        tensors,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(8 + 4 + 8 + json.len() + payload.len() * 4 + 32);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

pub fn from_bytes(bytes: &[u8], opts: &LoadOptions) -> Result<Checkpoint> {
    if bytes.len() < 8 || &bytes[..8] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    if bytes.len() < 8 + 4 + 8 + 32 {
        return Err(CheckpointError::Corrupt("file too short".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(CheckpointError::Corrupt("checksum mismatch".into()));
    }
    let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let hlen = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
    let json = body.get(20..20 + hlen).ok_or_else(|| CheckpointError::Corrupt("header length".into()))?;
    let header: Header = serde_json::from_slice(json).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    let raw = &body[20 + hlen..];
    if raw.len() % 4 != 0 {
        return Err(CheckpointError::Corrupt("payload is not whole f32 values".into()));
    }
    let payload: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();

    if let Some(expected) = opts.expected_config {
        if *expected != header.model && !opts.force {
            return Err(CheckpointError::ConfigMismatch {
                expected: Box::new(expected.clone()),
                found: Box::new(header.model.clone()),
            });
        }
    }
    if let Some(expected) = opts.expected_fingerprint {
        if expected != header.label_fingerprint && !opts.force {
            return Err(CheckpointError::LabelTableMismatch {
                expected: expected.to_string(),
                found: header.label_fingerprint.clone(),
            });
        }
    }

    let lookup = |name: &str, shape: &[usize]| -> Result<&[f32]> {
        let e = header
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| CheckpointError::Tensor(name.into(), "missing".into()))?;
        if e.shape != shape {
            return Err(CheckpointError::Tensor(name.into(), format!("shape {:?}, expected {:?}", e.shape, shape)));
        }
        let n: usize = shape.iter().product();
        payload
            .get(e.offset..e.offset + n)
            .ok_or_else(|| CheckpointError::Tensor(name.into(), "payload out of range".into()))
    };

    let mut network = Network::new(header.model.clone(), 0)?;
    let mut failure = None;
    network.visit_mut("", &mut |name, p| {
        if failure.is_none() {
            match lookup(name, &p.shape) {
                Ok(data) => p.value.copy_from_slice(data),
                Err(e) => failure = Some(e),
            }
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    let optimizer = match &header.optimizer {
        None => None,
        Some(oh) => {
            let mut opt = AdamW::new(oh.config.clone(), &network);
            opt.t = oh.t;
            let mut params = Vec::new();
            network.visit("", &mut |name, p| params.push((name.to_string(), p.shape.clone())));
            for (i, (name, shape)) in params.iter().enumerate() {
                opt.m[i].copy_from_slice(lookup(&format!("optim.m.{name}"), shape)?);
                opt.v[i].copy_from_slice(lookup(&format!("optim.v.{name}"), shape)?);
            }
            Some(opt)
        }
    };
    Ok(Checkpoint {
        network,
        optimizer,
        label_fingerprint: header.label_fingerprint,
        step: header.step,
        best_val_dsc: header.best_val_dsc,
    })
}

/// Writes through a sibling temp file so a crash never leaves a half-written checkpoint.
pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let io = |e| CheckpointError::Io { path: path.display().to_string(), source: e };
    let tmp = path.with_extension("ckpt.tmp");
    fs::write(&tmp, to_bytes(ckpt)).map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

pub fn load(path: &Path, opts: &LoadOptions) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| CheckpointError::Io { path: path.display().to_string(), source: e })?;
    from_bytes(&bytes, opts)
}
