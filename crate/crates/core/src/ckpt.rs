//! Checkpoint serialization. A checkpoint is a magic header, a format
//! version, a JSON table of contents (model config plus tensor entries), and
//! a little-endian f32 payload. f32 storage makes save → load → save
//! byte-stable, so an evaluation of a reloaded model is exactly reproducible.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::{DetectorModel, ParamKind, TensorMut};
use crate::rng::stream_rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

const MAGIC: &[u8; 8] = b"RGBTDET\0";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Entry {
    name: String,
    kind: String,
    shape: Vec<usize>,
    /// Element offset into the f32 payload.
    offset: usize,
    /// Element count.
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    config_hash: String,
    entries: Vec<Entry>,
}

fn kind_str(kind: ParamKind) -> &'static str {
    match kind {
        ParamKind::Param => "param",
        ParamKind::Buffer => "buffer",
    }
}

/// Serializes every named tensor of `model` to `path`.
pub fn save_model(model: &DetectorModel, path: &Path) -> Result<()> {
    let tensors = model.named_tensors();
    let mut entries = Vec::with_capacity(tensors.len());
    let mut payload: Vec<u8> = Vec::new();
    let mut offset = 0usize;
    for (name, (kind, arr)) in &tensors {
        let len = arr.len();
        entries.push(Entry {
            name: name.clone(),
            kind: kind_str(*kind).to_string(),
            shape: arr.shape().to_vec(),
            offset,
            len,
        });
        for &v in arr.iter() {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
        offset += len;
    }
    let header = Header {
        config: model.cfg.clone(),
        config_hash: model.cfg.config_hash(),
        entries,
    };
    let header_json =
        serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(format!("header encode: {e}")))?;
    let mut bytes = Vec::with_capacity(8 + 4 + 8 + header_json.len() + payload.len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header_json);
    bytes.extend_from_slice(&payload);
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn parse_header(bytes: &[u8], path: &Path) -> Result<(Header, usize)> {
    if bytes.len() < 20 {
        return Err(Error::Checkpoint(format!("{}: truncated file", path.display())));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint(format!("{}: not a checkpoint", path.display())));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("width"));
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported version {version} (expected {VERSION})",
            path.display()
        )));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("width")) as usize;
    let header_end = 20 + header_len;
    if bytes.len() < header_end {
        return Err(Error::Checkpoint(format!("{}: truncated header", path.display())));
    }
    let header: Header = serde_json::from_slice(&bytes[20..header_end])
        .map_err(|e| Error::Checkpoint(format!("{}: header decode: {e}", path.display())))?;
    Ok((header, header_end))
}

/// Reads the model config stored in a checkpoint without loading weights.
pub fn peek_config(path: &Path) -> Result<ModelConfig> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(parse_header(&bytes, path)?.0.config)
}

/// Rebuilds a model from a checkpoint, verifying the config hash and every
/// tensor's name, kind, and shape.
pub fn load_model(path: &Path) -> Result<DetectorModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (header, header_end) = parse_header(&bytes, path)?;
    header.config.validate()?;
    if header.config.config_hash() != header.config_hash {
        return Err(Error::Checkpoint(format!(
            "{}: config hash mismatch",
            path.display()
        )));
    }
    let payload = &bytes[header_end..];
    if payload.len() % 4 != 0 {
        return Err(Error::Checkpoint(format!("{}: ragged payload", path.display())));
    }
    let n_f32 = payload.len() / 4;
    let by_name: BTreeMap<&str, &Entry> =
        header.entries.iter().map(|e| (e.name.as_str(), e)).collect();
    if by_name.len() != header.entries.len() {
        return Err(Error::Checkpoint(format!(
            "{}: duplicate tensor names",
            path.display()
        )));
    }
    let mut model = DetectorModel::init(&header.config, &mut stream_rng(0, "init", 0))?;
    let mut used = 0usize;
    let mut err: Option<Error> = None;
    model.visit_mut(&mut |name, kind, tensor| {
        if err.is_some() {
            return;
        }
        let Some(entry) = by_name.get(name) else {
            err = Some(Error::Checkpoint(format!("missing tensor {name}")));
            return;
        };
        if entry.kind != kind_str(kind) {
            err = Some(Error::Checkpoint(format!(
                "tensor {name}: kind {} stored, {} expected",
                entry.kind,
                kind_str(kind)
            )));
            return;
        }
        let shape: &[usize] = match &tensor {
            TensorMut::A1(a) => a.shape(),
            TensorMut::A2(a) => a.shape(),
            TensorMut::A4(a) => a.shape(),
        };
        if entry.shape != shape || entry.len != shape.iter().product::<usize>() {
            err = Some(Error::Checkpoint(format!(
                "tensor {name}: shape {:?} stored, {shape:?} expected",
                entry.shape
            )));
            return;
        }
        if entry.offset + entry.len > n_f32 {
            err = Some(Error::Checkpoint(format!("tensor {name}: payload overrun")));
            return;
        }
        let read = |i: usize| -> f64 {
            let at = (entry.offset + i) * 4;
            f32::from_le_bytes(payload[at..at + 4].try_into().expect("width")) as f64
        };
        match tensor {
            TensorMut::A1(a) => {
                for (i, v) in a.iter_mut().enumerate() {
                    *v = read(i);
                }
            }
            TensorMut::A2(a) => {
                for (i, v) in a.iter_mut().enumerate() {
                    *v = read(i);
                }
            }
            TensorMut::A4(a) => {
                for (i, v) in a.iter_mut().enumerate() {
                    *v = read(i);
                }
            }
        }
        used += 1;
    });
    if let Some(e) = err {
        return Err(e);
    }
    if used != header.entries.len() {
        return Err(Error::Checkpoint(format!(
            "{}: {} stored tensors, model uses {used}",
            path.display(),
            header.entries.len()
        )));
    }
    Ok(model)
}
