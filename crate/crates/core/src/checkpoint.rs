//! Model checkpoints: `RUNET1\n`, a little-endian `u32` header length, a JSON
//! header, then every tensor as little-endian `f32` in header order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Arch, ModelGraph, ModelOptions};
use crate::tensor::Shape;

pub const MAGIC: &[u8; 7] = b"RUNET1\n";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 4],
    pub dtype: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub arch: Arch,
    pub base_filters: usize,
    pub options: ModelOptions,
    pub tensors: Vec<TensorEntry>,
}

pub fn header(model: &ModelGraph<f32>) -> Header {
    Header {
        arch: model.arch(),
        base_filters: model.options().base_filters,
        options: *model.options(),
        tensors: model
            .params()
            .iter()
            .map(|(_, p)| TensorEntry { name: p.name.clone(), shape: p.value.shape().dims(), dtype: "f32".into() })
            .collect(),
    }
}

pub fn to_bytes(model: &ModelGraph<f32>) -> Vec<u8> {
    let json = serde_json::to_vec(&header(model)).expect("header serializes");
    let payload: usize = model.params().iter().map(|(_, p)| p.value.numel() * 4).sum();
    let mut out = Vec::with_capacity(MAGIC.len() + 4 + json.len() + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, p) in model.params().iter() {
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn parse_err(msg: impl Into<String>) -> Error {
    Error::Parse(format!("checkpoint: {}", msg.into()))
}

/// Rebuilds the model named by the header and restores every tensor.
pub fn from_bytes(bytes: &[u8]) -> Result<ModelGraph<f32>> {
    let rest = bytes.strip_prefix(MAGIC.as_slice()).ok_or_else(|| parse_err("bad magic"))?;
    if rest.len() < 4 {
        return Err(parse_err("truncated header length"));
    }
    let len = u32::from_le_bytes(rest[..4].try_into().expect("4 bytes")) as usize;
    let rest = &rest[4..];
    if rest.len() < len {
        return Err(parse_err(format!("header length {len} exceeds file")));
    }
    let header: Header =
        serde_json::from_slice(&rest[..len]).map_err(|e| parse_err(format!("invalid header: {e}")))?;
    if header.base_filters != header.options.base_filters {
        return Err(parse_err("base_filters disagrees with options"));
    }
    let mut model = ModelGraph::<f32>::build(header.arch, header.options)?;
    let expected = self::header(&model).tensors;
    if expected.len() != header.tensors.len() {
        return Err(parse_err(format!(
            "{} tensors listed, {} needs {}",
            header.tensors.len(),
            header.arch,
            expected.len()
        )));
    }
    for (want, got) in expected.iter().zip(&header.tensors) {
        if want != got {
            return Err(parse_err(format!("tensor {:?} {:?} does not match {:?} {:?}", got.name, got.shape, want.name, want.shape)));
        }
    }
    let mut payload = &rest[len..];
    let ids: Vec<_> = model.params().iter().map(|(id, _)| id).collect();
    for (id, entry) in ids.into_iter().zip(&header.tensors) {
        let n = Shape::from(entry.shape).numel();
        if payload.len() < n * 4 {
            return Err(parse_err(format!("payload truncated in {:?}", entry.name)));
        }
        let (chunk, tail) = payload.split_at(n * 4);
        for (dst, src) in model.params_mut().value_mut(id).data_mut().iter_mut().zip(chunk.chunks_exact(4)) {
            *dst = f32::from_le_bytes(src.try_into().expect("4 bytes"));
        }
        payload = tail;
    }
    if !payload.is_empty() {
        return Err(parse_err(format!("{} trailing bytes", payload.len())));
    }
    Ok(model)
}

pub fn save(path: &Path, model: &ModelGraph<f32>) -> Result<()> {
    std::fs::write(path, to_bytes(model))
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

pub fn load(path: &Path) -> Result<ModelGraph<f32>> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    from_bytes(&bytes)
}
