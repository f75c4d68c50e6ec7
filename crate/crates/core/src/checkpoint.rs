//! Checkpoint archive: a JSON header followed by raw little-endian f32 blobs.
//!
//! Layout: 8-byte magic, u64 header length, UTF-8 JSON header, then the
//! concatenated tensor data. The header records every tensor's name, kind
//! (weight / buffer / optimizer moment), shape and blob offset, plus the
//! model config snapshot, epoch counter and optimizer step. Values are
//! quantized to f32 on disk; a saved-then-loaded archive re-saves to
//! identical bytes.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};
use ndarray::IxDyn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::nn::ParamSet;
use crate::math::{Adam, Arr};
use crate::model::{ModelConfig, ModelParams, GROUPS};

const MAGIC: &[u8; 8] = b"TRIFLDv1";

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    kind: String, // "weight" | "buffer" | "opt_m" | "opt_v"
    shape: Vec<usize>,
    offset: u64,
    len: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    epoch: u64,
    config: ModelConfig,
    opt_step: Option<u64>,
    tensors: Vec<TensorEntry>,
}

pub struct Checkpoint {
    pub params: ModelParams,
    pub optimizer: Option<Adam>,
    pub epoch: u64,
}

fn push_tensor(
    tensors: &mut Vec<TensorEntry>,
    blob: &mut Vec<u8>,
    name: &str,
    kind: &str,
    arr: &Arr,
) {
    let offset = blob.len() as u64;
    let mut bytes = vec![0u8; arr.len() * 4];
    for (i, &v) in arr.iter().enumerate() {
        LittleEndian::write_f32(&mut bytes[i * 4..i * 4 + 4], v as f32);
    }
    blob.extend_from_slice(&bytes);
    tensors.push(TensorEntry {
        name: name.to_string(),
        kind: kind.to_string(),
        shape: arr.shape().to_vec(),
        offset,
        len: arr.len() as u64,
    });
}

pub fn save_checkpoint(
    path: &Path,
    params: &ModelParams,
    optimizer: Option<&Adam>,
    epoch: u64,
) -> Result<()> {
    let mut tensors = Vec::new();
    let mut blob = Vec::new();
    for (name, arr) in &params.weights.map {
        push_tensor(&mut tensors, &mut blob, name, "weight", arr);
    }
    for (name, arr) in &params.buffers.map {
        push_tensor(&mut tensors, &mut blob, name, "buffer", arr);
    }
    if let Some(opt) = optimizer {
        for (name, arr) in &opt.m {
            push_tensor(&mut tensors, &mut blob, name, "opt_m", arr);
        }
        for (name, arr) in &opt.v {
            push_tensor(&mut tensors, &mut blob, name, "opt_v", arr);
        }
    }
    let header = Header {
        version: 1,
        epoch,
        config: params.config,
        opt_step: optimizer.map(|o| o.t),
        tensors,
    };
    let header_json = serde_json::to_vec(&header).expect("header serialize");
    let mut out = Vec::with_capacity(16 + header_json.len() + blob.len());
    out.extend_from_slice(MAGIC);
    let mut len8 = [0u8; 8];
    LittleEndian::write_u64(&mut len8, header_json.len() as u64);
    out.extend_from_slice(&len8);
    out.extend_from_slice(&header_json);
    out.extend_from_slice(&blob);
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

fn read_tensor(blob: &[u8], entry: &TensorEntry) -> Result<Arr> {
    let start = entry.offset as usize;
    let end = start + entry.len as usize * 4;
    if end > blob.len() {
        return Err(Error::Checkpoint(format!(
            "truncated blob for tensor `{}`",
            entry.name
        )));
    }
    let numel: usize = entry.shape.iter().product();
    if numel != entry.len as usize {
        return Err(Error::Checkpoint(format!(
            "tensor `{}` shape/length mismatch",
            entry.name
        )));
    }
    let mut data = Vec::with_capacity(entry.len as usize);
    for i in 0..entry.len as usize {
        data.push(LittleEndian::read_f32(&blob[start + i * 4..start + i * 4 + 4]) as f64);
    }
    Arr::from_shape_vec(IxDyn(&entry.shape), data)
        .map_err(|e| Error::Checkpoint(format!("tensor `{}`: {e}", entry.name)))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (header, blob) = parse_container(&bytes, path)?;
    let mut weights = ParamSet::new();
    let mut buffers = ParamSet::new();
    let mut m = BTreeMap::new();
    let mut v = BTreeMap::new();
    for entry in &header.tensors {
        let arr = read_tensor(blob, entry)?;
        match entry.kind.as_str() {
            "weight" => weights.insert(entry.name.clone(), arr),
            "buffer" => buffers.insert(entry.name.clone(), arr),
            "opt_m" => {
                m.insert(entry.name.clone(), arr);
            }
            "opt_v" => {
                v.insert(entry.name.clone(), arr);
            }
            other => {
                return Err(Error::Checkpoint(format!(
                    "unknown tensor kind `{other}` for `{}`",
                    entry.name
                )))
            }
        }
    }
    for group in GROUPS {
        if !weights.map.keys().any(|k| k.starts_with(group)) {
            return Err(Error::Checkpoint(format!(
                "checkpoint is missing parameter group `{group}`"
            )));
        }
    }
    let optimizer = header.opt_step.map(|t| {
        let mut opt = Adam::new();
        opt.t = t;
        opt.m = m;
        opt.v = v;
        opt
    });
    Ok(Checkpoint {
        params: ModelParams {
            config: header.config,
            weights,
            buffers,
        },
        optimizer,
        epoch: header.epoch,
    })
}

fn parse_container<'a>(bytes: &'a [u8], path: &Path) -> Result<(Header, &'a [u8])> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint(format!(
            "`{}` is not a checkpoint archive",
            path.display()
        )));
    }
    let header_len = LittleEndian::read_u64(&bytes[8..16]) as usize;
    if 16 + header_len > bytes.len() {
        return Err(Error::Checkpoint("truncated header".into()));
    }
    let header: Header = serde_json::from_slice(&bytes[16..16 + header_len])
        .map_err(|e| Error::Checkpoint(format!("header parse error: {e}")))?;
    if header.version != 1 {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {}",
            header.version
        )));
    }
    Ok((header, &bytes[16 + header_len..]))
}

/// Save a bare named tensor set (pretrained encoder or perceptual weights)
/// in the same container format.
pub fn save_paramset(path: &Path, set: &ParamSet) -> Result<()> {
    let mut tensors = Vec::new();
    let mut blob = Vec::new();
    for (name, arr) in &set.map {
        push_tensor(&mut tensors, &mut blob, name, "weight", arr);
    }
    let header = Header {
        version: 1,
        epoch: 0,
        config: ModelConfig::default(),
        opt_step: None,
        tensors,
    };
    let header_json = serde_json::to_vec(&header).expect("header serialize");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let mut len8 = [0u8; 8];
    LittleEndian::write_u64(&mut len8, header_json.len() as u64);
    out.extend_from_slice(&len8);
    out.extend_from_slice(&header_json);
    out.extend_from_slice(&blob);
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_paramset(path: &Path) -> Result<ParamSet> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (header, blob) = parse_container(&bytes, path)?;
    let mut set = ParamSet::new();
    for entry in &header.tensors {
        set.insert(entry.name.clone(), read_tensor(blob, entry)?);
    }
    Ok(set)
}
