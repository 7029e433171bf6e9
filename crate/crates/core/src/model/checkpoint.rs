//! Binary checkpoint container.
//!
//! Layout: 8-byte magic, little-endian `u32` format version, little-endian
//! `u64` header length, a JSON header (config echo, tensor directory, step
//! counter, caller metadata), then every tensor as little-endian `f64` in
//! directory order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::OptimizerState;
use super::params::Params;
use super::{ModelConfig, ModelState};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MHLCKPT\0";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub state: ModelState,
    /// Trainer-owned metadata (schedule state, epoch, RNG stream info, ...).
    pub extra: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    group: String,
    name: String,
    shape: Vec<usize>,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    dtype: String,
    config: ModelConfig,
    step: u64,
    tensors: Vec<TensorEntry>,
    extra: serde_json::Value,
}

fn groups(state: &ModelState) -> [(&'static str, &Params); 3] {
    [
        ("params", &state.params),
        ("adam_m", &state.optimizer.m),
        ("adam_v", &state.optimizer.v),
    ]
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut tensors = Vec::new();
    for (group, params) in groups(&ckpt.state) {
        for t in params.tensors() {
            tensors.push(TensorEntry {
                group: group.into(),
                name: t.name,
                shape: t.shape,
                len: t.data.len(),
            });
        }
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        dtype: "f64".into(),
        config: ckpt.state.config.clone(),
        step: ckpt.state.optimizer.step,
        tensors,
        extra: ckpt.extra.clone(),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp).map_err(io)?);
        w.write_all(CHECKPOINT_MAGIC).map_err(io)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io)?;
        w.write_all(&(header_bytes.len() as u64).to_le_bytes()).map_err(io)?;
        w.write_all(&header_bytes).map_err(io)?;
        for (_, params) in groups(&ckpt.state) {
            for t in params.tensors() {
                for v in t.data {
                    w.write_all(&v.to_le_bytes()).map_err(io)?;
                }
            }
        }
        w.flush().map_err(io)?;
    }
    std::fs::rename(&tmp, path).map_err(io)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut buf = Vec::new();
    BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?)
        .read_to_end(&mut buf)
        .map_err(|e| Error::io(path, e))?;
    let bad = |m: String| Error::Checkpoint(format!("{}: {m}", path.display()));
    if buf.len() < 20 || &buf[..8] != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(buf[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(bad(format!("unsupported format version {version}")));
    }
    let hlen = u64::from_le_bytes(buf[12..20].try_into().unwrap()) as usize;
    let body_start = 20 + hlen;
    if buf.len() < body_start {
        return Err(bad("truncated header".into()));
    }
    let header: Header = serde_json::from_slice(&buf[20..body_start])?;
    if header.dtype != "f64" {
        return Err(bad(format!("unsupported dtype {}", header.dtype)));
    }
    header.config.validate()?;

    let cfg = header.config.clone();
    let mut state = ModelState {
        params: Params::zeros(&cfg),
        optimizer: OptimizerState::new(&cfg),
        config: cfg,
    };
    state.optimizer.step = header.step;
    let mut entries = header.tensors.iter();
    let mut offset = body_start;
    let targets: [(&str, &mut Params); 3] = [
        ("params", &mut state.params),
        ("adam_m", &mut state.optimizer.m),
        ("adam_v", &mut state.optimizer.v),
    ];
    for (group, params) in targets {
        for t in params.tensors_mut() {
            let e = entries
                .next()
                .ok_or_else(|| bad("tensor directory too short".into()))?;
            if e.group != group || e.name != t.name || e.len != t.data.len() {
                return Err(bad(format!(
                    "tensor {}/{} ({}) does not match expected {group}/{} ({})",
                    e.group,
                    e.name,
                    e.len,
                    t.name,
                    t.data.len()
                )));
            }
            let end = offset + 8 * e.len;
            if buf.len() < end {
                return Err(bad("truncated tensor data".into()));
            }
            for (dst, chunk) in t.data.iter_mut().zip(buf[offset..end].chunks_exact(8)) {
                *dst = f64::from_le_bytes(chunk.try_into().unwrap());
            }
            offset = end;
        }
    }
    if offset != buf.len() {
        return Err(bad("trailing bytes after tensor data".into()));
    }
    Ok(Checkpoint {
        state,
        extra: header.extra,
    })
}
