//! Binary checkpoints: magic, a JSON header, then raw little-endian `f64` sections.
//!
//! Layout: `b"M2MC"`, `u32` version, `u64` header length, header JSON, payload.
//! The header carries the model config, the training step and a section
//! table (name, shape, byte offset into the payload). Adam moments are stored
//! as extra sections so training can resume exactly.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::adam::AdamState;
use super::model::{ModelConfig, ModelParams};
use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::measures::write_atomic;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"M2MC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Section {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub step: u64,
    pub sections: Vec<Section>,
    pub has_optimizer: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub step: u64,
    pub optimizer: Option<AdamState>,
}

pub fn encode_checkpoint(params: &ModelParams, step: u64, optimizer: Option<&AdamState>) -> Result<Vec<u8>> {
    let mut sections = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    let mut push = |name: String, a: &Array2<f64>| {
        sections.push(Section {
            name,
            rows: a.nrows(),
            cols: a.ncols(),
            offset: payload.len(),
        });
        for v in a.iter() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    };
    for p in params.store().iter() {
        push(p.name.clone(), &p.value);
    }
    if let Some(opt) = optimizer {
        if !opt.matches(params.store()) {
            return Err(Error::DimensionMismatch("optimizer state does not match parameters".into()));
        }
        for (p, m) in params.store().iter().zip(&opt.m) {
            push(format!("adam.m.{}", p.name), m);
        }
        for (p, v) in params.store().iter().zip(&opt.v) {
            push(format!("adam.v.{}", p.name), v);
        }
    }
    let header = CheckpointHeader {
        model: params.config().clone(),
        step,
        sections,
        has_optimizer: optimizer.is_some(),
    };
    let header_json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + header_json.len() + payload.len());
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 16 {
        return Err(Error::Truncated {
            expected: 16,
            found: bytes.len(),
        });
    }
    if bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = &bytes[16..];
    if body.len() < hlen {
        return Err(Error::Truncated {
            expected: 16 + hlen,
            found: bytes.len(),
        });
    }
    let header: CheckpointHeader = serde_json::from_slice(&body[..hlen])?;
    let payload = &body[hlen..];
    let mut tensors = Vec::with_capacity(header.sections.len());
    for s in &header.sections {
        let n = s.rows * s.cols;
        let end = s.offset + 8 * n;
        if end > payload.len() {
            return Err(Error::Truncated {
                expected: 16 + hlen + end,
                found: bytes.len(),
            });
        }
        let values: Vec<f64> = payload[s.offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("checkpoint section {}", s.name)));
        }
        let a = Array2::from_shape_vec((s.rows, s.cols), values)
            .map_err(|e| Error::Format(e.to_string()))?;
        tensors.push((s.name.clone(), a));
    }
    let fresh = ModelParams::init(header.model.clone())?;
    let count = fresh.store().len();
    let expected = if header.has_optimizer { 3 * count } else { count };
    if tensors.len() != expected {
        return Err(Error::Format(format!(
            "expected {expected} sections, found {}",
            tensors.len()
        )));
    }
    let mut rest = tensors.into_iter();
    let mut store = ParamStore::default();
    for (name, value) in rest.by_ref().take(count) {
        store.add(name, value);
    }
    let params = ModelParams::from_store(header.model, store)?;
    let optimizer = if header.has_optimizer {
        let m: Vec<Array2<f64>> = rest.by_ref().take(count).map(|(_, a)| a).collect();
        let v: Vec<Array2<f64>> = rest.map(|(_, a)| a).collect();
        let state = AdamState {
            m,
            v,
            step: header.step,
        };
        if !state.matches(params.store()) {
            return Err(Error::Format("optimizer sections do not match parameters".into()));
        }
        Some(state)
    } else {
        None
    };
    Ok(Checkpoint {
        params,
        step: header.step,
        optimizer,
    })
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    params: &ModelParams,
    step: u64,
    optimizer: Option<&AdamState>,
) -> Result<()> {
    write_atomic(path.as_ref(), &encode_checkpoint(params, step, optimizer)?)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
