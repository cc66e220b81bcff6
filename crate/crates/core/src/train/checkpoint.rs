//! Versioned binary checkpoint for [`ToyModel`].
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic        8 bytes  "MSEGCKPT"
//! version      u32      currently 1
//! step         u64      optimiser steps taken
//! config_len   u32
//! config       config_len bytes of JSON (ModelConfig)
//! n_blocks     u32
//! per block:
//!   name_len   u16, then name_len bytes of UTF-8
//!   group      u8       0 = backbone, 1 = head
//!   rank       u8, then rank × u64 dims
//!   data       prod(dims) × f64
//! ```

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::model::{block_group, ModelConfig, Params, ToyModel, BLOCK_NAMES};
use super::schedule::ParamGroup;

pub const MAGIC: &[u8; 8] = b"MSEGCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

fn bad(msg: impl Into<String>) -> Error {
    Error::invalid(format!("checkpoint: {}", msg.into()))
}

pub fn encode(model: &ToyModel, step: u64) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&step.to_le_bytes());
    let cfg = serde_json::to_vec(&model.config)?;
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(&cfg);
    out.extend_from_slice(&(BLOCK_NAMES.len() as u32).to_le_bytes());
    for (name, t) in BLOCK_NAMES.iter().zip(model.params.blocks()) {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(match block_group(name) {
            ParamGroup::Backbone => 0,
            ParamGroup::Head => 1,
        });
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a>(&'a [u8]);

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.0.len() < n {
            return Err(bad("truncated"));
        }
        let (head, rest) = self.0.split_at(n);
        self.0 = rest;
        Ok(head)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
}

/// Returns the model and its step count.
pub fn decode(bytes: &[u8]) -> Result<(ToyModel, u64)> {
    let mut c = Cursor(bytes);
    if c.take(8)? != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u32::from_le_bytes(c.array()?);
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let step = u64::from_le_bytes(c.array()?);
    let cfg_len = u32::from_le_bytes(c.array()?) as usize;
    let config: ModelConfig = serde_json::from_slice(c.take(cfg_len)?)?;
    config.validate()?;
    let n_blocks = u32::from_le_bytes(c.array()?) as usize;
    if n_blocks != BLOCK_NAMES.len() {
        return Err(bad(format!(
            "expected {} blocks, found {n_blocks}",
            BLOCK_NAMES.len()
        )));
    }
    let mut params = Params::zeros(&config);
    for (expected, slot) in BLOCK_NAMES.iter().zip(params.blocks_mut()) {
        let name_len = u16::from_le_bytes(c.array()?) as usize;
        let name =
            std::str::from_utf8(c.take(name_len)?).map_err(|_| bad("block name not UTF-8"))?;
        if name != *expected {
            return Err(bad(format!("expected block {expected}, found {name}")));
        }
        let group = c.array::<1>()?[0];
        let want_group = u8::from(block_group(name) == ParamGroup::Head);
        if group != want_group {
            return Err(bad(format!("{name}: wrong group tag {group}")));
        }
        let rank = c.array::<1>()?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(c.array()?) as usize);
        }
        if shape != slot.shape() {
            return Err(bad(format!(
                "{name}: shape {shape:?} vs config {:?}",
                slot.shape()
            )));
        }
        let mut data = Vec::with_capacity(slot.len());
        for _ in 0..slot.len() {
            data.push(f64::from_le_bytes(c.array()?));
        }
        *slot = Tensor::new(shape, data)?;
    }
    if !c.0.is_empty() {
        return Err(bad("trailing bytes"));
    }
    Ok((ToyModel::from_params(config, params)?, step))
}

pub fn write(mut w: impl Write, model: &ToyModel, step: u64) -> std::io::Result<()> {
    let bytes = encode(model, step).map_err(std::io::Error::other)?;
    w.write_all(&bytes)
}

pub fn read(mut r: impl Read) -> Result<(ToyModel, u64)> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf).map_err(|e| bad(e.to_string()))?;
    decode(&buf)
}
