//! Binary checkpoint format.
//!
//! Layout (little endian): magic `VBN1`, `u32` format version, `u32` length
//! of a JSON header holding the config and iteration counter, the header,
//! `u32` tensor count, then per tensor `u32` name length, UTF-8 name,
//! `u32` rank, `u32` dims and `f32` data.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelError, VbNetConfig};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"VBN1";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint truncated")]
    Truncated,
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: VbNetConfig,
    trained_iterations: u64,
}

/// Serialise `model` to `w`.
pub fn write_checkpoint<W: Write>(model: &Model, mut w: W) -> Result<(), CheckpointError> {
    let header = serde_json::to_vec(&Header {
        config: model.config().clone(),
        trained_iterations: model.trained_iterations,
    })
    .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    let mut buf = Vec::with_capacity(model.param_count() * 4 + header.len() + 1024);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    put_u32(&mut buf, header.len());
    buf.extend_from_slice(&header);
    put_u32(&mut buf, model.params().len());
    for (name, t) in model.params() {
        put_u32(&mut buf, name.len());
        buf.extend_from_slice(name.as_bytes());
        put_u32(&mut buf, t.shape().len());
        for &d in t.shape() {
            put_u32(&mut buf, d);
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

fn put_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&(v as u32).to_le_bytes());
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self.bytes.get(self.pos..end).ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize, CheckpointError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

/// Deserialise a model, validating every tensor against the stored config.
pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Model, CheckpointError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut c = Cursor { bytes: &bytes, pos: 0 };
    if bytes.len() < 4 {
        return Err(CheckpointError::Truncated);
    }
    if c.take(4)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = c.u32()? as u32;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Version(version));
    }
    let hlen = c.u32()?;
    let header: Header =
        serde_json::from_slice(c.take(hlen)?).map_err(|e| CheckpointError::Malformed(format!("header: {e}")))?;
    let count = c.u32()?;
    let mut params = BTreeMap::new();
    for _ in 0..count {
        let nlen = c.u32()?;
        let name = std::str::from_utf8(c.take(nlen)?)
            .map_err(|_| CheckpointError::Malformed("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = c.u32()?;
        if rank == 0 || rank > crate::tensor::MAX_RANK {
            return Err(CheckpointError::Malformed(format!("tensor {name} has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u32()?);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| CheckpointError::Malformed(format!("tensor {name} too large")))?;
        let raw = c.take(n.checked_mul(4).ok_or(CheckpointError::Truncated)?)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        if params.insert(name.clone(), t).is_some() {
            return Err(CheckpointError::Malformed(format!("duplicate tensor {name}")));
        }
    }
    if c.pos != bytes.len() {
        return Err(CheckpointError::Malformed("trailing bytes".into()));
    }
    Ok(Model::from_parts(header.config, params, header.trained_iterations)?)
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<(), CheckpointError> {
    let f = std::fs::File::create(path)?;
    write_checkpoint(model, std::io::BufWriter::new(f))
}

pub fn load_checkpoint(path: &Path) -> Result<Model, CheckpointError> {
    read_checkpoint(std::fs::File::open(path)?)
}
