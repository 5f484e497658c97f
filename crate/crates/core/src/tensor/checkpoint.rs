//! Binary parameter checkpoints.
//!
//! Layout (little-endian): magic `CSTK`, version `u32`, count `u32`, then per
//! parameter: name length `u16`, UTF-8 name, rank `u8`, extents as `u32`,
//! values as `f64`.

use thiserror::Error;

use super::{ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CSTK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum CheckpointError {
    #[error("bad magic at offset 0")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated checkpoint: needed {needed} bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("invalid UTF-8 parameter name at offset {offset}")]
    BadName { offset: usize },
    #[error("invalid shape for `{name}` at offset {offset}")]
    BadShape { name: String, offset: usize },
    #[error("{extra} trailing bytes after last parameter at offset {offset}")]
    TrailingBytes { offset: usize, extra: usize },
    #[error("parameter name `{0}` longer than 65535 bytes")]
    NameTooLong(String),
    #[error("checkpoint parameter mismatch: {0}")]
    Mismatch(String),
}

pub fn encode_checkpoint(params: &ParamStore) -> Result<Vec<u8>, CheckpointError> {
    let mut out = Vec::with_capacity(12 + params.num_scalars() * 8);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        let len = u16::try_from(name.len()).map_err(|_| CheckpointError::NameTooLong(name.to_string()))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.buf.len() - self.pos < n {
            return Err(CheckpointError::Truncated { offset: self.pos, needed: n });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Parses a whole checkpoint; nothing is returned unless every byte checks out.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<ParamStore, CheckpointError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4).map_err(|_| CheckpointError::BadMagic)? != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let count = r.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
        let at = r.pos;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| CheckpointError::BadName { offset: at })?
            .to_string();
        let rank = r.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let shape_at = r.pos;
        let raw = r.take(n.checked_mul(8).ok_or(CheckpointError::BadShape { name: name.clone(), offset: shape_at })?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let t = Tensor::new(shape, data).map_err(|_| CheckpointError::BadShape { name: name.clone(), offset: shape_at })?;
        store.add(name, t);
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::TrailingBytes { offset: r.pos, extra: bytes.len() - r.pos });
    }
    Ok(store)
}
