//! The protobuf wire-format subset used by example payloads.

use thiserror::Error;

pub const VARINT: u8 = 0;
pub const FIXED64: u8 = 1;
pub const LEN: u8 = 2;
pub const FIXED32: u8 = 5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WireError {
    #[error("truncated message at byte offset {offset}")]
    Truncated { offset: usize },
    #[error("varint longer than 10 bytes at byte offset {offset}")]
    VarintOverflow { offset: usize },
    #[error("field {field}: unsupported wire type {wire_type}")]
    UnsupportedWireType { field: u32, wire_type: u8 },
    #[error("field {field}: expected wire type {expected}, found {found}")]
    WireType { field: u32, expected: u8, found: u8 },
    #[error("field number 0 at byte offset {offset}")]
    ZeroField { offset: usize },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Value<'a> {
    Varint(u64),
    Fixed64(u64),
    Bytes(&'a [u8]),
    Fixed32(u32),
}

impl<'a> Value<'a> {
    pub fn wire_type(&self) -> u8 {
        match self {
            Value::Varint(_) => VARINT,
            Value::Fixed64(_) => FIXED64,
            Value::Bytes(_) => LEN,
            Value::Fixed32(_) => FIXED32,
        }
    }

    pub fn bytes(&self, field: u32) -> Result<&'a [u8], WireError> {
        match *self {
            Value::Bytes(b) => Ok(b),
            other => Err(WireError::WireType { field, expected: LEN, found: other.wire_type() }),
        }
    }
}

/// Sequential field reader. Offsets in errors are relative to the
/// outermost payload when `base` is set to the slice's position in it.
pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    base: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0, base: 0 }
    }

    pub fn nested(buf: &'a [u8], base: usize) -> Self {
        Self { buf, pos: 0, base }
    }

    /// Absolute offset of a sub-slice of this reader's buffer.
    pub fn offset_of(&self, sub: &[u8]) -> usize {
        self.base + (sub.as_ptr() as usize - self.buf.as_ptr() as usize)
    }

    fn varint(&mut self) -> Result<u64, WireError> {
        let start = self.base + self.pos;
        let mut v = 0u64;
        for i in 0..10 {
            let Some(&b) = self.buf.get(self.pos) else {
                return Err(WireError::Truncated { offset: self.base + self.pos });
            };
            self.pos += 1;
            v |= u64::from(b & 0x7f) << (7 * i);
            if b & 0x80 == 0 {
                return Ok(v);
            }
        }
        Err(WireError::VarintOverflow { offset: start })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        if self.buf.len() - self.pos < n {
            return Err(WireError::Truncated { offset: self.base + self.buf.len() });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn read_field(&mut self) -> Result<(u32, Value<'a>), WireError> {
        let at = self.base + self.pos;
        let key = self.varint()?;
        let field = (key >> 3) as u32;
        let wire_type = (key & 7) as u8;
        if field == 0 {
            return Err(WireError::ZeroField { offset: at });
        }
        let value = match wire_type {
            VARINT => Value::Varint(self.varint()?),
            FIXED64 => Value::Fixed64(u64::from_le_bytes(self.take(8)?.try_into().unwrap())),
            LEN => {
                let n = self.varint()?;
                let n = usize::try_from(n).unwrap_or(usize::MAX);
                Value::Bytes(self.take(n)?)
            }
            FIXED32 => Value::Fixed32(u32::from_le_bytes(self.take(4)?.try_into().unwrap())),
            _ => return Err(WireError::UnsupportedWireType { field, wire_type }),
        };
        Ok((field, value))
    }
}

impl<'a> Iterator for Reader<'a> {
    type Item = Result<(u32, Value<'a>), WireError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.buf.len() {
            return None;
        }
        let r = self.read_field();
        if r.is_err() {
            self.pos = self.buf.len();
        }
        Some(r)
    }
}

/// Decodes a packed run of varints.
pub fn packed_varints(buf: &[u8], base: usize) -> Result<Vec<u64>, WireError> {
    let mut r = Reader::nested(buf, base);
    let mut out = Vec::new();
    while r.pos < buf.len() {
        out.push(r.varint()?);
    }
    Ok(out)
}

pub fn packed_f32(buf: &[u8], base: usize) -> Result<Vec<f32>, WireError> {
    if buf.len() % 4 != 0 {
        return Err(WireError::Truncated { offset: base + buf.len() - buf.len() % 4 });
    }
    Ok(buf.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
}

#[derive(Default)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }

    fn raw_varint(&mut self, mut v: u64) {
        while v >= 0x80 {
            self.buf.push((v as u8) | 0x80);
            v >>= 7;
        }
        self.buf.push(v as u8);
    }

    fn key(&mut self, field: u32, wire_type: u8) {
        self.raw_varint((u64::from(field) << 3) | u64::from(wire_type));
    }

    pub fn varint(&mut self, field: u32, v: u64) {
        self.key(field, VARINT);
        self.raw_varint(v);
    }

    pub fn bytes(&mut self, field: u32, b: &[u8]) {
        self.key(field, LEN);
        self.raw_varint(b.len() as u64);
        self.buf.extend_from_slice(b);
    }

    pub fn message(&mut self, field: u32, build: impl FnOnce(&mut Writer)) {
        let mut inner = Writer::new();
        build(&mut inner);
        self.bytes(field, &inner.buf);
    }

    pub fn packed_f32(&mut self, field: u32, values: &[f32]) {
        let mut b = Vec::with_capacity(values.len() * 4);
        for v in values {
            b.extend_from_slice(&v.to_le_bytes());
        }
        self.bytes(field, &b);
    }

    pub fn packed_varints(&mut self, field: u32, values: &[u64]) {
        let mut inner = Writer::new();
        for &v in values {
            inner.raw_varint(v);
        }
        self.bytes(field, &inner.buf);
    }
}
