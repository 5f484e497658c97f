//! Length-prefixed, checksummed record streams.
//!
//! Each record is `len: u64 LE`, `masked_crc32c(len bytes): u32 LE`,
//! `payload`, `masked_crc32c(payload): u32 LE`.

use thiserror::Error;

use super::crc32c::masked_crc32c;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CrcField {
    Length,
    Payload,
}

impl std::fmt::Display for CrcField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CrcField::Length => "length",
            CrcField::Payload => "payload",
        })
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum RecordError {
    #[error("record {record}: {field} CRC mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    Crc { record: usize, field: CrcField, stored: u32, computed: u32 },
    #[error("record {record}: truncated at byte offset {offset} (needed {needed} more bytes)")]
    Truncated { record: usize, offset: usize, needed: usize },
}

pub fn write_record_stream<P: AsRef<[u8]>>(payloads: &[P]) -> Vec<u8> {
    let total: usize = payloads.iter().map(|p| p.as_ref().len() + 16).sum();
    let mut out = Vec::with_capacity(total);
    for p in payloads {
        append_record(&mut out, p.as_ref());
    }
    out
}

pub fn append_record(out: &mut Vec<u8>, payload: &[u8]) {
    let len = (payload.len() as u64).to_le_bytes();
    out.extend_from_slice(&len);
    out.extend_from_slice(&masked_crc32c(&len).to_le_bytes());
    out.extend_from_slice(payload);
    out.extend_from_slice(&masked_crc32c(payload).to_le_bytes());
}

/// Iterates payloads of a record stream, verifying both checksums per record.
pub struct RecordReader<'a> {
    buf: &'a [u8],
    pos: usize,
    index: usize,
    failed: bool,
}

impl<'a> RecordReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0, index: 0, failed: false }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], RecordError> {
        let left = self.buf.len() - self.pos;
        if left < n {
            return Err(RecordError::Truncated { record: self.index, offset: self.pos, needed: n - left });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn crc(&mut self, field: CrcField, data: &[u8]) -> Result<(), RecordError> {
        let stored = u32::from_le_bytes(self.take(4)?.try_into().unwrap());
        let computed = masked_crc32c(data);
        if stored != computed {
            return Err(RecordError::Crc { record: self.index, field, stored, computed });
        }
        Ok(())
    }

    fn read_one(&mut self) -> Result<&'a [u8], RecordError> {
        let len_bytes = self.take(8)?;
        self.crc(CrcField::Length, len_bytes)?;
        let len = u64::from_le_bytes(len_bytes.try_into().unwrap());
        let len = usize::try_from(len).unwrap_or(usize::MAX);
        let payload = self.take(len)?;
        self.crc(CrcField::Payload, payload)?;
        self.index += 1;
        Ok(payload)
    }
}

impl<'a> Iterator for RecordReader<'a> {
    type Item = Result<&'a [u8], RecordError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed || self.pos == self.buf.len() {
            return None;
        }
        let r = self.read_one();
        self.failed = r.is_err();
        Some(r)
    }
}

pub fn parse_record_stream(bytes: &[u8]) -> Result<Vec<Vec<u8>>, RecordError> {
    RecordReader::new(bytes).map(|r| r.map(<[u8]>::to_vec)).collect()
}
