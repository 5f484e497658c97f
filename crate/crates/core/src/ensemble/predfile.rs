//! Prediction matrix files.
//!
//! Layout (little-endian): magic `PRED`, version `u32`, rows `u64`, labels
//! `u64`, then row-major `f32` confidences. A text sidecar
//! `<file>.manifest` holds `key=value` provenance lines.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::metrics::PredictionMatrix;

pub const PRED_MAGIC: &[u8; 4] = b"PRED";
pub const PRED_VERSION: u32 = 1;
const HEADER: usize = 24;

#[derive(Debug, Error)]
pub enum PredFileError {
    #[error("bad magic at offset 0")]
    BadMagic,
    #[error("unsupported prediction file version {0} at offset 4")]
    UnsupportedVersion(u32),
    #[error("truncated prediction file: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("{extra} trailing bytes at offset {offset}")]
    TrailingBytes { offset: usize, extra: usize },
    #[error("invalid prediction matrix: {0}")]
    Invalid(String),
    #[error("manifest line {line}: {reason}")]
    Manifest { line: usize, reason: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

pub fn encode_predictions(m: &PredictionMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER + m.values().len() * 4);
    out.extend_from_slice(PRED_MAGIC);
    out.extend_from_slice(&PRED_VERSION.to_le_bytes());
    out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.num_labels() as u64).to_le_bytes());
    for &v in m.values() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_predictions(bytes: &[u8]) -> Result<PredictionMatrix, PredFileError> {
    if bytes.len() < 4 || &bytes[..4] != PRED_MAGIC {
        return Err(PredFileError::BadMagic);
    }
    if bytes.len() < HEADER {
        return Err(PredFileError::Truncated { expected: HEADER, found: bytes.len() });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != PRED_VERSION {
        return Err(PredFileError::UnsupportedVersion(version));
    }
    let rows = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let labels = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
    let expected = rows
        .checked_mul(labels)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(HEADER))
        .ok_or_else(|| PredFileError::Invalid(format!("{rows}x{labels} overflows")))?;
    if bytes.len() < expected {
        return Err(PredFileError::Truncated { expected, found: bytes.len() });
    }
    if bytes.len() > expected {
        return Err(PredFileError::TrailingBytes { offset: expected, extra: bytes.len() - expected });
    }
    let values = bytes[HEADER..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    PredictionMatrix::new(rows, labels, values).map_err(|e| PredFileError::Invalid(e.to_string()))
}

/// Provenance of a prediction file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PredManifest {
    pub model: String,
    pub checkpoint: String,
    pub part: String,
    pub gap: Option<f64>,
}

impl PredManifest {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "model={}", self.model).unwrap();
        writeln!(s, "checkpoint={}", self.checkpoint).unwrap();
        writeln!(s, "part={}", self.part).unwrap();
        if let Some(g) = self.gap {
            writeln!(s, "gap={g:.6}").unwrap();
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self, PredFileError> {
        let mut m = PredManifest::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let bad = |reason: String| PredFileError::Manifest { line: i + 1, reason };
            let (k, v) = line.split_once('=').ok_or_else(|| bad("expected key=value".into()))?;
            match k {
                "model" => m.model = v.to_string(),
                "checkpoint" => m.checkpoint = v.to_string(),
                "part" => m.part = v.to_string(),
                "gap" => m.gap = Some(v.parse().map_err(|_| bad(format!("gap `{v}` is not a number")))?),
                other => return Err(bad(format!("unknown key `{other}`"))),
            }
        }
        Ok(m)
    }
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest");
    PathBuf::from(s)
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> PredFileError + '_ {
    move |source| PredFileError::Io { path: path.to_path_buf(), source }
}

/// Writes the matrix and its sidecar manifest.
pub fn write_predictions(path: &Path, m: &PredictionMatrix, manifest: &PredManifest) -> Result<(), PredFileError> {
    std::fs::write(path, encode_predictions(m)).map_err(io(path))?;
    let mp = manifest_path(path);
    std::fs::write(&mp, manifest.to_text()).map_err(io(&mp))
}

pub fn read_predictions(path: &Path) -> Result<PredictionMatrix, PredFileError> {
    decode_predictions(&std::fs::read(path).map_err(io(path))?)
}

pub fn read_manifest(path: &Path) -> Result<PredManifest, PredFileError> {
    let mp = manifest_path(path);
    PredManifest::parse(&std::fs::read_to_string(&mp).map_err(io(&mp))?)
}
