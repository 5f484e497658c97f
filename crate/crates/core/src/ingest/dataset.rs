//! Reading and writing sharded record files, and assembling mini-batches.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::example::{decode_example, encode_example, DecodeError, DecodeOptions, Example, FeatureMode, FrameLevel, Quantization};
use super::record::{append_record, RecordError, RecordReader};
use super::split::{split_files, Part, SplitReport};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Record { path: PathBuf, source: RecordError },
    #[error("{path}: record {record}: {source}")]
    Decode { path: PathBuf, record: usize, source: DecodeError },
    #[error("part {0} has no examples")]
    EmptyPart(Part),
    #[error("{0}")]
    Invalid(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io { path: path.to_path_buf(), source }
}

/// Number of examples exported to each part.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartSizes {
    pub train1: usize,
    pub validate1: usize,
    pub train2: usize,
    pub validate2: usize,
    pub test: usize,
}

impl Default for PartSizes {
    fn default() -> Self {
        Self { train1: 10_000, validate1: 2_000, train2: 2_000, validate2: 2_000, test: 2_000 }
    }
}

impl PartSizes {
    pub fn get(&self, part: Part) -> usize {
        match part {
            Part::Train1 => self.train1,
            Part::Validate1 => self.validate1,
            Part::Train2 => self.train2,
            Part::Validate2 => self.validate2,
            Part::Test => self.test,
        }
    }

    pub fn total(&self) -> usize {
        Part::ALL.iter().map(|&p| self.get(p)).sum()
    }

    /// Contiguous index range of each part within a generated set.
    pub fn ranges(&self) -> Vec<(Part, std::ops::Range<usize>)> {
        let mut start = 0;
        Part::ALL
            .iter()
            .map(|&p| {
                let r = start..start + self.get(p);
                start = r.end;
                (p, r)
            })
            .collect()
    }
}

const SHARD_CHARS: &[u8] = b"0123456789abcdefghijklmnopqrstuvwxyz";
const TRAIN2_LEADS: &[u8] = b"bcdefghijklmnopqrstuvwxyz";

/// Corpus-style shard name for the `index`-th file of a part.
pub fn shard_name(part: Part, index: usize) -> Result<String, DatasetError> {
    let c = |i: usize| SHARD_CHARS[i] as char;
    let n = SHARD_CHARS.len();
    let (prefix, lead, tail) = match part {
        Part::Train1 => ("train", None, index),
        Part::Test => ("test", None, index),
        Part::Validate1 => ("validate", Some(b'a'), index),
        Part::Validate2 => ("validate", Some(b'0' + (index / n % 10) as u8), index % n),
        Part::Train2 => ("validate", Some(TRAIN2_LEADS[index / n % TRAIN2_LEADS.len()]), index % n),
    };
    let capacity = match part {
        Part::Train1 | Part::Test => n * n,
        Part::Validate1 => n,
        Part::Validate2 => 10 * n,
        Part::Train2 => TRAIN2_LEADS.len() * n,
    };
    if index >= capacity {
        return Err(DatasetError::Invalid(format!("too many shards for {part} ({index} >= {capacity})")));
    }
    Ok(match lead {
        None => format!("{prefix}{}{}.tfrecord", c(tail / n), c(tail % n)),
        Some(l) => format!("{prefix}{}{}.tfrecord", l as char, c(tail)),
    })
}

/// Round-trips frame features through the byte quantizer and recomputes the
/// video-level means, so exported data is identical in either feature mode.
pub fn quantize_in_place(ex: &mut Example, q: &Quantization) {
    if let Some(fl) = &ex.frame_level {
        let rq = |v: &[f64]| v.iter().map(|&x| q.dequantize(q.quantize(x))).collect::<Vec<_>>();
        let fl = FrameLevel::new(fl.rgb_dim(), fl.audio_dim(), rq(fl.rgb()), rq(fl.audio())).expect("same shape");
        ex.video_level = Some(fl.means());
        ex.frame_level = Some(fl);
    }
}

/// Writes each part as shards of at most `per_shard` examples.
pub fn export_parts(
    dir: &Path,
    parts: &[(Part, &[Example])],
    mode: FeatureMode,
    q: &Quantization,
    per_shard: usize,
) -> Result<Vec<PathBuf>, DatasetError> {
    if per_shard == 0 {
        return Err(DatasetError::Invalid("examples_per_shard must be positive".into()));
    }
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut written = Vec::new();
    for &(part, examples) in parts {
        for (i, chunk) in examples.chunks(per_shard).enumerate() {
            let path = dir.join(shard_name(part, i)?);
            let mut bytes = Vec::new();
            for ex in chunk {
                let payload = encode_example(ex, mode, q).map_err(|source| DatasetError::Decode {
                    path: path.clone(),
                    record: 0,
                    source,
                })?;
                append_record(&mut bytes, &payload);
            }
            std::fs::write(&path, bytes).map_err(io_err(&path))?;
            written.push(path);
        }
    }
    Ok(written)
}

/// Lists record files in `dir` (sorted) and classifies them.
pub fn scan_dir(dir: &Path) -> Result<SplitReport, DatasetError> {
    let mut names = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(io_err(dir))? {
        let entry = entry.map_err(io_err(dir))?;
        if entry.file_type().map_err(io_err(dir))?.is_file() {
            names.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    names.sort();
    Ok(split_files(&names))
}

pub fn read_file(path: &Path, opts: &DecodeOptions, q: &Quantization) -> Result<Vec<Example>, DatasetError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, rec) in RecordReader::new(&bytes).enumerate() {
        let payload = rec.map_err(|source| DatasetError::Record { path: path.to_path_buf(), source })?;
        let ex = decode_example(payload, opts, q).map_err(|source| DatasetError::Decode {
            path: path.to_path_buf(),
            record: i,
            source,
        })?;
        out.push(ex);
    }
    Ok(out)
}

/// Loads every shard of `part` under `dir`, in file-name order.
pub fn load_part(dir: &Path, part: Part, opts: &DecodeOptions, q: &Quantization) -> Result<Vec<Example>, DatasetError> {
    let report = scan_dir(dir)?;
    let mut out = Vec::new();
    for f in report.files(part) {
        out.extend(read_file(&dir.join(f), opts, q)?);
    }
    if out.is_empty() {
        return Err(DatasetError::EmptyPart(part));
    }
    Ok(out)
}

/// Dense inputs and targets for a set of examples sharing one frame count.
#[derive(Clone, Debug)]
pub struct Batch {
    pub indices: Vec<usize>,
    /// `[B, L]` 0/1 targets.
    pub labels: Tensor,
    /// `[B, D_v + D_a]` video-level features.
    pub video: Tensor,
    /// `[B, T, D_v]`, present when every example has frames.
    pub rgb: Option<Tensor>,
    /// `[B, T, D_a]`.
    pub audio: Option<Tensor>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// `[B, T, D_v + D_a]` frames with both modalities side by side.
    pub fn frames(&self) -> Option<Tensor> {
        let (rgb, audio) = (self.rgb.as_ref()?, self.audio.as_ref()?);
        let (b, t, dv) = (rgb.shape()[0], rgb.shape()[1], rgb.shape()[2]);
        let da = audio.shape()[2];
        let mut data = Vec::with_capacity(b * t * (dv + da));
        for (r, a) in rgb.data().chunks_exact(dv).zip(audio.data().chunks_exact(da.max(1))) {
            data.extend_from_slice(r);
            data.extend_from_slice(&a[..da]);
        }
        Some(Tensor::new(vec![b, t, dv + da], data).expect("consistent dims"))
    }
}

pub fn make_batch(examples: &[Example], indices: &[usize], num_labels: usize) -> Result<Batch, DatasetError> {
    if indices.is_empty() {
        return Err(DatasetError::Invalid("empty batch".into()));
    }
    let b = indices.len();
    let mut labels = Vec::with_capacity(b * num_labels);
    let mut video = Vec::new();
    let mut video_dim = None;
    for &i in indices {
        let ex = &examples[i];
        labels.extend(ex.label_row(num_labels));
        let v = ex.mean_features().ok_or_else(|| DatasetError::Invalid(format!("example {} has no features", ex.video_id)))?.concat();
        match video_dim {
            None => video_dim = Some(v.len()),
            Some(d) if d != v.len() => {
                return Err(DatasetError::Invalid(format!("example {} has feature dim {}, expected {d}", ex.video_id, v.len())))
            }
            _ => {}
        }
        video.extend(v);
    }
    let invalid = |e: crate::tensor::TensorError| DatasetError::Invalid(e.to_string());
    let labels = Tensor::new(vec![b, num_labels], labels).map_err(invalid)?;
    let video = Tensor::new(vec![b, video_dim.unwrap()], video).map_err(invalid)?;

    let frames: Option<Vec<&FrameLevel>> = indices.iter().map(|&i| examples[i].frame_level.as_ref()).collect();
    let (rgb, audio) = match frames {
        Some(fs) => {
            let (t, dv, da) = (fs[0].num_frames(), fs[0].rgb_dim(), fs[0].audio_dim());
            if fs.iter().any(|f| f.num_frames() != t || f.rgb_dim() != dv || f.audio_dim() != da) {
                return Err(DatasetError::Invalid("batch mixes frame counts or feature dims".into()));
            }
            let rgb: Vec<f64> = fs.iter().flat_map(|f| f.rgb().iter().copied()).collect();
            let audio: Vec<f64> = fs.iter().flat_map(|f| f.audio().iter().copied()).collect();
            let audio = if da == 0 { None } else { Some(Tensor::new(vec![b, t, da], audio).map_err(invalid)?) };
            (Some(Tensor::new(vec![b, t, dv], rgb).map_err(invalid)?), audio)
        }
        None => (None, None),
    };
    Ok(Batch { indices: indices.to_vec(), labels, video, rgb, audio })
}

/// Groups example indices into batches of equal frame count. With `rng`,
/// indices are shuffled within each length bucket and batch order is
/// shuffled; without it the plan is in index order.
pub fn batch_plan(examples: &[Example], batch_size: usize, rng: Option<&mut ChaCha8Rng>) -> Vec<Vec<usize>> {
    let batch_size = batch_size.max(1);
    let mut buckets: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, ex) in examples.iter().enumerate() {
        let t = ex.frame_level.as_ref().map_or(0, FrameLevel::num_frames);
        buckets.entry(t).or_default().push(i);
    }
    let mut plan = Vec::new();
    match rng {
        Some(rng) => {
            for idx in buckets.values_mut() {
                idx.shuffle(rng);
                plan.extend(idx.chunks(batch_size).map(<[usize]>::to_vec));
            }
            plan.shuffle(rng);
        }
        None => {
            for idx in buckets.values() {
                plan.extend(idx.chunks(batch_size).map(<[usize]>::to_vec));
            }
        }
    }
    plan
}
