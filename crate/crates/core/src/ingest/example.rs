//! Decoding and encoding of video-level `Example` and frame-level
//! `SequenceExample` payloads.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::wire::{self, Reader, Value, WireError, Writer};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureMode {
    Video,
    Frame,
}

/// Affine byte-to-real mapping for quantized frame features.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Quantization {
    pub min: f64,
    pub max: f64,
}

impl Default for Quantization {
    fn default() -> Self {
        Self { min: -2.0, max: 2.0 }
    }
}

impl Quantization {
    pub fn dequantize(&self, byte: u8) -> f64 {
        self.min + (self.max - self.min) * f64::from(byte) / 255.0
    }

    /// Nearest byte, saturating outside `[min, max]`.
    pub fn quantize(&self, x: f64) -> u8 {
        let t = (x - self.min) / (self.max - self.min) * 255.0;
        t.round().clamp(0.0, 255.0) as u8
    }
}

/// Default mapping of a quantized feature byte onto `[-2, 2]`.
pub fn dequantize(byte: u8) -> f64 {
    Quantization::default().dequantize(byte)
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoLevel {
    pub mean_rgb: Vec<f64>,
    pub mean_audio: Vec<f64>,
}

impl VideoLevel {
    pub fn concat(&self) -> Vec<f64> {
        let mut v = self.mean_rgb.clone();
        v.extend_from_slice(&self.mean_audio);
        v
    }
}

/// Row-major per-frame features, `num_frames × dim` for each modality.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameLevel {
    num_frames: usize,
    rgb_dim: usize,
    audio_dim: usize,
    rgb: Vec<f64>,
    audio: Vec<f64>,
}

impl FrameLevel {
    pub fn new(rgb_dim: usize, audio_dim: usize, rgb: Vec<f64>, audio: Vec<f64>) -> Result<Self, DecodeError> {
        if rgb_dim == 0 || rgb.len() % rgb_dim != 0 {
            return Err(DecodeError::FrameWidth { key: "rgb", expected: rgb_dim, got: rgb.len() });
        }
        let num_frames = rgb.len() / rgb_dim;
        if audio.len() != num_frames * audio_dim {
            return Err(DecodeError::FrameCount { rgb: num_frames, audio: audio.len() / audio_dim.max(1) });
        }
        if num_frames == 0 {
            return Err(DecodeError::NoFrames);
        }
        Ok(Self { num_frames, rgb_dim, audio_dim, rgb, audio })
    }

    pub fn num_frames(&self) -> usize {
        self.num_frames
    }

    pub fn rgb_dim(&self) -> usize {
        self.rgb_dim
    }

    pub fn audio_dim(&self) -> usize {
        self.audio_dim
    }

    pub fn rgb(&self) -> &[f64] {
        &self.rgb
    }

    pub fn audio(&self) -> &[f64] {
        &self.audio
    }

    pub fn rgb_frame(&self, t: usize) -> &[f64] {
        &self.rgb[t * self.rgb_dim..(t + 1) * self.rgb_dim]
    }

    pub fn audio_frame(&self, t: usize) -> &[f64] {
        &self.audio[t * self.audio_dim..(t + 1) * self.audio_dim]
    }

    pub fn truncate(&mut self, max_frames: usize) {
        if self.num_frames > max_frames && max_frames > 0 {
            self.num_frames = max_frames;
            self.rgb.truncate(max_frames * self.rgb_dim);
            self.audio.truncate(max_frames * self.audio_dim);
        }
    }

    /// Per-modality mean over frames.
    pub fn means(&self) -> VideoLevel {
        let mean = |data: &[f64], dim: usize| {
            let mut m = vec![0.0; dim];
            for row in data.chunks_exact(dim.max(1)).take(self.num_frames) {
                for (a, b) in m.iter_mut().zip(row) {
                    *a += b;
                }
            }
            m.iter_mut().for_each(|a| *a /= self.num_frames as f64);
            m
        };
        VideoLevel { mean_rgb: mean(&self.rgb, self.rgb_dim), mean_audio: mean(&self.audio, self.audio_dim) }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub video_id: String,
    /// Sorted, deduplicated label indices.
    pub labels: Vec<usize>,
    pub video_level: Option<VideoLevel>,
    pub frame_level: Option<FrameLevel>,
}

impl Example {
    pub fn validate(&self, num_labels: usize, max_frames: usize) -> Result<(), DecodeError> {
        if self.video_level.is_none() && self.frame_level.is_none() {
            return Err(DecodeError::NoFeatures);
        }
        if let Some(&l) = self.labels.iter().find(|&&l| l >= num_labels) {
            return Err(DecodeError::LabelOutOfRange { label: l as u64, num_labels });
        }
        if let Some(f) = &self.frame_level {
            if f.num_frames() > max_frames {
                return Err(DecodeError::TooManyFrames { frames: f.num_frames(), max_frames });
            }
        }
        Ok(())
    }

    /// Dense 0/1 target row of length `num_labels`.
    pub fn label_row(&self, num_labels: usize) -> Vec<f64> {
        let mut row = vec![0.0; num_labels];
        for &l in &self.labels {
            row[l] = 1.0;
        }
        row
    }

    /// Video-level features, falling back to frame means.
    pub fn mean_features(&self) -> Option<VideoLevel> {
        match (&self.video_level, &self.frame_level) {
            (Some(v), _) => Some(v.clone()),
            (None, Some(f)) => Some(f.means()),
            (None, None) => None,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DecodeError {
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error("missing required key `{0}`")]
    MissingKey(&'static str),
    #[error("key `{key}` holds {found}, expected {expected}")]
    WrongKind { key: &'static str, expected: &'static str, found: &'static str },
    #[error("key `{0}` is not valid UTF-8")]
    InvalidUtf8(&'static str),
    #[error("label {label} outside vocabulary of {num_labels}")]
    LabelOutOfRange { label: u64, num_labels: usize },
    #[error("example has no frames")]
    NoFrames,
    #[error("example has neither video-level nor frame-level features")]
    NoFeatures,
    #[error("{frames} frames exceed max_frames {max_frames}")]
    TooManyFrames { frames: usize, max_frames: usize },
    #[error("`{key}` frames have inconsistent width: expected {expected}, got {got}")]
    FrameWidth { key: &'static str, expected: usize, got: usize },
    #[error("rgb has {rgb} frames but audio has {audio}")]
    FrameCount { rgb: usize, audio: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecodeOptions {
    pub mode: FeatureMode,
    pub num_labels: usize,
    pub max_frames: usize,
}

// Field numbers of the tf.train messages involved.
const EXAMPLE_FEATURES: u32 = 1;
const FEATURES_MAP: u32 = 1;
const MAP_KEY: u32 = 1;
const MAP_VALUE: u32 = 2;
const FEATURE_BYTES: u32 = 1;
const FEATURE_FLOAT: u32 = 2;
const FEATURE_INT64: u32 = 3;
const LIST_VALUE: u32 = 1;
const SEQ_CONTEXT: u32 = 1;
const SEQ_FEATURE_LISTS: u32 = 2;
const FEATURE_LISTS_MAP: u32 = 1;
const FEATURE_LIST_FEATURE: u32 = 1;

enum Feature<'a> {
    Bytes(Vec<&'a [u8]>),
    Floats(Vec<f32>),
    Ints(Vec<u64>),
    Unset,
}

impl Feature<'_> {
    fn kind(&self) -> &'static str {
        match self {
            Feature::Bytes(_) => "bytes_list",
            Feature::Floats(_) => "float_list",
            Feature::Ints(_) => "int64_list",
            Feature::Unset => "no value",
        }
    }
}

fn parse_list<'a, T>(
    buf: &'a [u8],
    base: usize,
    mut on_value: impl FnMut(Value<'a>, usize, &mut Vec<T>) -> Result<(), DecodeError>,
) -> Result<Vec<T>, DecodeError> {
    let mut r = Reader::nested(buf, base);
    let mut out = Vec::new();
    while let Some(f) = r.next() {
        let (field, v) = f?;
        if field == LIST_VALUE {
            let at = match v {
                Value::Bytes(b) => r.offset_of(b),
                _ => base,
            };
            on_value(v, at, &mut out)?;
        }
    }
    Ok(out)
}

fn parse_feature<'a>(buf: &'a [u8], base: usize) -> Result<Feature<'a>, DecodeError> {
    let mut r = Reader::nested(buf, base);
    let mut feature = Feature::Unset;
    while let Some(f) = r.next() {
        let (field, v) = f?;
        if !matches!(field, FEATURE_BYTES | FEATURE_FLOAT | FEATURE_INT64) {
            continue;
        }
        let body = v.bytes(field)?;
        let at = r.offset_of(body);
        feature = match field {
            FEATURE_BYTES => Feature::Bytes(parse_list(body, at, |v, _, out| {
                out.push(v.bytes(LIST_VALUE)?);
                Ok(())
            })?),
            FEATURE_FLOAT => Feature::Floats(parse_list(body, at, |v, at, out| {
                match v {
                    Value::Bytes(b) => out.extend(wire::packed_f32(b, at)?),
                    Value::Fixed32(bits) => out.push(f32::from_bits(bits)),
                    other => {
                        return Err(WireError::WireType { field: LIST_VALUE, expected: wire::FIXED32, found: other.wire_type() }.into())
                    }
                }
                Ok(())
            })?),
            _ => Feature::Ints(parse_list(body, at, |v, at, out| {
                match v {
                    Value::Bytes(b) => out.extend(wire::packed_varints(b, at)?),
                    Value::Varint(x) => out.push(x),
                    other => {
                        return Err(WireError::WireType { field: LIST_VALUE, expected: wire::VARINT, found: other.wire_type() }.into())
                    }
                }
                Ok(())
            })?),
        };
    }
    Ok(feature)
}

/// Parses a map<string, message> field into (key, value slice, value offset)
/// entries, later duplicates overriding earlier ones.
fn parse_map<'a>(buf: &'a [u8], base: usize, map_field: u32) -> Result<Vec<(&'a [u8], &'a [u8], usize)>, DecodeError> {
    let mut entries: Vec<(&[u8], &[u8], usize)> = Vec::new();
    for (entry, at) in sub_messages(buf, base, map_field)? {
        let mut er = Reader::nested(entry, at);
        let mut key: &[u8] = &[];
        let mut value: (&[u8], usize) = (&[], at);
        while let Some(f) = er.next() {
            let (field, v) = f?;
            match field {
                MAP_KEY => key = v.bytes(field)?,
                MAP_VALUE => {
                    let b = v.bytes(field)?;
                    value = (b, er.offset_of(b));
                }
                _ => {}
            }
        }
        entries.retain(|(k, _, _)| *k != key);
        entries.push((key, value.0, value.1));
    }
    Ok(entries)
}

fn sub_messages<'a>(buf: &'a [u8], base: usize, want: u32) -> Result<Vec<(&'a [u8], usize)>, DecodeError> {
    let mut r = Reader::nested(buf, base);
    let mut out = Vec::new();
    while let Some(f) = r.next() {
        let (field, v) = f?;
        if field == want {
            let b = v.bytes(field)?;
            out.push((b, r.offset_of(b)));
        }
    }
    Ok(out)
}

/// Merged feature map of every `Features` sub-message under `field`.
fn features_of(buf: &[u8], field: u32) -> Result<FeatureMap<'_>, DecodeError> {
    let mut out: FeatureMap = Vec::new();
    for (body, at) in sub_messages(buf, 0, field)? {
        for (key, value, vat) in parse_map(body, at, FEATURES_MAP)? {
            out.retain(|(k, _)| *k != key);
            out.push((key, parse_feature(value, vat)?));
        }
    }
    Ok(out)
}

type FeatureMap<'a> = Vec<(&'a [u8], Feature<'a>)>;

fn take<'a>(features: &mut FeatureMap<'a>, key: &str) -> Option<Feature<'a>> {
    let i = features.iter().position(|(k, _)| *k == key.as_bytes())?;
    Some(features.swap_remove(i).1)
}

fn floats(f: Feature<'_>, key: &'static str) -> Result<Vec<f64>, DecodeError> {
    match f {
        Feature::Floats(v) => Ok(v.into_iter().map(f64::from).collect()),
        Feature::Unset => Ok(Vec::new()),
        other => Err(DecodeError::WrongKind { key, expected: "float_list", found: other.kind() }),
    }
}

fn labels(features: &mut FeatureMap<'_>, num_labels: usize) -> Result<Vec<usize>, DecodeError> {
    let raw = match take(features, "labels") {
        Some(Feature::Ints(v)) => v,
        Some(Feature::Unset) => Vec::new(),
        Some(other) => return Err(DecodeError::WrongKind { key: "labels", expected: "int64_list", found: other.kind() }),
        None => return Err(DecodeError::MissingKey("labels")),
    };
    let mut out = Vec::with_capacity(raw.len());
    for l in raw {
        if l >= num_labels as u64 {
            return Err(DecodeError::LabelOutOfRange { label: l, num_labels });
        }
        out.push(l as usize);
    }
    out.sort_unstable();
    out.dedup();
    Ok(out)
}

fn video_id(features: &mut FeatureMap<'_>) -> Result<String, DecodeError> {
    let f = take(features, "id").or_else(|| take(features, "video_id")).ok_or(DecodeError::MissingKey("id"))?;
    match f {
        Feature::Bytes(v) => {
            let first = v.first().copied().unwrap_or_default();
            String::from_utf8(first.to_vec()).map_err(|_| DecodeError::InvalidUtf8("id"))
        }
        other => Err(DecodeError::WrongKind { key: "id", expected: "bytes_list", found: other.kind() }),
    }
}

fn frames(list: &[u8], at: usize, key: &'static str, q: &Quantization) -> Result<(usize, Vec<f64>), DecodeError> {
    let mut data = Vec::new();
    let mut width = None;
    let mut count = 0;
    for (body, fat) in sub_messages(list, at, FEATURE_LIST_FEATURE)? {
        let bytes: Vec<u8> = match parse_feature(body, fat)? {
            Feature::Bytes(v) => v.concat(),
            Feature::Unset => Vec::new(),
            other => return Err(DecodeError::WrongKind { key, expected: "bytes_list", found: other.kind() }),
        };
        match width {
            None => width = Some(bytes.len()),
            Some(w) if w != bytes.len() => return Err(DecodeError::FrameWidth { key, expected: w, got: bytes.len() }),
            _ => {}
        }
        data.extend(bytes.iter().map(|&b| q.dequantize(b)));
        count += 1;
    }
    Ok((count, data))
}

/// Decodes one payload. Frame features are dequantized and truncated to
/// `max_frames`.
pub fn decode_example(payload: &[u8], opts: &DecodeOptions, q: &Quantization) -> Result<Example, DecodeError> {
    match opts.mode {
        FeatureMode::Video => {
            let mut features = features_of(payload, EXAMPLE_FEATURES)?;
            let video_id = video_id(&mut features)?;
            let labels = labels(&mut features, opts.num_labels)?;
            let mean_rgb = floats(take(&mut features, "mean_rgb").ok_or(DecodeError::MissingKey("mean_rgb"))?, "mean_rgb")?;
            let mean_audio =
                floats(take(&mut features, "mean_audio").ok_or(DecodeError::MissingKey("mean_audio"))?, "mean_audio")?;
            Ok(Example { video_id, labels, video_level: Some(VideoLevel { mean_rgb, mean_audio }), frame_level: None })
        }
        FeatureMode::Frame => {
            let mut context = features_of(payload, SEQ_CONTEXT)?;
            let video_id = video_id(&mut context)?;
            let labels = labels(&mut context, opts.num_labels)?;
            let mut rgb = None;
            let mut audio = None;
            for (body, at) in sub_messages(payload, 0, SEQ_FEATURE_LISTS)? {
                for (key, value, vat) in parse_map(body, at, FEATURE_LISTS_MAP)? {
                    match key {
                        b"rgb" => rgb = Some(frames(value, vat, "rgb", q)?),
                        b"audio" => audio = Some(frames(value, vat, "audio", q)?),
                        _ => {}
                    }
                }
            }
            let (nr, rgb) = rgb.ok_or(DecodeError::MissingKey("rgb"))?;
            let (na, audio) = audio.ok_or(DecodeError::MissingKey("audio"))?;
            if nr != na {
                return Err(DecodeError::FrameCount { rgb: nr, audio: na });
            }
            if nr == 0 {
                return Err(DecodeError::NoFrames);
            }
            let mut fl = FrameLevel::new(rgb.len() / nr, audio.len() / na, rgb, audio)?;
            fl.truncate(opts.max_frames);
            Ok(Example { video_id, labels, video_level: None, frame_level: Some(fl) })
        }
    }
}

fn write_feature_entry(w: &mut Writer, key: &str, feature: impl FnOnce(&mut Writer)) {
    w.message(FEATURES_MAP, |e| {
        e.bytes(MAP_KEY, key.as_bytes());
        e.message(MAP_VALUE, feature);
    });
}

fn write_labels_and_id(w: &mut Writer, ex: &Example) {
    write_feature_entry(w, "id", |f| f.message(FEATURE_BYTES, |l| l.bytes(LIST_VALUE, ex.video_id.as_bytes())));
    let labels: Vec<u64> = ex.labels.iter().map(|&l| l as u64).collect();
    write_feature_entry(w, "labels", |f| f.message(FEATURE_INT64, |l| l.packed_varints(LIST_VALUE, &labels)));
}

/// Encodes an example in the given mode. Video mode needs video-level
/// features (or falls back to frame means); frame mode quantizes frames.
pub fn encode_example(ex: &Example, mode: FeatureMode, q: &Quantization) -> Result<Vec<u8>, DecodeError> {
    let mut w = Writer::new();
    match mode {
        FeatureMode::Video => {
            let v = ex.mean_features().ok_or(DecodeError::NoFeatures)?;
            let to32 = |x: &[f64]| x.iter().map(|&v| v as f32).collect::<Vec<_>>();
            w.message(EXAMPLE_FEATURES, |fs| {
                write_labels_and_id(fs, ex);
                write_feature_entry(fs, "mean_rgb", |f| f.message(FEATURE_FLOAT, |l| l.packed_f32(LIST_VALUE, &to32(&v.mean_rgb))));
                write_feature_entry(fs, "mean_audio", |f| {
                    f.message(FEATURE_FLOAT, |l| l.packed_f32(LIST_VALUE, &to32(&v.mean_audio)))
                });
            });
        }
        FeatureMode::Frame => {
            let fl = ex.frame_level.as_ref().ok_or(DecodeError::NoFrames)?;
            w.message(SEQ_CONTEXT, |fs| write_labels_and_id(fs, ex));
            w.message(SEQ_FEATURE_LISTS, |lists| {
                for (key, dim, data) in [("rgb", fl.rgb_dim, &fl.rgb), ("audio", fl.audio_dim, &fl.audio)] {
                    lists.message(FEATURE_LISTS_MAP, |e| {
                        e.bytes(MAP_KEY, key.as_bytes());
                        e.message(MAP_VALUE, |list| {
                            for t in 0..fl.num_frames {
                                let bytes: Vec<u8> = data[t * dim..(t + 1) * dim].iter().map(|&x| q.quantize(x)).collect();
                                list.message(FEATURE_LIST_FEATURE, |f| f.message(FEATURE_BYTES, |b| b.bytes(LIST_VALUE, &bytes)));
                            }
                        });
                    });
                }
            });
        }
    }
    Ok(w.into_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dequantize_endpoints() {
        assert_eq!(dequantize(0), -2.0);
        assert_eq!(dequantize(255), 2.0);
        assert!((dequantize(128) - (-2.0 + 512.0 / 255.0)).abs() < 1e-15);
        assert!((dequantize(128) - 0.00784).abs() < 1e-5);
    }

    #[test]
    fn dequantize_is_monotone_and_quantize_inverts() {
        let q = Quantization::default();
        for b in 0..255u8 {
            assert!(q.dequantize(b) <= q.dequantize(b + 1));
        }
        for b in 0..=255u8 {
            assert_eq!(q.quantize(q.dequantize(b)), b);
        }
        assert_eq!(q.quantize(-9.0), 0);
        assert_eq!(q.quantize(9.0), 255);
    }

    #[test]
    fn video_roundtrip() {
        let ex = Example {
            video_id: "vid".into(),
            labels: vec![3, 7],
            video_level: Some(VideoLevel { mean_rgb: vec![0.5, -1.25], mean_audio: vec![0.25] }),
            frame_level: None,
        };
        let bytes = encode_example(&ex, FeatureMode::Video, &Quantization::default()).unwrap();
        let opts = DecodeOptions { mode: FeatureMode::Video, num_labels: 10, max_frames: 30 };
        assert_eq!(decode_example(&bytes, &opts, &Quantization::default()).unwrap(), ex);
        let small = DecodeOptions { num_labels: 5, ..opts };
        assert_eq!(
            decode_example(&bytes, &small, &Quantization::default()),
            Err(DecodeError::LabelOutOfRange { label: 7, num_labels: 5 })
        );
    }

    #[test]
    fn frame_truncation() {
        let q = Quantization::default();
        let fl = FrameLevel::new(2, 1, (0..10).map(|i| q.dequantize(i * 20)).collect(), vec![2.0; 5]).unwrap();
        let ex = Example { video_id: "a".into(), labels: vec![], video_level: None, frame_level: Some(fl) };
        let bytes = encode_example(&ex, FeatureMode::Frame, &q).unwrap();
        let opts = DecodeOptions { mode: FeatureMode::Frame, num_labels: 4, max_frames: 3 };
        let back = decode_example(&bytes, &opts, &q).unwrap();
        let f = back.frame_level.unwrap();
        assert_eq!(f.num_frames(), 3);
        assert_eq!(f.rgb_frame(2), &[q.dequantize(80), q.dequantize(100)]);
    }

    #[test]
    fn missing_key_is_named() {
        let mut w = Writer::new();
        w.message(EXAMPLE_FEATURES, |fs| {
            write_feature_entry(fs, "id", |f| f.message(FEATURE_BYTES, |l| l.bytes(LIST_VALUE, b"x")));
            write_feature_entry(fs, "labels", |f| f.message(FEATURE_INT64, |l| l.packed_varints(LIST_VALUE, &[1])));
            write_feature_entry(fs, "mean_rgb", |f| f.message(FEATURE_FLOAT, |l| l.packed_f32(LIST_VALUE, &[1.0])));
        });
        let opts = DecodeOptions { mode: FeatureMode::Video, num_labels: 4, max_frames: 3 };
        assert_eq!(
            decode_example(&w.into_bytes(), &opts, &Quantization::default()),
            Err(DecodeError::MissingKey("mean_audio"))
        );
    }

    #[test]
    fn frame_means() {
        let fl = FrameLevel::new(1, 1, vec![1.0, 2.0, 6.0], vec![0.0, 0.0, 3.0]).unwrap();
        assert_eq!(fl.means(), VideoLevel { mean_rgb: vec![3.0], mean_audio: vec![1.0] });
    }
}
