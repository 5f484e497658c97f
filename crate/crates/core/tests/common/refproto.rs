//! Stand-alone protobuf encoder for tf.train.Example / SequenceExample,
//! written independently of the production encoder. Repeated scalars can be
//! emitted unpacked, and unknown fields can be interleaved.

#![allow(dead_code)]

pub fn varint(out: &mut Vec<u8>, mut v: u64) {
    loop {
        let byte = (v & 0x7f) as u8;
        v >>= 7;
        if v == 0 {
            out.push(byte);
            return;
        }
        out.push(byte | 0x80);
    }
}

pub fn tag(out: &mut Vec<u8>, field: u64, wire: u64) {
    varint(out, field << 3 | wire);
}

pub fn len_field(out: &mut Vec<u8>, field: u64, body: &[u8]) {
    tag(out, field, 2);
    varint(out, body.len() as u64);
    out.extend_from_slice(body);
}

#[derive(Clone, Copy)]
pub struct Style {
    pub packed: bool,
    pub junk: bool,
}

/// Unknown fields of every supported wire type, numbered above any real one.
fn junk(out: &mut Vec<u8>, style: Style) {
    if style.junk {
        tag(out, 15, 0);
        varint(out, 123_456_789);
        tag(out, 16, 1);
        out.extend_from_slice(&7u64.to_le_bytes());
        len_field(out, 17, b"ignored");
        tag(out, 18, 5);
        out.extend_from_slice(&1u32.to_le_bytes());
    }
}

pub enum Feat<'a> {
    Bytes(Vec<&'a [u8]>),
    Floats(&'a [f32]),
    Ints(&'a [i64]),
}

pub fn feature(f: &Feat, style: Style) -> Vec<u8> {
    let mut list = Vec::new();
    let field = match f {
        Feat::Bytes(vs) => {
            for v in vs {
                len_field(&mut list, 1, v);
            }
            1
        }
        Feat::Floats(vs) => {
            if style.packed {
                let body: Vec<u8> = vs.iter().flat_map(|v| v.to_le_bytes()).collect();
                len_field(&mut list, 1, &body);
            } else {
                for v in vs.iter() {
                    tag(&mut list, 1, 5);
                    list.extend_from_slice(&v.to_bits().to_le_bytes());
                }
            }
            2
        }
        Feat::Ints(vs) => {
            if style.packed {
                let mut body = Vec::new();
                for &v in vs.iter() {
                    varint(&mut body, v as u64);
                }
                len_field(&mut list, 1, &body);
            } else {
                for &v in vs.iter() {
                    tag(&mut list, 1, 0);
                    varint(&mut list, v as u64);
                }
            }
            3
        }
    };
    junk(&mut list, style);
    let mut out = Vec::new();
    junk(&mut out, style);
    len_field(&mut out, field, &list);
    out
}

pub fn map_entry(key: &str, value: &[u8], style: Style) -> Vec<u8> {
    let mut e = Vec::new();
    // value before key is legal and exercises order independence
    len_field(&mut e, 2, value);
    junk(&mut e, style);
    len_field(&mut e, 1, key.as_bytes());
    e
}

pub fn features(entries: &[(&str, Feat)], style: Style) -> Vec<u8> {
    let mut out = Vec::new();
    for (k, f) in entries {
        len_field(&mut out, 1, &map_entry(k, &feature(f, style), style));
        junk(&mut out, style);
    }
    out
}

pub fn video_example(id: &str, labels: &[i64], rgb: &[f32], audio: &[f32], style: Style) -> Vec<u8> {
    let body = features(
        &[
            ("mean_rgb", Feat::Floats(rgb)),
            ("labels", Feat::Ints(labels)),
            ("id", Feat::Bytes(vec![id.as_bytes()])),
            ("mean_audio", Feat::Floats(audio)),
        ],
        style,
    );
    let mut out = Vec::new();
    junk(&mut out, style);
    len_field(&mut out, 1, &body);
    out
}

/// `rgb` / `audio` hold one byte vector per frame.
pub fn frame_example(id: &str, labels: &[i64], rgb: &[Vec<u8>], audio: &[Vec<u8>], style: Style) -> Vec<u8> {
    let context = features(&[("id", Feat::Bytes(vec![id.as_bytes()])), ("labels", Feat::Ints(labels))], style);
    let list = |frames: &[Vec<u8>]| {
        let mut l = Vec::new();
        for f in frames {
            len_field(&mut l, 1, &feature(&Feat::Bytes(vec![f.as_slice()]), style));
        }
        l
    };
    let mut lists = Vec::new();
    len_field(&mut lists, 1, &map_entry("audio", &list(audio), style));
    len_field(&mut lists, 1, &map_entry("rgb", &list(rgb), style));
    let mut out = Vec::new();
    len_field(&mut out, 2, &lists);
    junk(&mut out, style);
    len_field(&mut out, 1, &context);
    out
}

/// Bitwise CRC-32C and record mask, for framing oracles.
pub fn crc32c_ref(bytes: &[u8]) -> u32 {
    let mut crc = 0xffff_ffffu32;
    for &b in bytes {
        crc ^= b as u32;
        for _ in 0..8 {
            crc = if crc & 1 == 1 { (crc >> 1) ^ 0x82f6_3b78 } else { crc >> 1 };
        }
    }
    !crc
}

pub fn masked_ref(bytes: &[u8]) -> u32 {
    let c = crc32c_ref(bytes);
    (c.rotate_right(15)).wrapping_add(0xa282_ead8)
}
