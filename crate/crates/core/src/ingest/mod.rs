//! Record-file IO, example decoding, dataset splits and synthetic data.

mod crc32c;
mod dataset;
mod example;
mod record;
mod split;
mod synth;
pub mod wire;

pub use crc32c::{crc32c, mask_crc, masked_crc32c};
pub use dataset::{
    batch_plan, export_parts, load_part, make_batch, quantize_in_place, read_file, scan_dir, shard_name, Batch,
    DatasetError, PartSizes,
};
pub use example::{
    decode_example, dequantize, encode_example, DecodeError, DecodeOptions, Example, FeatureMode, FrameLevel,
    Quantization, VideoLevel,
};
pub use record::{append_record, parse_record_stream, write_record_stream, CrcField, RecordError, RecordReader};
pub use split::{classify, split_files, DatasetSplit, Part, SplitReport};
pub use synth::{cholesky, synth_generate, LabelPair, Modality, SynthDataset, SynthError, SynthSpec, Window};
