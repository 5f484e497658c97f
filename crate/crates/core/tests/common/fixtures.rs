//! Random batches and small architecture configs shared by the model tests.

use chainstack::ingest::Batch;
use chainstack::models::{
    AttentionMode, AttentionModel, ChainingConfig, CnnConfig, CnnModel, Consensus, EncoderConfig, EncoderMode, Filter,
    InputDims, LstmModel, LstmVariant, ModelConfig, MoeModel, MultiscaleConfig, MultiscaleMode, Representation,
};
use chainstack::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Batch of `b` examples with `t` frames and random 0/1 labels.
pub fn random_batch(seed: u64, b: usize, t: usize, dims: &InputDims) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rgb = uniform(&mut rng, &[b, t, dims.rgb], -1.0, 1.0);
    let audio = uniform(&mut rng, &[b, t, dims.audio], -1.0, 1.0);
    let video = uniform(&mut rng, &[b, dims.rgb + dims.audio], -1.0, 1.0);
    let labels = (0..b * dims.labels).map(|_| if rng.random_bool(0.3) { 1.0 } else { 0.0 }).collect();
    Batch {
        indices: (0..b).collect(),
        labels: Tensor::new(vec![b, dims.labels], labels).unwrap(),
        video,
        rgb: Some(rgb),
        audio: Some(audio),
    }
}

/// Row-stochastic-ish donor average in `(0, 1)`.
pub fn random_cascade(seed: u64, b: usize, labels: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xca5c);
    uniform(&mut rng, &[b, labels], 0.05, 0.95)
}

pub const SMALL: InputDims = InputDims { rgb: 3, audio: 2, labels: 3, max_frames: 6, cascade: 0 };

fn enc(variant: LstmVariant, mode: EncoderMode) -> EncoderConfig {
    EncoderConfig { variant, mode, layers: 1, cells: 3, audio_cells: 2, representation: Representation::Memory }
}

/// Every architecture family in a configuration small enough for
/// finite differences over all parameters.
pub fn architectures() -> Vec<(&'static str, ModelConfig, InputDims)> {
    let chain = |stages| ChainingConfig { stages, projection: 2, mixtures: 2 };
    let attention = |mode, groups| AttentionModel {
        encoder: enc(LstmVariant::Vanilla, EncoderMode::Single),
        mode,
        groups,
        consensus: Consensus::Max,
        embedding_dim: 2,
        mixtures: 2,
    };
    let multiscale = |mode| MultiscaleConfig {
        mode,
        encoder: enc(LstmVariant::Vanilla, EncoderMode::Single),
        mixtures: 2,
        clip: 2,
        stride: 2,
        levels: 2,
        chaining: chain(2),
        cnn: CnnConfig {
            filters: vec![Filter { width: 1, channels: 2 }, Filter { width: 2, channels: 1 }],
            layers: 2,
            pool: 2,
        },
    };
    let lstm = |variant, mode| {
        ModelConfig::Lstm(LstmModel { encoder: enc(variant, mode), mixtures: 2, chaining: None })
    };
    vec![
        ("moe", ModelConfig::Moe(MoeModel { mixtures: 2, pool_frames: false, chaining: None }), SMALL),
        ("lstm-vanilla", lstm(LstmVariant::Vanilla, EncoderMode::Single), SMALL),
        ("lstm-s", lstm(LstmVariant::S, EncoderMode::Single), SMALL),
        ("lstm-a", lstm(LstmVariant::A, EncoderMode::Single), SMALL),
        ("lstm-parallel", lstm(LstmVariant::Vanilla, EncoderMode::Parallel), SMALL),
        ("lstm-bidirectional", lstm(LstmVariant::Vanilla, EncoderMode::BidirectionalFirst), SMALL),
        (
            "cnn",
            ModelConfig::Cnn(CnnModel {
                cnn: CnnConfig {
                    filters: vec![Filter { width: 1, channels: 2 }, Filter { width: 2, channels: 2 }],
                    layers: 1,
                    pool: 2,
                },
                mixtures: 2,
                chaining: None,
            }),
            SMALL,
        ),
        ("chaining-s3", ModelConfig::Moe(MoeModel { mixtures: 2, pool_frames: false, chaining: Some(chain(3)) }), SMALL),
        ("multi-ap-k4", ModelConfig::Attention(attention(AttentionMode::Multi, 4)), SMALL),
        ("local-ap", ModelConfig::Attention(attention(AttentionMode::Local, 1)), SMALL),
        ("positional-ap", ModelConfig::Attention(attention(AttentionMode::Positional, 2)), SMALL),
        ("multiscale-segment", ModelConfig::Multiscale(multiscale(MultiscaleMode::Segment)), SMALL),
        ("multiscale-pool", ModelConfig::Multiscale(multiscale(MultiscaleMode::Pool)), SMALL),
        ("multiscale-resolution", ModelConfig::Multiscale(multiscale(MultiscaleMode::Resolution)), SMALL),
        ("multiscale-cnn-lstm", ModelConfig::Multiscale(multiscale(MultiscaleMode::CnnLstm)), SMALL),
        (
            "cascade",
            ModelConfig::Moe(MoeModel { mixtures: 2, pool_frames: false, chaining: None }),
            InputDims { cascade: 2, ..SMALL },
        ),
    ]
}

/// Moves every parameter off its initializer (zero biases sit exactly on
/// ReLU kinks when upstream units are dead).
pub fn jitter(model: &mut chainstack::models::Model, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7177);
    for t in model.params.values_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
    }
}
