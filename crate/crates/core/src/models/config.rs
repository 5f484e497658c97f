//! Serializable architecture descriptions.

use serde::{Deserialize, Serialize};

use super::attention::{AttentionDims, AttentionMode, AttentionPool, Consensus};
use super::chaining::{Chaining, ChainingConfig};
use super::cnn::{CnnConfig, ConvBank};
use super::lstm::{Encoder, EncoderConfig};
use super::moe::Moe;
use super::multiscale::MultiscaleConfig;

/// Architecture, tagged by `type`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum ModelConfig {
    /// MoE (or Chaining) over video-level features.
    Moe(MoeModel),
    Lstm(LstmModel),
    Cnn(CnnModel),
    Attention(AttentionModel),
    Multiscale(MultiscaleConfig),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MoeModel {
    pub mixtures: usize,
    /// Average the frames instead of reading the video-level features
    /// (bag-of-frames baseline).
    pub pool_frames: bool,
    pub chaining: Option<ChainingConfig>,
}

impl Default for MoeModel {
    fn default() -> Self {
        Self { mixtures: 16, pool_frames: false, chaining: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LstmModel {
    pub encoder: EncoderConfig,
    pub mixtures: usize,
    pub chaining: Option<ChainingConfig>,
}

impl Default for LstmModel {
    fn default() -> Self {
        Self { encoder: EncoderConfig::default(), mixtures: 8, chaining: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CnnModel {
    pub cnn: CnnConfig,
    pub mixtures: usize,
    pub chaining: Option<ChainingConfig>,
}

impl Default for CnnModel {
    fn default() -> Self {
        Self { cnn: CnnConfig::default(), mixtures: 8, chaining: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttentionModel {
    pub encoder: EncoderConfig,
    pub mode: AttentionMode,
    pub groups: usize,
    pub consensus: Consensus,
    pub embedding_dim: usize,
    pub mixtures: usize,
}

impl Default for AttentionModel {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            mode: AttentionMode::Multi,
            groups: 8,
            consensus: Consensus::Max,
            embedding_dim: 32,
            mixtures: 4,
        }
    }
}

/// Widths a model is built against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDims {
    pub rgb: usize,
    pub audio: usize,
    pub labels: usize,
    pub max_frames: usize,
    /// Cascade projection width; 0 disables the cascade input.
    #[serde(default)]
    pub cascade: usize,
}

impl InputDims {
    pub fn features(&self) -> usize {
        self.rgb + self.audio
    }
}

/// Head size for a feature of width `d`: plain MoE or Chaining over the
/// same feature at every stage.
pub(crate) fn head_params(d: usize, labels: usize, mixtures: usize, chaining: &Option<ChainingConfig>) -> usize {
    match chaining {
        Some(c) => Chaining::num_params(c, &vec![d; c.stages], labels),
        None => Moe::num_params(d, labels, mixtures),
    }
}

impl ModelConfig {
    pub fn name(&self) -> &'static str {
        match self {
            ModelConfig::Moe(_) => "moe",
            ModelConfig::Lstm(_) => "lstm",
            ModelConfig::Cnn(_) => "cnn",
            ModelConfig::Attention(_) => "attention",
            ModelConfig::Multiscale(_) => "multiscale",
        }
    }

    /// Whether the model reads frame sequences.
    pub fn needs_frames(&self) -> bool {
        match self {
            ModelConfig::Moe(m) => m.pool_frames,
            _ => true,
        }
    }

    /// Parameter count without building the model, where it can be stated
    /// in closed form (multi-scale models return `None`).
    pub fn num_params(&self, dims: &InputDims) -> Option<usize> {
        let d = dims.features();
        let l = dims.labels;
        let cascade = dims.cascade * l;
        let n = match self {
            ModelConfig::Moe(m) => head_params(d + dims.cascade, l, m.mixtures, &m.chaining),
            ModelConfig::Lstm(m) => {
                let enc = Encoder::num_params(&m.encoder, d, dims.rgb);
                let rep = encoder_rep_dim(&m.encoder);
                enc + head_params(rep + dims.cascade, l, m.mixtures, &m.chaining)
            }
            ModelConfig::Cnn(m) => {
                ConvBank::num_params(&m.cnn.filters, d)
                    + head_params(m.cnn.channels() + dims.cascade, l, m.mixtures, &m.chaining)
            }
            ModelConfig::Attention(m) => {
                let att = AttentionPool::num_params(
                    m.mode,
                    m.groups,
                    m.embedding_dim,
                    m.mixtures,
                    &AttentionDims {
                        frame_dim: d,
                        hidden_dim: encoder_output_dim(&m.encoder),
                        labels: l,
                        max_frames: dims.max_frames,
                        extra: dims.cascade,
                    },
                );
                Encoder::num_params(&m.encoder, d, dims.rgb) + att
            }
            ModelConfig::Multiscale(_) => return None,
        };
        Some(n + cascade)
    }
}

pub(crate) fn encoder_rep_dim(cfg: &EncoderConfig) -> usize {
    use super::lstm::EncoderMode::*;
    match cfg.mode {
        Single => cfg.cells * cfg.layers,
        Parallel => (cfg.cells + cfg.audio_cells) * cfg.layers,
        BidirectionalFirst => cfg.cells * (cfg.layers + 1),
    }
}

pub(crate) fn encoder_output_dim(cfg: &EncoderConfig) -> usize {
    use super::lstm::EncoderMode::*;
    match cfg.mode {
        Single => cfg.cells,
        Parallel => cfg.cells + cfg.audio_cells,
        BidirectionalFirst if cfg.layers > 1 => cfg.cells,
        BidirectionalFirst => 2 * cfg.cells,
    }
}

/// Smallest flat-MoE mixture count whose parameter total comes closest to
/// `target` for a `d`-wide feature.
pub fn matched_mixtures(target: usize, d: usize, labels: usize) -> usize {
    let per = |m: usize| Moe::num_params(d, labels, m) as f64;
    let slope = (per(2) - per(1)).max(1.0);
    let guess = ((target as f64 - per(0)) / slope).round().max(1.0) as usize;
    (guess.saturating_sub(1).max(1)..=guess + 1)
        .min_by(|&a, &b| (per(a) - target as f64).abs().total_cmp(&(per(b) - target as f64).abs()))
        .unwrap_or(1)
}
