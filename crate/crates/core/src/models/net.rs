//! A configured model: parameters plus the forward pass.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::attention::{AttentionDims, AttentionPool};
use super::chaining::{Chaining, ChainingConfig};
use super::cnn::ConvBank;
use super::config::{InputDims, ModelConfig};
use super::layers::Builder;
use super::lstm::{Encoder, EncoderConfig, EncoderMode};
use super::moe::Moe;
use super::multiscale::{Multiscale, MultiscaleMode};
use super::ModelError;
use crate::ensemble::CascadeProjection;
use crate::ingest::Batch;
use super::loss::{compute_loss, LossConfig};
use crate::tensor::{grad_check, Bindings, Graph, ParamStore, Result, Tensor, TensorError, Var};

/// Graph handles for one batch.
#[derive(Clone, Copy, Debug, Default)]
pub struct Inputs {
    /// `[B, D_v + D_a]`.
    pub video: Option<Var>,
    /// `[B, T, D_v + D_a]`.
    pub frames: Option<Var>,
    /// Averaged donor predictions `[B, L]` for cascade models.
    pub cascade: Option<Var>,
}

impl Inputs {
    /// Places a batch's features on `g` as constants.
    pub fn place(g: &mut Graph, batch: &Batch, cascade: Option<&Tensor>) -> Self {
        Self {
            video: Some(g.constant(batch.video.clone())),
            frames: batch.frames().map(|f| g.constant(f)),
            cascade: cascade.map(|c| g.constant(c.clone())),
        }
    }
}

/// Final prediction plus every intermediate stage.
#[derive(Clone, Debug)]
pub struct Output {
    pub probs: Var,
    pub stages: Vec<Var>,
}

#[derive(Clone, Debug)]
enum Head {
    Moe(Moe),
    Chain(Chaining),
}

impl Head {
    fn new(b: &mut Builder, d: usize, labels: usize, mixtures: usize, chaining: &Option<ChainingConfig>) -> Self {
        match chaining {
            Some(c) => Head::Chain(Chaining::new(b, "chain", c, &vec![d; c.stages], labels)),
            None => Head::Moe(Moe::new(b, "moe", d, labels, mixtures)),
        }
    }

    fn forward(&self, g: &mut Graph, p: &Bindings, x: Var) -> Result<Output> {
        match self {
            Head::Moe(m) => Ok(Output { probs: m.forward(g, p, x)?, stages: Vec::new() }),
            Head::Chain(c) => {
                let (probs, mut stages) = c.forward(g, p, &vec![x; c.stages()])?;
                stages.pop();
                Ok(Output { probs, stages })
            }
        }
    }
}

#[derive(Clone, Debug)]
enum Net {
    Moe { pool_frames: bool, head: Head },
    Lstm { encoder: Encoder, head: Head },
    Cnn { bank: ConvBank, head: Head },
    Attention { encoder: Encoder, pool: AttentionPool },
    Multiscale(Multiscale),
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub dims: InputDims,
    pub params: ParamStore,
    net: Net,
    cascade: Option<CascadeProjection>,
}

fn check_encoder(e: &EncoderConfig, dims: &InputDims) -> std::result::Result<(), ModelError> {
    if e.cells == 0 || e.layers == 0 {
        return Err(ModelError::Config("encoder needs at least one layer and one cell".into()));
    }
    if e.mode == EncoderMode::Parallel && (dims.audio == 0 || dims.rgb == 0 || e.audio_cells == 0) {
        return Err(ModelError::Config("parallel encoder needs rgb and audio features and audio_cells > 0".into()));
    }
    Ok(())
}

fn check_chaining(c: &Option<ChainingConfig>) -> std::result::Result<(), ModelError> {
    match c {
        Some(c) if c.stages == 0 => Err(ModelError::Config("chaining needs at least one stage".into())),
        Some(c) if c.mixtures == 0 || (c.stages > 1 && c.projection == 0) => {
            Err(ModelError::Config("chaining needs mixtures > 0 and projection > 0".into()))
        }
        _ => Ok(()),
    }
}

impl ModelConfig {
    pub fn validate(&self, dims: &InputDims) -> std::result::Result<(), ModelError> {
        if dims.labels == 0 || dims.features() == 0 {
            return Err(ModelError::Config("model needs labels and features".into()));
        }
        let mixtures = match self {
            ModelConfig::Moe(m) => {
                check_chaining(&m.chaining)?;
                m.mixtures
            }
            ModelConfig::Lstm(m) => {
                check_encoder(&m.encoder, dims)?;
                check_chaining(&m.chaining)?;
                m.mixtures
            }
            ModelConfig::Cnn(m) => {
                check_chaining(&m.chaining)?;
                if m.cnn.filters.is_empty() || m.cnn.filters.iter().any(|f| f.width == 0 || f.channels == 0) {
                    return Err(ModelError::Config("cnn filters need positive width and channels".into()));
                }
                m.mixtures
            }
            ModelConfig::Attention(m) => {
                check_encoder(&m.encoder, dims)?;
                if m.groups == 0 {
                    return Err(ModelError::Config("attention needs at least one group".into()));
                }
                m.mixtures
            }
            ModelConfig::Multiscale(m) => {
                check_encoder(&m.encoder, dims)?;
                if m.mode == MultiscaleMode::Resolution {
                    check_chaining(&Some(m.chaining.clone()))?;
                }
                if m.mode == MultiscaleMode::CnnLstm && m.cnn.filters.is_empty() {
                    return Err(ModelError::Config("cnn-lstm needs filters".into()));
                }
                m.mixtures
            }
        };
        if mixtures == 0 {
            return Err(ModelError::Config("mixtures must be positive".into()));
        }
        Ok(())
    }
}

impl Model {
    /// Builds and initializes a model; the same `(config, dims, seed)`
    /// always yields the same parameters.
    pub fn new(config: ModelConfig, dims: InputDims, seed: u64) -> std::result::Result<Self, ModelError> {
        config.validate(&dims)?;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder::new(&mut params, &mut rng);
        let d = dims.features();
        let l = dims.labels;
        let extra = dims.cascade;
        let net = match &config {
            ModelConfig::Moe(m) => Net::Moe {
                pool_frames: m.pool_frames,
                head: Head::new(&mut b, d + extra, l, m.mixtures, &m.chaining),
            },
            ModelConfig::Lstm(m) => {
                let encoder = Encoder::new(&mut b, "lstm", &m.encoder, d, dims.rgb);
                let head = Head::new(&mut b, encoder.rep_dim() + extra, l, m.mixtures, &m.chaining);
                Net::Lstm { encoder, head }
            }
            ModelConfig::Cnn(m) => {
                let bank = ConvBank::new(&mut b, "cnn", &m.cnn.filters, d);
                let head = Head::new(&mut b, bank.channels() + extra, l, m.mixtures, &m.chaining);
                Net::Cnn { bank, head }
            }
            ModelConfig::Attention(m) => {
                let encoder = Encoder::new(&mut b, "lstm", &m.encoder, d, dims.rgb);
                let att_dims = AttentionDims {
                    frame_dim: d,
                    hidden_dim: encoder.output_dim(),
                    labels: l,
                    max_frames: dims.max_frames,
                    extra,
                };
                let pool =
                    AttentionPool::new(&mut b, "attention", m.mode, m.groups, m.consensus, m.embedding_dim, m.mixtures, &att_dims);
                Net::Attention { encoder, pool }
            }
            ModelConfig::Multiscale(m) => Net::Multiscale(Multiscale::new(&mut b, "multiscale", m, d, dims.rgb, l, extra)),
        };
        let cascade = (extra > 0).then(|| CascadeProjection::new(&mut b, "cascade", l, extra));
        Ok(Self { config, dims, params, net, cascade })
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn needs_frames(&self) -> bool {
        self.config.needs_frames()
    }

    /// Forward pass. Fails if the inputs the architecture needs are absent.
    pub fn forward(&self, g: &mut Graph, p: &Bindings, inputs: &Inputs) -> Result<Output> {
        let missing = |what: &str| TensorError::InvalidArgument { op: "model", reason: format!("{what} input required") };
        let extra = match (&self.cascade, inputs.cascade) {
            (Some(c), Some(avg)) => Some(c.project(g, p, avg)?),
            (Some(_), None) => return Err(missing("cascade")),
            (None, _) => None,
        };
        let with_extra = |g: &mut Graph, f: Var| match extra {
            Some(e) => g.concat(&[f, e], 1),
            None => Ok(f),
        };
        let frames = inputs.frames;
        match &self.net {
            Net::Moe { pool_frames, head } => {
                let f = if *pool_frames {
                    let x = frames.ok_or_else(|| missing("frame"))?;
                    g.mean(x, 1)?
                } else {
                    inputs.video.ok_or_else(|| missing("video"))?
                };
                let f = with_extra(g, f)?;
                head.forward(g, p, f)
            }
            Net::Lstm { encoder, head } => {
                let x = frames.ok_or_else(|| missing("frame"))?;
                let rep = encoder.forward(g, p, x)?.rep;
                let f = with_extra(g, rep)?;
                head.forward(g, p, f)
            }
            Net::Cnn { bank, head } => {
                let x = frames.ok_or_else(|| missing("frame"))?;
                let rep = bank.over_time(g, p, x)?;
                let f = with_extra(g, rep)?;
                head.forward(g, p, f)
            }
            Net::Attention { encoder, pool } => {
                let x = frames.ok_or_else(|| missing("frame"))?;
                let y = encoder.forward(g, p, x)?.outputs;
                Ok(Output { probs: pool.forward(g, p, x, y, extra)?.probs, stages: Vec::new() })
            }
            Net::Multiscale(m) => {
                let x = frames.ok_or_else(|| missing("frame"))?;
                let out = m.forward(g, p, x, extra)?;
                Ok(Output { probs: out.probs, stages: out.stages })
            }
        }
    }

    /// Inference on one batch with frozen parameters; returns `[B, L]`.
    pub fn predict_batch(&self, batch: &Batch, cascade: Option<&Tensor>) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let inputs = Inputs::place(&mut g, batch, cascade);
        let out = self.forward(&mut g, &p, &inputs)?;
        Ok(g.value(out.probs).clone())
    }

    /// Worst relative error between reverse-mode and central-difference
    /// gradients of the training loss, over every parameter entry.
    pub fn gradient_error(&self, batch: &Batch, cascade: Option<&Tensor>, h: f64) -> Result<f64> {
        let loss_cfg = LossConfig::default();
        grad_check(
            |g, vars| {
                let p = Bindings::from_vars(vars.to_vec());
                let inputs = Inputs::place(g, batch, cascade);
                let out = self.forward(g, &p, &inputs)?;
                let labels = g.constant(batch.labels.clone());
                compute_loss(g, out.probs, labels, &out.stages, None, None, &loss_cfg)
            },
            self.params.values(),
            h,
        )
    }
}
