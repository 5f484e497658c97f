//! Temporal multi-scale models: segment, pool, resolution and CNN-LSTM.

use serde::{Deserialize, Serialize};

use super::chaining::{Chaining, ChainingConfig};
use super::cnn::{CnnConfig, Pyramid};
use super::layers::{pool_time, stack_time, Builder};
use super::lstm::{Encoder, EncoderConfig, EncoderMode, LstmCell, LstmStack, Representation};
use super::moe::Moe;
use crate::tensor::{Bindings, Graph, Result, TensorError, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MultiscaleMode {
    /// Shared-parameter clip encoders feeding a clip-level LSTM.
    #[default]
    Segment,
    /// One continuous multi-layer LSTM with k-pooling between layers.
    Pool,
    /// Mean-pooled resolutions joined by Chaining, coarsest first.
    Resolution,
    /// Conv pyramid with one LSTM + MoE per scale, averaged.
    CnnLstm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MultiscaleConfig {
    pub mode: MultiscaleMode,
    pub encoder: EncoderConfig,
    pub mixtures: usize,
    /// Clip length in frames (segment).
    pub clip: usize,
    /// Pooling stride (pool, resolution).
    pub stride: usize,
    /// Number of resolutions, original included (resolution).
    pub levels: usize,
    pub chaining: ChainingConfig,
    pub cnn: CnnConfig,
}

impl Default for MultiscaleConfig {
    fn default() -> Self {
        Self {
            mode: MultiscaleMode::Segment,
            encoder: EncoderConfig::default(),
            mixtures: 4,
            clip: 10,
            stride: 2,
            levels: 3,
            chaining: ChainingConfig { stages: 3, projection: 32, mixtures: 4 },
            cnn: CnnConfig { layers: 2, ..CnnConfig::default() },
        }
    }
}

#[derive(Clone, Debug)]
enum Net {
    Segment { clip: usize, clips: Encoder, top: LstmStack, moe: Moe },
    Pool { stride: usize, layers: Vec<LstmCell>, representation: Representation, moe: Moe },
    Resolution { stride: usize, encoders: Vec<Encoder>, chain: Chaining },
    CnnLstm { pyramid: Pyramid, heads: Vec<(Encoder, Moe)> },
}

#[derive(Clone, Debug)]
pub struct Multiscale {
    net: Net,
}

/// Final prediction plus intermediate chaining stages, if any.
pub struct MultiscaleOutput {
    pub probs: Var,
    pub stages: Vec<Var>,
}

impl Multiscale {
    /// `extra` widens every MoE input (cascade features).
    pub fn new(
        b: &mut Builder,
        name: &str,
        cfg: &MultiscaleConfig,
        input_dim: usize,
        rgb_dim: usize,
        labels: usize,
        extra: usize,
    ) -> Self {
        let enc = &cfg.encoder;
        let net = match cfg.mode {
            MultiscaleMode::Segment => {
                let clips = Encoder::new(b, &format!("{name}/clip"), enc, input_dim, rgb_dim);
                let top = LstmStack::new(b, &format!("{name}/top"), enc.variant, clips.output_dim(), enc.cells, 1, enc.representation);
                let moe = Moe::new(b, &format!("{name}/moe"), top.rep_dim() + extra, labels, cfg.mixtures);
                Net::Segment { clip: cfg.clip.max(1), clips, top, moe }
            }
            MultiscaleMode::Pool => {
                let layers: Vec<LstmCell> = (0..enc.layers.max(1))
                    .map(|l| {
                        let m = if l == 0 { input_dim } else { enc.cells };
                        LstmCell::new(b, &format!("{name}/l{l}"), enc.variant, m, enc.cells)
                    })
                    .collect();
                let rep = enc.cells * layers.len();
                let moe = Moe::new(b, &format!("{name}/moe"), rep + extra, labels, cfg.mixtures);
                Net::Pool { stride: cfg.stride.max(1), layers, representation: enc.representation, moe }
            }
            MultiscaleMode::Resolution => {
                let encoders: Vec<Encoder> = (0..cfg.levels.max(1))
                    .map(|l| Encoder::new(b, &format!("{name}/res{l}"), enc, input_dim, rgb_dim))
                    .collect();
                let dims: Vec<usize> = encoders.iter().rev().map(|e| e.rep_dim() + extra).collect();
                let chain = Chaining::new(b, &format!("{name}/chain"), &cfg.chaining, &dims, labels);
                Net::Resolution { stride: cfg.stride.max(1), encoders, chain }
            }
            MultiscaleMode::CnnLstm => {
                let pyramid = Pyramid::new(b, &format!("{name}/cnn"), &cfg.cnn, input_dim);
                let single = EncoderConfig { mode: EncoderMode::Single, ..enc.clone() };
                let heads = pyramid
                    .banks
                    .iter()
                    .enumerate()
                    .map(|(l, bank)| {
                        let e = Encoder::new(b, &format!("{name}/scale{l}/lstm"), &single, bank.channels(), bank.channels());
                        let moe = Moe::new(b, &format!("{name}/scale{l}/moe"), e.rep_dim() + extra, labels, cfg.mixtures);
                        (e, moe)
                    })
                    .collect();
                Net::CnnLstm { pyramid, heads }
            }
        };
        Self { net }
    }

    /// `x`: `[B, T, D]` frames; `extra`: optional `[B, E]`.
    pub fn forward(&self, g: &mut Graph, p: &Bindings, x: Var, extra: Option<Var>) -> Result<MultiscaleOutput> {
        let s = g.shape(x).to_vec();
        if s.len() != 3 || s[1] == 0 {
            return Err(TensorError::InvalidArgument { op: "multiscale_forward", reason: "empty frame sequence".into() });
        }
        let (b, t, d) = (s[0], s[1], s[2]);
        let with_extra = |g: &mut Graph, f: Var| match extra {
            Some(e) => g.concat(&[f, e], 1),
            None => Ok(f),
        };
        match &self.net {
            Net::Segment { clip, clips, top, moe } => {
                let full = t / clip;
                let rest = t % clip;
                let mut seq = Vec::new();
                if full > 0 {
                    let head = g.slice(x, 1, 0, full * clip)?;
                    let head = g.reshape(head, &[b * full, *clip, d])?;
                    let h = clips.forward(g, p, head)?.last_h;
                    let n = g.shape(h)[1];
                    seq.push(g.reshape(h, &[b, full, n])?);
                }
                if rest > 0 {
                    let tail = g.slice(x, 1, full * clip, t)?;
                    let h = clips.forward(g, p, tail)?.last_h;
                    seq.push(stack_time(g, &[h])?);
                }
                let seq = g.concat(&seq, 1)?;
                let rep = top.run(g, p, seq)?.rep;
                let input = with_extra(g, rep)?;
                Ok(MultiscaleOutput { probs: moe.forward(g, p, input)?, stages: Vec::new() })
            }
            Net::Pool { stride, layers, representation, moe } => {
                let mut input = x;
                let mut finals = Vec::with_capacity(layers.len());
                for (l, cell) in layers.iter().enumerate() {
                    if l > 0 {
                        input = pool_time(g, input, *stride, true)?;
                    }
                    let (outs, state) = cell.run(g, p, input, None, false)?;
                    input = stack_time(g, &outs)?;
                    finals.push(match representation {
                        Representation::Memory => state.c,
                        Representation::Hidden => state.h,
                    });
                }
                let rep = g.concat(&finals, 1)?;
                let input = with_extra(g, rep)?;
                Ok(MultiscaleOutput { probs: moe.forward(g, p, input)?, stages: Vec::new() })
            }
            Net::Resolution { stride, encoders, chain } => {
                let mut level = x;
                let mut reps = Vec::with_capacity(encoders.len());
                for (l, enc) in encoders.iter().enumerate() {
                    if l > 0 {
                        level = pool_time(g, level, *stride, true)?;
                    }
                    let rep = enc.forward(g, p, level)?.rep;
                    reps.push(with_extra(g, rep)?);
                }
                reps.reverse();
                let (probs, mut stages) = chain.forward(g, p, &reps)?;
                stages.pop();
                Ok(MultiscaleOutput { probs, stages })
            }
            Net::CnnLstm { pyramid, heads } => {
                let maps = pyramid.forward(g, p, x)?;
                let mut preds = Vec::with_capacity(heads.len());
                for (m, (enc, moe)) in maps.into_iter().zip(heads) {
                    let rep = enc.forward(g, p, m)?.rep;
                    let input = with_extra(g, rep)?;
                    let pr = moe.forward(g, p, input)?;
                    let l = g.shape(pr)[1];
                    preds.push(g.reshape(pr, &[b, 1, l])?);
                }
                let all = g.concat(&preds, 1)?;
                Ok(MultiscaleOutput { probs: g.mean(all, 1)?, stages: Vec::new() })
            }
        }
    }
}
