//! Attention pooling over recurrent outputs.

use serde::{Deserialize, Serialize};

use super::layers::{last_dim, Builder};
use super::moe::Moe;
use crate::tensor::{Bindings, Graph, ParamId, Result, Tensor, TensorError, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionMode {
    /// K heads over `[x; y]`, one shared MoE, per-label consensus.
    #[default]
    Multi,
    /// One head over the input frames; MoE over `[y_last; z]`.
    Local,
    /// Multi with a learned frame-index embedding in the attention input.
    Positional,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Consensus {
    #[default]
    Max,
    Mean,
}

impl Consensus {
    pub fn reduce(self, g: &mut Graph, x: Var, axis: usize) -> Result<Var> {
        match self {
            Consensus::Max => g.max(x, axis),
            Consensus::Mean => g.mean(x, axis),
        }
    }
}

#[derive(Clone, Debug)]
pub struct AttentionPool {
    pub mode: AttentionMode,
    pub groups: usize,
    pub consensus: Consensus,
    /// `[Dx + N (+ E), K]`, or `[Dx, 1]` in local mode.
    pub w: ParamId,
    /// `[max_frames, E]` for positional mode.
    pub positions: Option<ParamId>,
    pub moe: Moe,
}

/// Pooled prediction together with the attention weights `[B, T, K]`.
#[derive(Clone, Copy, Debug)]
pub struct Attended {
    pub probs: Var,
    pub weights: Var,
}

pub struct AttentionDims {
    pub frame_dim: usize,
    pub hidden_dim: usize,
    pub labels: usize,
    pub max_frames: usize,
    /// Extra width concatenated to every MoE input (cascade features).
    pub extra: usize,
}

impl AttentionPool {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        b: &mut Builder,
        name: &str,
        mode: AttentionMode,
        groups: usize,
        consensus: Consensus,
        embedding_dim: usize,
        mixtures: usize,
        dims: &AttentionDims,
    ) -> Self {
        let (rows, k, moe_in) = match mode {
            AttentionMode::Multi => (dims.frame_dim + dims.hidden_dim, groups, dims.hidden_dim),
            AttentionMode::Positional => (dims.frame_dim + dims.hidden_dim + embedding_dim, groups, dims.hidden_dim),
            AttentionMode::Local => (dims.frame_dim, 1, dims.hidden_dim + dims.frame_dim),
        };
        let w = b.weight(&format!("{name}/w"), rows, k);
        let positions = (mode == AttentionMode::Positional)
            .then(|| b.uniform(&format!("{name}/positions"), &[dims.max_frames, embedding_dim], 0.1));
        let moe = Moe::new(b, &format!("{name}/moe"), moe_in + dims.extra, dims.labels, mixtures);
        Self { mode, groups: k, consensus, w, positions, moe }
    }

    pub fn num_params(mode: AttentionMode, groups: usize, embedding_dim: usize, mixtures: usize, dims: &AttentionDims) -> usize {
        let (att, moe_in) = match mode {
            AttentionMode::Multi => ((dims.frame_dim + dims.hidden_dim) * groups, dims.hidden_dim),
            AttentionMode::Positional => (
                (dims.frame_dim + dims.hidden_dim + embedding_dim) * groups + dims.max_frames * embedding_dim,
                dims.hidden_dim,
            ),
            AttentionMode::Local => (dims.frame_dim, dims.hidden_dim + dims.frame_dim),
        };
        att + Moe::num_params(moe_in + dims.extra, dims.labels, mixtures)
    }

    /// Softmax-over-time attention weights `[B, T, K]`.
    pub fn weights(&self, g: &mut Graph, p: &Bindings, x: Var, y: Var) -> Result<Var> {
        let xs = g.shape(x).to_vec();
        if xs.len() != 3 || xs[1] == 0 {
            return Err(TensorError::InvalidArgument { op: "attention_pool_forward", reason: "empty frame sequence".into() });
        }
        let (b, t) = (xs[0], xs[1]);
        let input = match self.mode {
            AttentionMode::Local => x,
            AttentionMode::Multi => g.concat(&[x, y], 2)?,
            AttentionMode::Positional => {
                let table = p[self.positions.expect("positional table")];
                let rows = g.shape(table)[0];
                if t > rows {
                    return Err(TensorError::InvalidArgument {
                        op: "attention_pool_forward",
                        reason: format!("{t} frames exceed the {rows}-entry position table"),
                    });
                }
                let idx: Vec<usize> = (0..t).collect();
                let e = g.embedding(table, &idx)?;
                let ed = last_dim(g, e);
                let e = g.reshape(e, &[1, t, ed])?;
                let zeros = g.constant(Tensor::zeros(&[b, t, ed]));
                let e = g.add(zeros, e)?;
                g.concat(&[x, y, e], 2)?
            }
        };
        let logits = g.matmul(input, p[self.w])?;
        g.softmax(logits, 1)
    }

    /// `x`: frames `[B, T, Dx]`; `y`: recurrent outputs `[B, T, N]`;
    /// `extra`: optional `[B, E]` appended to the MoE input.
    pub fn forward(&self, g: &mut Graph, p: &Bindings, x: Var, y: Var, extra: Option<Var>) -> Result<Attended> {
        let a = self.weights(g, p, x, y)?;
        let at = g.transpose(a)?;
        let b = g.shape(x)[0];
        let probs = match self.mode {
            AttentionMode::Local => {
                let z = g.matmul(at, x)?;
                let dz = last_dim(g, z);
                let z = g.reshape(z, &[b, dz])?;
                let t = g.shape(y)[1];
                let yl = g.slice(y, 1, t - 1, t)?;
                let dy = last_dim(g, y);
                let yl = g.reshape(yl, &[b, dy])?;
                let mut parts = vec![yl, z];
                parts.extend(extra);
                let input = g.concat(&parts, 1)?;
                self.moe.forward(g, p, input)?
            }
            AttentionMode::Multi | AttentionMode::Positional => {
                let z = g.matmul(at, y)?;
                let z = match extra {
                    Some(e) => {
                        let rep = super::layers::repeat_rows(g, e, self.groups)?;
                        g.concat(&[z, rep], 2)?
                    }
                    None => z,
                };
                let pk = self.moe.forward(g, p, z)?;
                self.consensus.reduce(g, pk, 1)?
            }
        };
        Ok(Attended { probs, weights: a })
    }
}
