//! Mixture-of-experts classifier with a zero-output dummy expert.

use super::layers::{last_dim, Builder};
use crate::tensor::{Bindings, Graph, ParamId, Result, TensorError, Var};

#[derive(Clone, Debug)]
pub struct Moe {
    pub input_dim: usize,
    pub labels: usize,
    pub mixtures: usize,
    /// `[D, L (m + 1)]`, label-major: column `l (m + 1) + j`.
    pub gate_w: ParamId,
    /// `[D, L m]`, column `l m + j`.
    pub expert_w: ParamId,
    pub expert_b: ParamId,
}

impl Moe {
    pub fn new(b: &mut Builder, name: &str, input_dim: usize, labels: usize, mixtures: usize) -> Self {
        let gate_w = b.weight(&format!("{name}/gate_w"), input_dim, labels * (mixtures + 1));
        let expert_w = b.weight(&format!("{name}/expert_w"), input_dim, labels * mixtures);
        let expert_b = b.zeros(&format!("{name}/expert_b"), &[labels * mixtures]);
        Self { input_dim, labels, mixtures, gate_w, expert_w, expert_b }
    }

    /// Per-label confidences `[.., L]` for features `[.., D]`.
    ///
    /// `p_l = Σ_j softmax_j(gates_l)[j] σ(expert_{l,j})` where the softmax
    /// runs over `m + 1` entries and the last (dummy) one contributes zero.
    pub fn forward(&self, g: &mut Graph, p: &Bindings, x: Var) -> Result<Var> {
        if last_dim(g, x) != self.input_dim {
            return Err(TensorError::ShapeMismatch {
                op: "moe",
                lhs: g.shape(x).to_vec(),
                rhs: vec![self.input_dim, self.labels * (self.mixtures + 1)],
            });
        }
        let lead: Vec<usize> = g.shape(x)[..g.shape(x).len() - 1].to_vec();
        let axis = lead.len() + 1;
        let with = |k: usize| {
            let mut s = lead.clone();
            s.extend([self.labels, k]);
            s
        };
        let gl = g.matmul(x, p[self.gate_w])?;
        let gl = g.reshape(gl, &with(self.mixtures + 1))?;
        let gates = g.softmax(gl, axis)?;
        let gates = g.slice(gates, axis, 0, self.mixtures)?;
        let el = g.matmul(x, p[self.expert_w])?;
        let el = g.add_bias(el, p[self.expert_b])?;
        let el = g.reshape(el, &with(self.mixtures))?;
        let experts = g.sigmoid(el)?;
        let mixed = g.mul(gates, experts)?;
        g.sum(mixed, axis)
    }

    pub fn num_params(input_dim: usize, labels: usize, mixtures: usize) -> usize {
        input_dim * labels * (mixtures + 1) + (input_dim + 1) * labels * mixtures
    }
}
