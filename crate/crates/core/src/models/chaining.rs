//! Chaining: a sequence of MoE stages, each fed the projected predictions
//! of all earlier stages.

use serde::{Deserialize, Serialize};

use super::layers::{affine, Builder};
use super::moe::Moe;
use crate::tensor::{Bindings, Graph, ParamId, Result, TensorError, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChainingConfig {
    pub stages: usize,
    /// Width each stage's predictions are projected to.
    pub projection: usize,
    pub mixtures: usize,
}

impl Default for ChainingConfig {
    fn default() -> Self {
        Self { stages: 8, projection: 128, mixtures: 2 }
    }
}

#[derive(Clone, Debug)]
pub struct Chaining {
    pub moes: Vec<Moe>,
    /// `(W [L, P], b [P])` for every stage but the last.
    pub projections: Vec<(ParamId, ParamId)>,
    pub projection: usize,
}

impl Chaining {
    /// One feature width per stage.
    pub fn new(b: &mut Builder, name: &str, cfg: &ChainingConfig, feature_dims: &[usize], labels: usize) -> Self {
        let stages = feature_dims.len();
        let moes = feature_dims
            .iter()
            .enumerate()
            .map(|(s, &d)| Moe::new(b, &format!("{name}/s{s}/moe"), d + s * cfg.projection, labels, cfg.mixtures))
            .collect();
        let projections = (0..stages.saturating_sub(1))
            .map(|s| {
                let w = b.weight(&format!("{name}/s{s}/proj_w"), labels, cfg.projection);
                let bias = b.zeros(&format!("{name}/s{s}/proj_b"), &[cfg.projection]);
                (w, bias)
            })
            .collect();
        Self { moes, projections, projection: cfg.projection }
    }

    pub fn num_params(cfg: &ChainingConfig, feature_dims: &[usize], labels: usize) -> usize {
        let moe: usize = feature_dims
            .iter()
            .enumerate()
            .map(|(s, &d)| Moe::num_params(d + s * cfg.projection, labels, cfg.mixtures))
            .sum();
        moe + feature_dims.len().saturating_sub(1) * (labels + 1) * cfg.projection
    }

    pub fn stages(&self) -> usize {
        self.moes.len()
    }

    /// Stage `s` sees `[feature_s; proj(p_1); ...; proj(p_{s-1})]` where
    /// `proj(p) = n(relu(p W + b))`. Returns the final prediction and every
    /// stage's prediction (final included).
    pub fn forward(&self, g: &mut Graph, p: &Bindings, features: &[Var]) -> Result<(Var, Vec<Var>)> {
        if features.is_empty() || features.len() != self.moes.len() {
            return Err(TensorError::InvalidArgument {
                op: "chaining_forward",
                reason: format!("{} features for {} stages", features.len(), self.moes.len()),
            });
        }
        let mut preds = Vec::with_capacity(features.len());
        let mut projected = Vec::new();
        for (s, (moe, &f)) in self.moes.iter().zip(features).enumerate() {
            let mut parts = vec![f];
            parts.extend_from_slice(&projected);
            let axis = g.shape(f).len() - 1;
            let input = g.concat(&parts, axis)?;
            let pred = moe.forward(g, p, input)?;
            if let Some(&(w, bias)) = self.projections.get(s) {
                let z = affine(g, pred, p[w], p[bias])?;
                let z = g.relu(z)?;
                let axis = g.shape(z).len() - 1;
                projected.push(g.l2_normalize(z, axis)?);
            }
            preds.push(pred);
        }
        Ok((*preds.last().expect("at least one stage"), preds))
    }
}
