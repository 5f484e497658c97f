//! Cascade layer: an MoE whose input also carries a projection of the
//! averaged predictions of other models.

use crate::models::layers::Builder;
use crate::models::moe::Moe;
use crate::tensor::{Bindings, Graph, ParamId, Result, TensorError, Var};

/// Linear map (no bias) from an averaged `L`-vector to `dim` features.
#[derive(Clone, Debug)]
pub struct CascadeProjection {
    pub labels: usize,
    pub dim: usize,
    /// `[L, dim]`.
    pub w: ParamId,
}

impl CascadeProjection {
    pub fn new(b: &mut Builder, name: &str, labels: usize, dim: usize) -> Self {
        let w = b.weight(&format!("{name}/w"), labels, dim);
        Self { labels, dim, w }
    }

    pub fn num_params(labels: usize, dim: usize) -> usize {
        labels * dim
    }

    /// Projects an already averaged `[B, L]` donor prediction.
    pub fn project(&self, g: &mut Graph, p: &Bindings, avg: Var) -> Result<Var> {
        if g.shape(avg).last() != Some(&self.labels) {
            return Err(TensorError::ShapeMismatch {
                op: "cascade_forward",
                lhs: g.shape(avg).to_vec(),
                rhs: vec![self.labels, self.dim],
            });
        }
        g.matmul(avg, p[self.w])
    }
}

/// Element-wise mean of donor predictions, each `[B, L]`.
pub fn donor_average(g: &mut Graph, donors: &[Var]) -> Result<Var> {
    let Some(&first) = donors.first() else {
        return Err(TensorError::InvalidArgument { op: "cascade_forward", reason: "no donor predictions".into() });
    };
    let mut sum = first;
    for &d in &donors[1..] {
        sum = g.add(sum, d)?;
    }
    if donors.len() == 1 {
        return Ok(sum);
    }
    g.scale(sum, 1.0 / donors.len() as f64)
}

/// `MoE([feature; proj(mean(donors))])`.
pub fn cascade_forward(
    g: &mut Graph,
    p: &Bindings,
    feature: Var,
    donors: &[Var],
    proj: &CascadeProjection,
    moe: &Moe,
) -> Result<Var> {
    let avg = donor_average(g, donors)?;
    let z = proj.project(g, p, avg)?;
    let input = g.concat(&[feature, z], 1)?;
    moe.forward(g, p, input)
}
