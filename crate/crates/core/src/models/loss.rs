//! Training loss: binary cross-entropy with auxiliary stage terms and an
//! optional distillation target.

use crate::tensor::{Graph, Result, TensorError, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// Weight on the soft-target term, in `[0, 1]`.
    pub lambda: f64,
    /// Share of the cross-entropy given to intermediate stages, in `[0, 0.5)`.
    pub aux_share: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda: 0.0, aux_share: 0.15 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(invalid(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if !(0.0..0.5).contains(&self.aux_share) {
            return Err(invalid(format!("aux_share {} outside [0, 0.5)", self.aux_share)));
        }
        Ok(())
    }
}

fn invalid(reason: String) -> TensorError {
    TensorError::InvalidArgument { op: "compute_loss", reason }
}

/// Per-example cross-entropy averaged over labels: `[B]`.
pub fn example_ce(g: &mut Graph, probs: Var, targets: Var) -> Result<Var> {
    if g.shape(probs) != g.shape(targets) || g.shape(probs).len() != 2 {
        return Err(TensorError::ShapeMismatch {
            op: "compute_loss",
            lhs: g.shape(probs).to_vec(),
            rhs: g.shape(targets).to_vec(),
        });
    }
    let ce = g.bce(probs, targets)?;
    g.mean(ce, 1)
}

/// `(1 - aux) ce(final) + aux mean_s ce(stage_s)`, per example.
fn aux_ce(g: &mut Graph, probs: Var, stages: &[Var], targets: Var, aux: f64) -> Result<Var> {
    let main = example_ce(g, probs, targets)?;
    if stages.is_empty() || aux == 0.0 {
        return Ok(main);
    }
    let mut sum = example_ce(g, stages[0], targets)?;
    for &s in &stages[1..] {
        let c = example_ce(g, s, targets)?;
        sum = g.add(sum, c)?;
    }
    let side = g.scale(sum, aux / stages.len() as f64)?;
    let main = g.scale(main, 1.0 - aux)?;
    g.add(main, side)
}

/// Scalar training loss.
///
/// `stages` are intermediate predictions (final excluded). `weights` are
/// per-example multipliers `[B]`, e.g. boosting weights with mean 1.
pub fn compute_loss(
    g: &mut Graph,
    probs: Var,
    labels: Var,
    stages: &[Var],
    soft: Option<Var>,
    weights: Option<Var>,
    cfg: &LossConfig,
) -> Result<Var> {
    cfg.validate()?;
    let mut per = aux_ce(g, probs, stages, labels, cfg.aux_share)?;
    match soft {
        Some(s) if cfg.lambda > 0.0 => {
            let hard = g.scale(per, 1.0 - cfg.lambda)?;
            let st = aux_ce(g, probs, stages, s, cfg.aux_share)?;
            let st = g.scale(st, cfg.lambda)?;
            per = g.add(hard, st)?;
        }
        _ => {}
    }
    if let Some(w) = weights {
        if g.shape(w) != g.shape(per) {
            return Err(TensorError::ShapeMismatch {
                op: "compute_loss",
                lhs: g.shape(per).to_vec(),
                rhs: g.shape(w).to_vec(),
            });
        }
        per = g.mul(per, w)?;
    }
    g.mean(per, 0)
}
