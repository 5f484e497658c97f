//! Stacking: simple, linear, class-wise and attention-weighted averaging of
//! member predictions, and the stacker training loop.
//!
//! Every mode produces per-(example, label) weights on the simplex over
//! members and combines as `p_1 + Σ_m w_m (p_m - p_1)`. That is the convex
//! combination `Σ_m w_m p_m` rewritten so that identical members come out
//! unchanged to the last bit, whatever the weights.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{global_average_precision, PredictionMatrix};
use crate::models::layers::Builder;
use crate::tensor::{adam_step, grad_check, AdamConfig, AdamState, Bindings, Graph, ParamId, ParamStore, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum StackError {
    #[error("stacking needs at least one member")]
    NoMembers,
    #[error("{0}")]
    Shape(String),
    #[error("stacker loss is not finite at step {step}")]
    Diverged { step: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StackMode {
    #[default]
    Simple,
    Linear,
    Classwise,
    Attention,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StackerConfig {
    pub mode: StackMode,
    /// Low-rank components mixed by the attention layer.
    pub groups: usize,
    /// Rank of each component.
    pub rank: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub eval_every: usize,
    pub patience: usize,
    pub seed: u64,
    pub top_k: usize,
}

impl Default for StackerConfig {
    fn default() -> Self {
        Self {
            mode: StackMode::Simple,
            groups: 16,
            rank: 4,
            learning_rate: 0.01,
            batch_size: 256,
            max_steps: 600,
            eval_every: 50,
            patience: 5,
            seed: 0,
            top_k: 20,
        }
    }
}

/// Widths a stacker is built for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StackShape {
    pub members: usize,
    pub labels: usize,
    /// Width of the mean frame feature read by the attention layer.
    pub features: usize,
}

#[derive(Clone, Debug)]
enum Layout {
    Simple,
    Linear { logits: ParamId },
    Classwise { logits: ParamId },
    Attention { v: ParamId, a_mat: ParamId, b_mat: ParamId, a: ParamId, b: ParamId, c: ParamId, groups: usize },
}

/// Mode, widths and trainable parameters of a stacker.
#[derive(Clone, Debug)]
pub struct StackerParams {
    pub mode: StackMode,
    pub shape: StackShape,
    pub params: ParamStore,
    layout: Layout,
}

impl StackerParams {
    /// Linear and class-wise logits start at 0 (uniform weights). The
    /// attention layer `V` is Xavier, the low-rank factors `A_k, B_k` are
    /// small uniform and `a_k, b_k, c_k` start at 0.
    pub fn new(mode: StackMode, shape: StackShape, groups: usize, rank: usize, seed: u64) -> Result<Self, StackError> {
        if shape.members == 0 {
            return Err(StackError::NoMembers);
        }
        if shape.labels == 0 {
            return Err(StackError::Shape("stacker needs at least one label".into()));
        }
        if mode == StackMode::Attention && (groups == 0 || rank == 0) {
            return Err(StackError::Shape("attention stacker needs groups > 0 and rank > 0".into()));
        }
        let (m, l) = (shape.members, shape.labels);
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut bld = Builder::new(&mut params, &mut rng);
        let layout = match mode {
            StackMode::Simple => Layout::Simple,
            StackMode::Linear => Layout::Linear { logits: bld.zeros("linear/logits", &[m]) },
            StackMode::Classwise => Layout::Classwise { logits: bld.zeros("classwise/logits", &[m, l]) },
            StackMode::Attention => Layout::Attention {
                v: bld.weight("attention/v", shape.features + l, groups),
                a_mat: bld.uniform("attention/a_mat", &[groups, rank, m], 0.01),
                b_mat: bld.uniform("attention/b_mat", &[groups, rank, l], 0.01),
                a: bld.zeros("attention/a", &[groups, m]),
                b: bld.zeros("attention/b", &[groups, l]),
                c: bld.zeros("attention/c", &[groups]),
                groups,
            },
        };
        Ok(Self { mode, shape, params, layout })
    }

    pub fn from_config(cfg: &StackerConfig, shape: StackShape) -> Result<Self, StackError> {
        Self::new(cfg.mode, shape, cfg.groups, cfg.rank, cfg.seed)
    }

    /// Sets `e = 0` for the attention stacker (uniform weights).
    pub fn zero_components(&mut self) {
        if let Layout::Attention { a_mat, b_mat, a, b, c, .. } = self.layout {
            for id in [a_mat, b_mat, a, b, c] {
                self.params.get_mut(id).data_mut().fill(0.0);
            }
        }
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    /// Member weights broadcastable to `[B, M, L]`.
    pub fn weights(&self, g: &mut Graph, p: &Bindings, preds: &[Var], xbar: Option<Var>) -> crate::tensor::Result<Var> {
        let (m, l) = (self.shape.members, self.shape.labels);
        match &self.layout {
            Layout::Simple => Ok(g.constant(Tensor::full(&[1, m, 1], 1.0 / m as f64))),
            Layout::Linear { logits } => {
                let w = g.softmax(p[*logits], 0)?;
                g.reshape(w, &[1, m, 1])
            }
            Layout::Classwise { logits } => {
                let w = g.softmax(p[*logits], 0)?;
                g.reshape(w, &[1, m, l])
            }
            Layout::Attention { v, a_mat, b_mat, a, b, c, groups } => {
                let k = *groups;
                let x = xbar.ok_or_else(|| TensorError::InvalidArgument {
                    op: "attention_stack_forward",
                    reason: "mean frame features required".into(),
                })?;
                let bsz = g.shape(preds[0])[0];
                let mut pbar = preds[0];
                for &q in &preds[1..] {
                    pbar = g.add(pbar, q)?;
                }
                let pbar = g.scale(pbar, 1.0 / m as f64)?;
                let xp = g.concat(&[x, pbar], 1)?;
                let logits = g.matmul(xp, p[*v])?;
                let alpha = g.softmax(logits, 1)?;
                // E_k = A_kᵀ B_k + a_k b_kᵀ + c_k, stacked as [K, M·L]
                let at = g.transpose(p[*a_mat])?;
                let low = g.matmul(at, p[*b_mat])?;
                let ac = g.reshape(p[*a], &[k, m, 1])?;
                let br = g.reshape(p[*b], &[k, 1, l])?;
                let outer = g.matmul(ac, br)?;
                let cc = g.reshape(p[*c], &[k, 1, 1])?;
                let e = g.add(low, outer)?;
                let e = g.add(e, cc)?;
                let e = g.reshape(e, &[k, m * l])?;
                let e = g.matmul(alpha, e)?;
                let e = g.reshape(e, &[bsz, m, l])?;
                g.softmax(e, 1)
            }
        }
    }

    /// Stacked `[B, L]` output from member predictions `[B, L]` each.
    pub fn forward(&self, g: &mut Graph, p: &Bindings, preds: &[Var], xbar: Option<Var>) -> crate::tensor::Result<Var> {
        let (m, l) = (self.shape.members, self.shape.labels);
        if preds.len() != m {
            return Err(TensorError::InvalidArgument {
                op: "stack",
                reason: format!("{} member predictions for a {m}-member stacker", preds.len()),
            });
        }
        let bsz = g.shape(preds[0])[0];
        let first = preds[0];
        let mut deltas = Vec::with_capacity(m);
        for &q in preds {
            if g.shape(q) != [bsz, l] {
                return Err(TensorError::ShapeMismatch { op: "stack", lhs: g.shape(q).to_vec(), rhs: vec![bsz, l] });
            }
            let d = g.sub(q, first)?;
            deltas.push(g.reshape(d, &[bsz, 1, l])?);
        }
        let delta = g.concat(&deltas, 1)?;
        let w = self.weights(g, p, preds, xbar)?;
        let wd = g.mul(w, delta)?;
        let s = g.sum(wd, 1)?;
        g.add(first, s)
    }

    fn check(&self, preds: &[PredictionMatrix], xbar: Option<&Tensor>) -> Result<usize, StackError> {
        let first = preds.first().ok_or(StackError::NoMembers)?;
        let n = first.rows();
        if preds.len() != self.shape.members {
            return Err(StackError::Shape(format!(
                "{} members given to a {}-member stacker",
                preds.len(),
                self.shape.members
            )));
        }
        if let Some(bad) = preds.iter().position(|p| p.rows() != n || p.num_labels() != self.shape.labels) {
            return Err(StackError::Shape(format!(
                "member {bad} is {}x{}, expected {n}x{}",
                preds[bad].rows(),
                preds[bad].num_labels(),
                self.shape.labels
            )));
        }
        if self.mode == StackMode::Attention {
            match xbar {
                Some(x) if x.shape() == [n, self.shape.features] => {}
                Some(x) => {
                    return Err(StackError::Shape(format!(
                        "mean frame features are {:?}, expected [{n}, {}]",
                        x.shape(),
                        self.shape.features
                    )))
                }
                None => return Err(StackError::Shape("attention stacking needs mean frame features".into())),
            }
        }
        Ok(n)
    }

    /// Stacks whole prediction matrices; output clamped to `[0, 1]`.
    pub fn combine(&self, preds: &[PredictionMatrix], xbar: Option<&Tensor>) -> Result<PredictionMatrix, StackError> {
        let n = self.check(preds, xbar)?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let vars = place_members(&mut g, preds, None);
        let x = xbar.filter(|_| self.mode == StackMode::Attention).map(|x| g.constant(x.clone()));
        let out = self.forward(&mut g, &p, &vars, x)?;
        let values = g.value(out).data().iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Ok(PredictionMatrix::new(n, self.shape.labels, values).expect("clamped"))
    }

    /// Per-(example, member, label) weights, `[N, M, L]`.
    pub fn member_weights(&self, preds: &[PredictionMatrix], xbar: Option<&Tensor>) -> Result<Tensor, StackError> {
        let n = self.check(preds, xbar)?;
        let (m, l) = (self.shape.members, self.shape.labels);
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let vars = place_members(&mut g, preds, None);
        let x = xbar.filter(|_| self.mode == StackMode::Attention).map(|x| g.constant(x.clone()));
        let w = self.weights(&mut g, &p, &vars, x)?;
        let zeros = g.constant(Tensor::zeros(&[n, m, l]));
        let full = g.add(zeros, w)?;
        Ok(g.value(full).clone())
    }
}

impl StackerParams {
    /// Worst relative error between reverse-mode and central-difference
    /// gradients of the stacking cross-entropy.
    pub fn gradient_error(
        &self,
        preds: &[PredictionMatrix],
        xbar: Option<&Tensor>,
        labels: &[Vec<usize>],
        h: f64,
    ) -> Result<f64, StackError> {
        let n = self.check(preds, xbar)?;
        let data = StackData { preds, xbar, labels };
        let idx: Vec<usize> = (0..n).collect();
        let target = data.label_rows(&idx, self.shape.labels);
        let attention = self.mode == StackMode::Attention;
        Ok(grad_check(
            |g, vars| {
                let p = Bindings::from_vars(vars.to_vec());
                let members = place_members(g, preds, None);
                let x = xbar.filter(|_| attention).map(|x| g.constant(x.clone()));
                let out = self.forward(g, &p, &members, x)?;
                let t = g.constant(target.clone());
                let ce = g.bce(out, t)?;
                g.mean_all(ce)
            },
            self.params.values(),
            h,
        )?)
    }
}

fn place_members(g: &mut Graph, preds: &[PredictionMatrix], rows: Option<&[usize]>) -> Vec<Var> {
    preds
        .iter()
        .map(|p| {
            let t = match rows {
                Some(idx) => {
                    let s = p.select(idx);
                    Tensor::new(vec![idx.len(), s.num_labels()], s.into_values())
                }
                None => Tensor::new(vec![p.rows(), p.num_labels()], p.values().to_vec()),
            };
            g.constant(t.expect("consistent shape"))
        })
        .collect()
}

/// Simple, linear or class-wise stacking.
pub fn stack_combine(preds: &[PredictionMatrix], params: &StackerParams) -> Result<PredictionMatrix, StackError> {
    if params.mode == StackMode::Attention {
        return Err(StackError::Shape("attention stacking needs mean frame features".into()));
    }
    params.combine(preds, None)
}

/// Attention-weighted stacking with `xbar` `[N, F]`.
pub fn attention_stack_forward(
    preds: &[PredictionMatrix],
    xbar: &Tensor,
    params: &StackerParams,
) -> Result<PredictionMatrix, StackError> {
    params.combine(preds, Some(xbar))
}

/// Member predictions, mean frame features and labels for one split.
#[derive(Clone, Copy)]
pub struct StackData<'a> {
    pub preds: &'a [PredictionMatrix],
    pub xbar: Option<&'a Tensor>,
    pub labels: &'a [Vec<usize>],
}

impl StackData<'_> {
    fn label_rows(&self, idx: &[usize], l: usize) -> Tensor {
        let mut t = Tensor::zeros(&[idx.len(), l]);
        for (r, &i) in idx.iter().enumerate() {
            for &c in &self.labels[i] {
                t.data_mut()[r * l + c] = 1.0;
            }
        }
        t
    }

    fn xbar_rows(&self, idx: &[usize]) -> Option<Tensor> {
        self.xbar.map(|x| {
            let f = x.shape()[1];
            let data = idx.iter().flat_map(|&i| x.data()[i * f..(i + 1) * f].iter().copied()).collect();
            Tensor::new(vec![idx.len(), f], data).expect("row gather")
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StackReport {
    pub steps: usize,
    pub best_step: usize,
    pub best_gap: Option<f64>,
}

fn gap_of(params: &StackerParams, data: &StackData, top_k: usize) -> Result<f64, StackError> {
    let out = params.combine(data.preds, data.xbar)?;
    global_average_precision(&out, data.labels, top_k).map_err(|e| StackError::Shape(e.to_string()))
}

/// Fits stacker weights by Adam on mean cross-entropy over `train`, keeping
/// the parameters with the best GAP on `valid`. Simple averaging has
/// nothing to fit and returns at once.
pub fn train_stacker(
    cfg: &StackerConfig,
    train: &StackData,
    valid: Option<&StackData>,
    log: &mut dyn FnMut(&str),
) -> Result<(StackerParams, StackReport), StackError> {
    let first = train.preds.first().ok_or(StackError::NoMembers)?;
    let (n, l) = (first.rows(), first.num_labels());
    if train.labels.len() != n {
        return Err(StackError::Shape(format!("{} label rows for {n} examples", train.labels.len())));
    }
    let features = train.xbar.map_or(0, |x| x.shape().get(1).copied().unwrap_or(0));
    let shape = StackShape { members: train.preds.len(), labels: l, features };
    let mut params = StackerParams::from_config(cfg, shape)?;
    params.check(train.preds, train.xbar)?;
    if let Some(v) = valid {
        params.check(v.preds, v.xbar)?;
    }
    if params.mode == StackMode::Simple || cfg.max_steps == 0 {
        let best_gap = valid.map(|v| gap_of(&params, v, cfg.top_k)).transpose()?;
        return Ok((params, StackReport { steps: 0, best_step: 0, best_gap }));
    }

    let mut adam = AdamState::new(AdamConfig::with_learning_rate(cfg.learning_rate), &params.params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x57ac_0000_0000_0001);
    let eval_every = cfg.eval_every.max(1);
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut stale = 0usize;
    let mut consider = |params: &StackerParams, step: usize, log: &mut dyn FnMut(&str)| -> Result<bool, StackError> {
        let Some(v) = valid else { return Ok(false) };
        let gap = gap_of(params, v, cfg.top_k)?;
        log(&format!("step={step} valid_gap={gap:.6}"));
        match &best {
            Some((b, _, _)) if gap <= *b => stale += 1,
            _ => {
                best = Some((gap, step, params.params.clone()));
                stale = 0;
            }
        }
        Ok(cfg.patience > 0 && stale >= cfg.patience)
    };

    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0usize;
    let mut stop = consider(&params, 0, log)?;
    while !stop && step < cfg.max_steps {
        order.shuffle(&mut rng);
        for idx in order.chunks(cfg.batch_size.max(1)) {
            if step >= cfg.max_steps {
                break;
            }
            let mut g = Graph::new();
            let p = params.params.bind(&mut g, true);
            let vars = place_members(&mut g, train.preds, Some(idx));
            let x = train.xbar_rows(idx).filter(|_| params.mode == StackMode::Attention).map(|x| g.constant(x));
            let out = params.forward(&mut g, &p, &vars, x)?;
            let target = g.constant(train.label_rows(idx, l));
            let ce = g.bce(out, target)?;
            let loss = g.mean_all(ce)?;
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(StackError::Diverged { step });
            }
            g.backward(loss)?;
            let grads = p.grads(&g);
            adam_step(&mut adam, &mut params.params, &grads).map_err(|_| StackError::Diverged { step })?;
            step += 1;
            log(&format!("step={step} loss={value:.6}"));
            if step % eval_every == 0 && consider(&params, step, log)? {
                stop = true;
                break;
            }
        }
    }
    if !stop && step % eval_every != 0 {
        consider(&params, step, log)?;
    }
    let (best_gap, best_step) = match best {
        Some((gap, s, store)) => {
            params.params = store;
            (Some(gap), s)
        }
        None => (None, step),
    };
    log(&format!("best_step={best_step} steps={step}"));
    Ok((params, StackReport { steps: step, best_step, best_gap }))
}
