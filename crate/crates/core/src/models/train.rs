//! Mini-batch Adam training with validation early stopping, and batched
//! inference.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{compute_loss, LossConfig};
use super::net::{Inputs, Model};
use super::ModelError;
use crate::ingest::{batch_plan, make_batch, Batch, Example};
use crate::metrics::{global_average_precision, PredictionMatrix};
use crate::tensor::{adam_step, AdamConfig, AdamState, Graph, ParamStore, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    /// Validate every this many steps (and at step 0).
    pub eval_every: usize,
    /// Evaluations without improvement before stopping; 0 never stops early.
    pub patience: usize,
    pub seed: u64,
    /// Distillation weight on the soft target.
    pub lambda: f64,
    pub aux_share: f64,
    /// When set and a batch's mean loss falls below it, the arg-max
    /// prediction of every example joins its targets.
    pub confident_tag_below: Option<f64>,
    pub top_k: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            batch_size: 128,
            max_steps: 1000,
            eval_every: 100,
            patience: 5,
            seed: 0,
            lambda: 0.0,
            aux_share: 0.15,
            confident_tag_below: None,
            top_k: 20,
        }
    }
}

/// Training examples plus optional per-example side inputs, row-aligned.
#[derive(Clone, Copy, Default)]
pub struct TrainSet<'a> {
    pub examples: &'a [Example],
    /// Ensemble predictions used as the distillation target.
    pub soft: Option<&'a PredictionMatrix>,
    /// Averaged donor predictions for cascade models.
    pub cascade: Option<&'a PredictionMatrix>,
    /// Per-example loss weights (boosting).
    pub weights: Option<&'a [f64]>,
}

#[derive(Clone, Copy, Default)]
pub struct EvalSet<'a> {
    pub examples: &'a [Example],
    pub cascade: Option<&'a PredictionMatrix>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub steps: usize,
    pub best_step: usize,
    /// Validation GAP of the kept parameters (`None` without validation).
    pub best_gap: Option<f64>,
    pub final_loss: f64,
}

fn rows(m: &PredictionMatrix, idx: &[usize]) -> Tensor {
    let sel = m.select(idx);
    Tensor::new(vec![idx.len(), sel.num_labels()], sel.into_values()).expect("consistent shape")
}

fn check_rows(what: &str, m: Option<&PredictionMatrix>, n: usize, labels: usize) -> Result<(), ModelError> {
    match m {
        Some(m) if m.rows() != n || m.num_labels() != labels => Err(ModelError::Config(format!(
            "{what} matrix is {}x{}, expected {n}x{labels}",
            m.rows(),
            m.num_labels()
        ))),
        _ => Ok(()),
    }
}

fn plan(model: &Model, examples: &[Example], batch_size: usize, rng: Option<&mut ChaCha8Rng>) -> Vec<Vec<usize>> {
    if model.needs_frames() {
        return batch_plan(examples, batch_size, rng);
    }
    let mut idx: Vec<usize> = (0..examples.len()).collect();
    if let Some(rng) = rng {
        idx.shuffle(rng);
    }
    idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Confidences for every example, in order.
pub fn predict(
    model: &Model,
    examples: &[Example],
    cascade: Option<&PredictionMatrix>,
    batch_size: usize,
) -> Result<PredictionMatrix, ModelError> {
    let l = model.dims.labels;
    check_rows("cascade", cascade, examples.len(), l)?;
    let mut out = PredictionMatrix::zeros(examples.len(), l);
    for idx in plan(model, examples, batch_size, None) {
        let batch = make_batch(examples, &idx, l).map_err(|e| ModelError::Config(e.to_string()))?;
        let c = cascade.map(|m| rows(m, &idx));
        let probs = model.predict_batch(&batch, c.as_ref())?;
        for (r, &i) in idx.iter().enumerate() {
            let row: Vec<f64> = probs.data()[r * l..(r + 1) * l].iter().map(|v| v.clamp(0.0, 1.0)).collect();
            out.set_row(i, &row).expect("clamped row");
        }
    }
    Ok(out)
}

fn validate(model: &Model, set: &EvalSet, cfg: &TrainConfig) -> Result<f64, ModelError> {
    let pred = predict(model, set.examples, set.cascade, cfg.batch_size)?;
    let labels: Vec<Vec<usize>> = set.examples.iter().map(|e| e.labels.clone()).collect();
    global_average_precision(&pred, &labels, cfg.top_k).map_err(|e| ModelError::Config(e.to_string()))
}

fn step_loss(
    model: &Model,
    batch: &Batch,
    set: &TrainSet,
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
) -> Result<(f64, Vec<Tensor>), ModelError> {
    let idx = &batch.indices;
    let mut g = Graph::new();
    let p = model.params.bind(&mut g, true);
    let cascade = set.cascade.map(|m| rows(m, idx));
    let inputs = Inputs::place(&mut g, batch, cascade.as_ref());
    let out = model.forward(&mut g, &p, &inputs)?;
    let labels = g.constant(batch.labels.clone());
    let soft = set.soft.map(|m| g.constant(rows(m, idx)));
    let weights = set
        .weights
        .map(|w| g.constant(Tensor::vector(idx.iter().map(|&i| w[i]).collect())));
    let mut loss = compute_loss(&mut g, out.probs, labels, &out.stages, soft, weights, loss_cfg)?;
    if let Some(threshold) = cfg.confident_tag_below {
        if g.value(loss).item() < threshold {
            let l = model.dims.labels;
            let mut t = batch.labels.clone();
            let probs = g.value(out.probs).data().to_vec();
            for r in 0..idx.len() {
                let row = &probs[r * l..(r + 1) * l];
                let best = crate::metrics::ranked_labels(row)[0];
                t.data_mut()[r * l + best] = 1.0;
            }
            let tv = g.constant(t);
            loss = compute_loss(&mut g, out.probs, tv, &out.stages, soft, weights, loss_cfg)?;
        }
    }
    let value = g.value(loss).item();
    g.backward(loss)?;
    Ok((value, p.grads(&g)))
}

/// Trains in place. Validates at step 0 and every `eval_every` steps, keeps
/// the best parameters seen and restores them at the end. `log` receives
/// `key=value` lines.
pub fn train(
    model: &mut Model,
    cfg: &TrainConfig,
    set: &TrainSet,
    valid: Option<&EvalSet>,
    log: &mut dyn FnMut(&str),
) -> Result<TrainReport, ModelError> {
    let n = set.examples.len();
    let l = model.dims.labels;
    if n == 0 {
        return Err(ModelError::Config("no training examples".into()));
    }
    check_rows("soft target", set.soft, n, l)?;
    check_rows("cascade", set.cascade, n, l)?;
    if let Some(w) = set.weights {
        if w.len() != n || w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(ModelError::Config("weights must be finite, nonnegative and one per example".into()));
        }
    }
    let loss_cfg = LossConfig { lambda: if set.soft.is_some() { cfg.lambda } else { 0.0 }, aux_share: cfg.aux_share };
    loss_cfg.validate()?;
    let eval_every = cfg.eval_every.max(1);
    let mut adam = AdamState::new(AdamConfig::with_learning_rate(cfg.learning_rate), &model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7a11_0000_0000_0001);

    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut stale = 0usize;
    let mut consider = |model: &Model, step: usize, log: &mut dyn FnMut(&str)| -> Result<bool, ModelError> {
        let Some(v) = valid else { return Ok(false) };
        let gap = validate(model, v, cfg)?;
        log(&format!("step={step} valid_gap={gap:.6}"));
        match &best {
            Some((b, _, _)) if gap <= *b => stale += 1,
            _ => {
                best = Some((gap, step, model.params.clone()));
                stale = 0;
            }
        }
        Ok(cfg.patience > 0 && stale >= cfg.patience)
    };

    let mut step = 0usize;
    let mut last_loss = f64::NAN;
    let mut last_eval = 0usize;
    let mut stop = consider(model, 0, log)?;
    'outer: while !stop && step < cfg.max_steps {
        for idx in plan(model, set.examples, cfg.batch_size, Some(&mut rng)) {
            if step >= cfg.max_steps {
                break 'outer;
            }
            let batch = make_batch(set.examples, &idx, l).map_err(|e| ModelError::Config(e.to_string()))?;
            let (loss, grads) = step_loss(model, &batch, set, cfg, &loss_cfg)?;
            if !loss.is_finite() {
                return Err(ModelError::Diverged { step });
            }
            adam_step(&mut adam, &mut model.params, &grads).map_err(|_| ModelError::Diverged { step })?;
            step += 1;
            last_loss = loss;
            log(&format!("step={step} loss={loss:.6}"));
            if step % eval_every == 0 {
                last_eval = step;
                if consider(model, step, log)? {
                    stop = true;
                    break 'outer;
                }
            }
        }
    }
    if !stop && last_eval != step {
        consider(model, step, log)?;
    }
    let (best_gap, best_step) = match best {
        Some((gap, s, params)) => {
            model.params = params;
            (Some(gap), s)
        }
        None => (None, step),
    };
    log(&format!("best_step={best_step} steps={step}"));
    Ok(TrainReport { steps: step, best_step, best_gap, final_loss: last_loss })
}
