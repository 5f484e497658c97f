//! The pipeline commands.
//!
//! Run directory layout:
//!
//! ```text
//! <output.dir>/
//!   checkpoint.cstk   model.toml   train.log
//!   pred_<part>.pred  pred_<part>.pred.manifest  eval_<part>.txt
//!   member_00/ ...    (bag, boost)
//!   stacker.cstk  stacker.toml  stack.log   (stack)
//!   submission.csv                          (submit)
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use chainstack::ensemble::{
    boosting_update, bootstrap_sample, fill_missing_errors, read_predictions, train_stacker, write_predictions,
    BoostError, PredManifest, SampleWeights, StackData, StackShape, StackerConfig, StackerParams,
};
use chainstack::ingest::{
    export_parts, load_part, quantize_in_place, scan_dir, synth_generate, DecodeOptions, Example, FeatureMode, Part,
};
use chainstack::metrics::{evaluate, perr_errors, EvalReport, PredictionMatrix};
use chainstack::models::{predict, train, EvalSet, InputDims, Model, ModelConfig, TrainConfig, TrainSet};
use chainstack::tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::checkpoint_io::{load_into, save_checkpoint, write_atomic};
use crate::config::{ExperimentConfig, ModelFile};
use crate::submission::write_submission;
use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Command {
    Synth,
    Split,
    Train,
    Predict,
    Eval,
    Bag,
    Boost,
    CascadeTrain,
    DistillTrain,
    Stack,
    Submit,
}

pub const CHECKPOINT: &str = "checkpoint.cstk";
pub const MODEL_FILE: &str = "model.toml";
pub const TRAIN_LOG: &str = "train.log";
pub const STACKER: &str = "stacker.cstk";
pub const STACKER_FILE: &str = "stacker.toml";
pub const SUBMISSION: &str = "submission.csv";

pub fn pred_path(dir: &Path, part: Part) -> PathBuf {
    dir.join(format!("pred_{part}.pred"))
}

pub fn eval_path(dir: &Path, part: Part) -> PathBuf {
    dir.join(format!("eval_{part}.txt"))
}

pub fn member_dir(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("member_{i:02}"))
}

/// Runs one command; `out` receives short progress lines.
pub fn run(cmd: Command, config: &Path, out: &mut dyn FnMut(&str)) -> Result<(), CliError> {
    let cfg = ExperimentConfig::load(config)?;
    match cmd {
        Command::Synth => synth(&cfg, out),
        Command::Split => split(&cfg, out),
        Command::Train => train_single(&cfg, Variant::Plain, out),
        Command::CascadeTrain => train_single(&cfg, Variant::Cascade, out),
        Command::DistillTrain => train_single(&cfg, Variant::Distill, out),
        Command::Predict => predict_cmd(&cfg, out),
        Command::Eval => eval_cmd(&cfg, out),
        Command::Bag => bag(&cfg, out),
        Command::Boost => boost(&cfg, out),
        Command::Stack => stack(&cfg, out),
        Command::Submit => submit(&cfg, out),
    }
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    write_atomic(path, text.as_bytes())
}

fn lines_to_text(lines: &[String]) -> String {
    let mut s = lines.join("\n");
    s.push('\n');
    s
}

fn mode_for(model: &ModelConfig) -> FeatureMode {
    if model.needs_frames() {
        FeatureMode::Frame
    } else {
        FeatureMode::Video
    }
}

fn load(cfg: &ExperimentConfig, part: Part, mode: FeatureMode) -> Result<Vec<Example>, CliError> {
    let d = &cfg.dataset;
    let opts = DecodeOptions { mode, num_labels: d.num_labels, max_frames: d.max_frames };
    Ok(load_part(&d.mode_dir(mode), part, &opts, &d.quantization)?)
}

fn labels_of(examples: &[Example]) -> Vec<Vec<usize>> {
    examples.iter().map(|e| e.labels.clone()).collect()
}

/// Video-level features `[N, D_v + D_a]`.
fn mean_features(examples: &[Example]) -> Result<Tensor, CliError> {
    let rows: Vec<Vec<f64>> = examples
        .iter()
        .map(|e| {
            e.mean_features()
                .map(|v| v.concat())
                .ok_or_else(|| CliError::Invalid(format!("example {} has no features", e.video_id)))
        })
        .collect::<Result<_, _>>()?;
    Tensor::from_rows(&rows).map_err(|e| CliError::Invalid(e.to_string()))
}

fn synth(cfg: &ExperimentConfig, out: &mut dyn FnMut(&str)) -> Result<(), CliError> {
    let d = &cfg.dataset;
    let mut ds = synth_generate(&d.synth_spec())?;
    for ex in &mut ds.examples {
        quantize_in_place(ex, &d.quantization);
    }
    let parts: Vec<(Part, &[Example])> = d.parts.ranges().into_iter().map(|(p, r)| (p, &ds.examples[r])).collect();
    for mode in [FeatureMode::Video, FeatureMode::Frame] {
        let dir = d.mode_dir(mode);
        if dir.exists() {
            for entry in std::fs::read_dir(&dir).map_err(|e| CliError::io(&dir, e))? {
                let path = entry.map_err(|e| CliError::io(&dir, e))?.path();
                if path.extension().is_some_and(|x| x == "tfrecord") {
                    std::fs::remove_file(&path).map_err(|e| CliError::io(&path, e))?;
                }
            }
        }
        let files = export_parts(&dir, &parts, mode, &d.quantization, d.examples_per_shard)?;
        out(&format!("wrote {} {mode:?} shards to {}", files.len(), dir.display()));
    }
    for (p, ex) in &parts {
        let positives: usize = ex.iter().map(|e| e.labels.len()).sum();
        out(&format!("part={p} examples={} positives={positives}", ex.len()));
    }
    Ok(())
}

fn split(cfg: &ExperimentConfig, out: &mut dyn FnMut(&str)) -> Result<(), CliError> {
    let mut any = false;
    for mode in [FeatureMode::Video, FeatureMode::Frame] {
        let dir = cfg.dataset.mode_dir(mode);
        if !dir.is_dir() {
            continue;
        }
        any = true;
        let report = scan_dir(&dir)?;
        out(&format!("dir={}", dir.display()));
        for s in &report.parts {
            out(&format!("part={} files={}", s.part, s.files.len()));
            for f in &s.files {
                out(&format!("  {f}"));
            }
        }
        for r in &report.rejects {
            out(&format!("unclassified={r}"));
        }
    }
    if !any {
        return Err(CliError::Invalid(format!("no video/ or frame/ directory under {}", cfg.dataset.dir.display())));
    }
    Ok(())
}

/// Inputs that only some training runs have.
#[derive(Default)]
struct Extras<'a> {
    soft: Option<&'a PredictionMatrix>,
    weights: Option<&'a [f64]>,
    /// Averaged donor predictions per part.
    cascade: Option<&'a BTreeMap<Part, PredictionMatrix>>,
}

impl Extras<'_> {
    fn cascade(&self, part: Part) -> Result<Option<&PredictionMatrix>, CliError> {
        match self.cascade {
            None => Ok(None),
            Some(m) => m
                .get(&part)
                .map(Some)
                .ok_or_else(|| CliError::Invalid(format!("cascade donors have no {part} predictions"))),
        }
    }
}

struct Fitted {
    model: Model,
    report: chainstack::models::TrainReport,
}

#[allow(clippy::too_many_arguments)]
fn fit(
    cfg: &ExperimentConfig,
    model_cfg: &ModelConfig,
    dims: InputDims,
    seed: u64,
    train_ex: &[Example],
    valid_ex: &[Example],
    extras: &Extras,
    dir: &Path,
) -> Result<Fitted, CliError> {
    create_dir(dir)?;
    let mut model = Model::new(model_cfg.clone(), dims, seed)?;
    let tcfg = TrainConfig { seed, top_k: cfg.output.top_k, ..cfg.training.clone() };
    let set = TrainSet { examples: train_ex, soft: extras.soft, cascade: extras.cascade(Part::Train1)?, weights: extras.weights };
    let valid = EvalSet { examples: valid_ex, cascade: extras.cascade(Part::Validate1)? };
    let mut lines = vec![format!("model={} params={} seed={seed} train={} valid={}", model_cfg.name(), model.num_params(), train_ex.len(), valid_ex.len())];
    let report = train(&mut model, &tcfg, &set, Some(&valid), &mut |l| lines.push(l.to_string()))?;
    write_text(&dir.join(TRAIN_LOG), &lines_to_text(&lines))?;
    save_checkpoint(&dir.join(CHECKPOINT), &model.params)?;
    write_text(&dir.join(MODEL_FILE), &ModelFile { dims, model: model_cfg.clone() }.to_toml())?;
    Ok(Fitted { model, report })
}

/// Writes the evaluation file when the part has positives.
fn write_eval(dir: &Path, part: Part, pred: &PredictionMatrix, examples: &[Example], top_k: usize) -> Result<Option<EvalReport>, CliError> {
    let labels = labels_of(examples);
    if labels.iter().all(Vec::is_empty) {
        return Ok(None);
    }
    let report = evaluate(pred, &labels, top_k)?;
    write_text(&eval_path(dir, part), &report.to_kv())?;
    Ok(Some(report))
}

fn save_part(
    dir: &Path,
    part: Part,
    pred: &PredictionMatrix,
    examples: &[Example],
    model: &str,
    checkpoint: &str,
    top_k: usize,
    out: &mut dyn FnMut(&str),
) -> Result<(), CliError> {
    let report = write_eval(dir, part, pred, examples, top_k)?;
    let manifest = PredManifest {
        model: model.to_string(),
        checkpoint: checkpoint.to_string(),
        part: part.to_string(),
        gap: report.as_ref().map(|r| r.gap),
    };
    write_predictions(&pred_path(dir, part), pred, &manifest)?;
    match report {
        Some(r) => out(&format!("{} {part}: {r}", dir.display())),
        None => out(&format!("{} {part}: {} rows", dir.display(), pred.rows())),
    }
    Ok(())
}

fn predict_parts(
    cfg: &ExperimentConfig,
    model: &Model,
    dir: &Path,
    parts: &[(Part, Vec<Example>)],
    extras: &Extras,
    out: &mut dyn FnMut(&str),
) -> Result<BTreeMap<Part, PredictionMatrix>, CliError> {
    let mut preds = BTreeMap::new();
    let ckpt = dir.join(CHECKPOINT);
    for (part, ex) in parts {
        let pred = predict(model, ex, extras.cascade(*part)?, cfg.training.batch_size)?;
        save_part(dir, *part, &pred, ex, model.config.name(), &ckpt.display().to_string(), cfg.output.top_k, out)?;
        preds.insert(*part, pred);
    }
    Ok(preds)
}

fn load_parts(cfg: &ExperimentConfig, mode: FeatureMode) -> Result<Vec<(Part, Vec<Example>)>, CliError> {
    cfg.output.predict_parts.iter().map(|&p| Ok((p, load(cfg, p, mode)?))).collect()
}

/// Element-wise mean of donor prediction files for each needed part.
fn donor_average(cfg: &ExperimentConfig, parts: &[Part]) -> Result<BTreeMap<Part, PredictionMatrix>, CliError> {
    let donors = &cfg.ensemble.donors;
    if donors.is_empty() {
        return Err(CliError::Config { path: "ensemble.donors".into(), message: "cascade needs at least one donor run".into() });
    }
    let mut out = BTreeMap::new();
    for &part in parts {
        let mats = donors.iter().map(|d| Ok(read_predictions(&pred_path(d, part))?)).collect::<Result<Vec<_>, CliError>>()?;
        out.insert(part, average(&mats)?);
    }
    Ok(out)
}

fn average(mats: &[PredictionMatrix]) -> Result<PredictionMatrix, CliError> {
    let first = mats.first().ok_or_else(|| CliError::Invalid("nothing to average".into()))?;
    if mats.iter().any(|m| m.rows() != first.rows() || m.num_labels() != first.num_labels()) {
        return Err(CliError::Invalid("prediction matrices differ in shape".into()));
    }
    let k = mats.len() as f64;
    let values = (0..first.values().len())
        .map(|i| (mats.iter().map(|m| m.values()[i]).sum::<f64>() / k).clamp(0.0, 1.0))
        .collect();
    Ok(PredictionMatrix::new(first.rows(), first.num_labels(), values)?)
}

#[derive(Clone, Copy, PartialEq)]
enum Variant {
    Plain,
    Cascade,
    Distill,
}

fn train_single(cfg: &ExperimentConfig, variant: Variant, out: &mut dyn FnMut(&str)) -> Result<(), CliError> {
    let model_cfg = cfg.model()?;
    let mode = mode_for(model_cfg);
    let train_ex = load(cfg, Part::Train1, mode)?;
    let valid_ex = load(cfg, Part::Validate1, mode)?;
    let parts = load_parts(cfg, mode)?;
    let dir = &cfg.output.dir;

    let mut needed = vec![Part::Train1, Part::Validate1];
    needed.extend(parts.iter().map(|(p, _)| *p));
    needed.sort();
    needed.dedup();
    let cascade = match variant {
        Variant::Cascade => Some(donor_average(cfg, &needed)?),
        _ => None,
    };
    let soft = match variant {
        Variant::Distill => {
            let src = cfg.ensemble.soft_target.as_ref().ok_or_else(|| CliError::Config {
                path: "ensemble.soft_target".into(),
                message: "distillation needs a soft-target run".into(),
            })?;
            if cfg.training.lambda == 0.0 {
                return Err(CliError::Config { path: "training.lambda".into(), message: "distillation needs lambda > 0".into() });
            }
            Some(read_predictions(&pred_path(src, Part::Train1))?)
        }
        _ => None,
    };
    let dims = cfg.input_dims(if variant == Variant::Cascade { cfg.ensemble.cascade_dim } else { 0 });
    let extras = Extras { soft: soft.as_ref(), weights: None, cascade: cascade.as_ref() };
    let fitted = fit(cfg, model_cfg, dims, cfg.training.seed, &train_ex, &valid_ex, &extras, dir)?;
    out(&format!(
        "{}: params={} steps={} best_step={} valid_gap={}",
        dir.display(),
        fitted.model.num_params(),
        fitted.report.steps,
        fitted.report.best_step,
        fitted.report.best_gap.map_or("-".into(), |g| format!("{g:.6}"))
    ));
    predict_parts(cfg, &fitted.model, dir, &parts, &extras, out)?;
    Ok(())
}

fn predict_cmd(cfg: &ExperimentConfig, out: &mut dyn FnMut(&str)) -> Result<(), CliError> {
    let dir = &cfg.output.dir;
    let mf_path = dir.join(MODEL_FILE);
    let mf = ModelFile::parse(&std::fs::read_to_string(&mf_path).map_err(|e| CliError::io(&mf_path, e))?)?;
    let mut model = Model::new(mf.model.clone(), mf.dims, 0)?;
    load_into(&dir.join(CHECKPOINT), &mut model.params)?;
    let parts = load_parts(cfg, mode_for(&mf.model))?;
    let cascade = if mf.dims.cascade > 0 {
        Some(donor_average(cfg, &parts.iter().map(|(p, _)| *p).collect::<Vec<_>>())?)
    } else {
        None
    };
    let extras = Extras { cascade: cascade.as_ref(), ..Default::default() };
    predict_parts(cfg, &model, dir, &parts, &extras, out)?;
    Ok(())
}

fn eval_cmd(cfg: &ExperimentConfig, out: &mut dyn FnMut(&str)) -> Result<(), CliError> {
    let dir = &cfg.output.dir;
    let mut found = 0;
    for &part in &cfg.output.predict_parts {
        let path = pred_path(dir, part);
        if !path.exists() {
            continue;
        }
        found += 1;
        let pred = read_predictions(&path)?;
        let ex = load(cfg, part, FeatureMode::Video)?;
        if pred.rows() != ex.len() {
            return Err(CliError::Invalid(format!("{}: {} rows for {} {part} examples", path.display(), pred.rows(), ex.len())));
        }
        match write_eval(dir, part, &pred, &ex, cfg.output.top_k)? {
            Some(r) => out(&format!("{part}: {r}")),
            None => out(&format!("{part}: no labels")),
        }
    }
    if found == 0 {
        return Err(CliError::Invalid(format!("no prediction files in {}", dir.display())));
    }
    Ok(())
}

/// Writes the mean of the members' predictions at the top of the run.
fn write_member_average(
    cfg: &ExperimentConfig,
    dir: &Path,
    member_preds: &[BTreeMap<Part, PredictionMatrix>],
    parts: &[(Part, Vec<Example>)],
    name: &str,
    out: &mut dyn FnMut(&str),
) -> Result<(), CliError> {
    for (part, ex) in parts {
        let mats: Vec<PredictionMatrix> = member_preds.iter().map(|m| m[part].clone()).collect();
        let avg = average(&mats)?;
        save_part(dir, *part, &avg, ex, name, &format!("{} members", mats.len()), cfg.output.top_k, out)?;
    }
    Ok(())
}

fn bag(cfg: &ExperimentConfig, out: &mut dyn FnMut(&str)) -> Result<(), CliError> {
    let model_cfg = cfg.model()?;
    let mode = mode_for(model_cfg);
    let train_ex = load(cfg, Part::Train1, mode)?;
    let valid_ex = load(cfg, Part::Validate1, mode)?;
    let parts = load_parts(cfg, mode)?;
    let dir = &cfg.output.dir;
    let mut member_preds = Vec::new();
    for i in 0..cfg.ensemble.members {
        let seed = cfg.training.seed.wrapping_add(i as u64);
        let sample: Vec<Example> = bootstrap_sample(train_ex.len(), seed).into_iter().map(|j| train_ex[j].clone()).collect();
        let mdir = member_dir(dir, i);
        let fitted = fit(cfg, model_cfg, cfg.input_dims(0), seed, &sample, &valid_ex, &Extras::default(), &mdir)?;
        out(&format!("member {i}: best_step={} valid_gap={:?}", fitted.report.best_step, fitted.report.best_gap));
        member_preds.push(predict_parts(cfg, &fitted.model, &mdir, &parts, &Extras::default(), out)?);
    }
    write_member_average(cfg, dir, &member_preds, &parts, "bag", out)
}

fn boost(cfg: &ExperimentConfig, out: &mut dyn FnMut(&str)) -> Result<(), CliError> {
    let model_cfg = cfg.model()?;
    let mode = mode_for(model_cfg);
    let train_ex = load(cfg, Part::Train1, mode)?;
    let valid_ex = load(cfg, Part::Validate1, mode)?;
    let parts = load_parts(cfg, mode)?;
    let train_labels = labels_of(&train_ex);
    let dir = &cfg.output.dir;
    let e = &cfg.ensemble;
    let mut w = SampleWeights::uniform(train_ex.len());
    let mut member_preds = Vec::new();
    let mut log = Vec::new();
    for k in 0..e.members {
        let seed = cfg.training.seed.wrapping_add(k as u64);
        let weights = w.training_weights(e.boost_clip, e.drop_at_ceiling);
        let extras = Extras { weights: Some(&weights), ..Default::default() };
        let mdir = member_dir(dir, k);
        let fitted = fit(cfg, model_cfg, cfg.input_dims(0), seed, &train_ex, &valid_ex, &extras, &mdir)?;
        member_preds.push(predict_parts(cfg, &fitted.model, &mdir, &parts, &Extras::default(), out)?);
        let train_pred = predict(&fitted.model, &train_ex, None, cfg.training.batch_size)?;
        let err = fill_missing_errors(&perr_errors(&train_pred, &train_labels)?);
        let max_w = w.w.iter().cloned().fold(0.0, f64::max);
        log.push(format!("round={k} mean_err={:.6} max_weight={max_w:.6}", err.iter().sum::<f64>() / err.len() as f64));
        if k + 1 == e.members {
            break;
        }
        match boosting_update(&w, &err, e.boost_alpha, e.boost_clip) {
            Ok(next) => w = next,
            Err(BoostError::Terminated { err_k }) => {
                log.push(format!("round={k} terminated err_k={err_k}"));
                out(&format!("boosting stopped after round {k}: weighted error {err_k}"));
                break;
            }
            Err(other) => return Err(CliError::Invalid(other.to_string())),
        }
    }
    create_dir(dir)?;
    write_text(&dir.join("boost.log"), &lines_to_text(&log))?;
    write_member_average(cfg, dir, &member_preds, &parts, "boost", out)
}

/// Stacker description saved next to its parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StackerFile {
    pub shape: StackShape,
    pub stacker: StackerConfig,
    pub members: Vec<PathBuf>,
}

fn stack(cfg: &ExperimentConfig, out: &mut dyn FnMut(&str)) -> Result<(), CliError> {
    let members = &cfg.ensemble.stack_members;
    if members.is_empty() {
        return Err(CliError::Config { path: "ensemble.stack_members".into(), message: "stacking needs member runs".into() });
    }
    let read = |part: Part| -> Result<Vec<PredictionMatrix>, CliError> {
        members.iter().map(|m| Ok(read_predictions(&pred_path(m, part))?)).collect()
    };
    let train_ex = load(cfg, Part::Train2, FeatureMode::Video)?;
    let valid_ex = load(cfg, Part::Validate2, FeatureMode::Video)?;
    let (train_p, valid_p) = (read(Part::Train2)?, read(Part::Validate2)?);
    let (train_x, valid_x) = (mean_features(&train_ex)?, mean_features(&valid_ex)?);
    let (train_l, valid_l) = (labels_of(&train_ex), labels_of(&valid_ex));
    let train = StackData { preds: &train_p, xbar: Some(&train_x), labels: &train_l };
    let valid = StackData { preds: &valid_p, xbar: Some(&valid_x), labels: &valid_l };
    let scfg = StackerConfig { top_k: cfg.output.top_k, ..cfg.ensemble.stacker.clone() };
    let mut lines = Vec::new();
    let (params, report) = train_stacker(&scfg, &train, Some(&valid), &mut |l| lines.push(l.to_string()))?;
    let dir = &cfg.output.dir;
    create_dir(dir)?;
    write_text(&dir.join("stack.log"), &lines_to_text(&lines))?;
    save_checkpoint(&dir.join(STACKER), &params.params)?;
    let file = StackerFile { shape: params.shape, stacker: scfg.clone(), members: members.clone() };
    write_text(&dir.join(STACKER_FILE), &toml::to_string(&file).expect("stacker description serializes"))?;
    out(&format!("stacker mode={:?} steps={} best_step={} validate2_gap={:?}", scfg.mode, report.steps, report.best_step, report.best_gap));
    let name = format!("stack-{:?}", scfg.mode).to_lowercase();
    let ckpt = dir.join(STACKER).display().to_string();
    for &part in &cfg.output.predict_parts {
        if members.iter().any(|m| !pred_path(m, part).exists()) {
            continue;
        }
        let ex = load(cfg, part, FeatureMode::Video)?;
        let xbar = mean_features(&ex)?;
        let pred = params.combine(&read(part)?, Some(&xbar))?;
        save_part(dir, part, &pred, &ex, &name, &ckpt, cfg.output.top_k, out)?;
    }
    Ok(())
}

/// Rebuilds a saved stacker from its run directory.
pub fn load_stacker(dir: &Path) -> Result<(StackerFile, StackerParams), CliError> {
    let path = dir.join(STACKER_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    let file: StackerFile = toml::from_str(&text).map_err(|e| CliError::Config { path: path.display().to_string(), message: e.to_string() })?;
    let mut params = StackerParams::from_config(&file.stacker, file.shape)?;
    load_into(&dir.join(STACKER), &mut params.params)?;
    Ok((file, params))
}

fn submit(cfg: &ExperimentConfig, out: &mut dyn FnMut(&str)) -> Result<(), CliError> {
    let dir = &cfg.output.dir;
    let pred = read_predictions(&pred_path(dir, Part::Test))?;
    let ex = load(cfg, Part::Test, FeatureMode::Video)?;
    let ids: Vec<String> = ex.iter().map(|e| e.video_id.clone()).collect();
    let path = dir.join(SUBMISSION);
    write_submission(&pred, &ids, cfg.output.top_k, &path)?;
    out(&format!("wrote {} ({} videos)", path.display(), ids.len()));
    Ok(())
}
