//! Experiment configuration files.
//!
//! A config is TOML with the sections `dataset`, `model`, `training`,
//! `ensemble` and `output`. Relative paths resolve against the directory
//! holding the config file.

use std::path::{Path, PathBuf};

use chainstack::ensemble::StackerConfig;
use chainstack::ingest::{FeatureMode, Part, PartSizes, Quantization, SynthSpec};
use chainstack::models::{InputDims, ModelConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSection,
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub training: TrainConfig,
    #[serde(default)]
    pub ensemble: EnsembleSection,
    pub output: OutputSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    /// Holds `video/` and `frame/` shard directories.
    pub dir: PathBuf,
    pub num_labels: usize,
    pub rgb_dim: usize,
    pub audio_dim: usize,
    pub max_frames: usize,
    pub quantization: Quantization,
    pub parts: PartSizes,
    pub examples_per_shard: usize,
    /// Generator settings for `synth`; its label count, feature widths and
    /// example count come from this section.
    pub synth: SynthSpec,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("data"),
            num_labels: 25,
            rgb_dim: 32,
            audio_dim: 8,
            max_frames: 30,
            quantization: Quantization::default(),
            parts: PartSizes::default(),
            examples_per_shard: 500,
            synth: SynthSpec::default(),
        }
    }
}

impl DatasetSection {
    pub fn mode_dir(&self, mode: FeatureMode) -> PathBuf {
        self.dir.join(match mode {
            FeatureMode::Video => "video",
            FeatureMode::Frame => "frame",
        })
    }

    /// The generator spec with this section's sizes applied.
    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            num_examples: self.parts.total(),
            num_labels: self.num_labels,
            rgb_dim: self.rgb_dim,
            audio_dim: self.audio_dim,
            ..self.synth.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleSection {
    /// Members trained by `bag` and rounds run by `boost`.
    pub members: usize,
    pub boost_alpha: f64,
    pub boost_clip: f64,
    /// Give zero loss weight to examples pinned at the clip ceiling.
    pub drop_at_ceiling: bool,
    /// Width of the cascade projection.
    pub cascade_dim: usize,
    /// Run directories whose predictions feed a cascade model.
    pub donors: Vec<PathBuf>,
    /// Run directory whose train1 predictions are the distillation target.
    pub soft_target: Option<PathBuf>,
    /// Run directories combined by `stack`.
    pub stack_members: Vec<PathBuf>,
    pub stacker: StackerConfig,
}

impl Default for EnsembleSection {
    fn default() -> Self {
        Self {
            members: 8,
            boost_alpha: 1.0,
            boost_clip: 5.0,
            drop_at_ceiling: false,
            cascade_dim: 128,
            donors: Vec::new(),
            soft_target: None,
            stack_members: Vec::new(),
            stacker: StackerConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    /// Run directory.
    pub dir: PathBuf,
    /// Parts that get a prediction file after training.
    pub predict_parts: Vec<Part>,
    pub top_k: usize,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: PathBuf::from("run"), predict_parts: Part::ALL.to_vec(), top_k: 20 }
    }
}

impl ExperimentConfig {
    /// Parses TOML; errors name the offending field path.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let de = toml::Deserializer::parse(text).map_err(|e| CliError::Config { path: String::new(), message: e.to_string() })?;
        let raw: RawConfig = serde_path_to_error::deserialize(de).map_err(path_error(""))?;
        let cfg = Self {
            dataset: raw.dataset,
            model: raw.model.map(parse_model).transpose()?,
            training: raw.training,
            ensemble: raw.ensemble,
            output: raw.output,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve(base);
        Ok(cfg)
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.dataset.dir);
        fix(&mut self.output.dir);
        self.ensemble.donors.iter_mut().for_each(fix);
        self.ensemble.stack_members.iter_mut().for_each(fix);
        if let Some(p) = self.ensemble.soft_target.as_mut() {
            fix(p);
        }
    }

    fn validate(&self) -> Result<(), CliError> {
        let bad = |path: &str, message: String| Err(CliError::Config { path: path.into(), message });
        let d = &self.dataset;
        if d.num_labels == 0 {
            return bad("dataset.num_labels", "must be positive".into());
        }
        if d.rgb_dim + d.audio_dim == 0 {
            return bad("dataset.rgb_dim", "rgb_dim + audio_dim must be positive".into());
        }
        if d.max_frames == 0 {
            return bad("dataset.max_frames", "must be positive".into());
        }
        if d.quantization.max <= d.quantization.min {
            return bad("dataset.quantization", "max must exceed min".into());
        }
        if d.examples_per_shard == 0 {
            return bad("dataset.examples_per_shard", "must be positive".into());
        }
        if d.synth.max_frames > d.max_frames {
            return bad("dataset.synth.max_frames", format!("{} exceeds dataset.max_frames {}", d.synth.max_frames, d.max_frames));
        }
        let t = &self.training;
        if !(t.learning_rate > 0.0 && t.learning_rate.is_finite()) {
            return bad("training.learning_rate", "must be positive".into());
        }
        if t.batch_size == 0 {
            return bad("training.batch_size", "must be positive".into());
        }
        if !(0.0..=1.0).contains(&t.lambda) {
            return bad("training.lambda", format!("{} outside [0, 1]", t.lambda));
        }
        if !(0.0..0.5).contains(&t.aux_share) {
            return bad("training.aux_share", format!("{} outside [0, 0.5)", t.aux_share));
        }
        if let Some(m) = &self.model {
            m.validate(&self.input_dims(0)).or_else(|e| bad("model", e.to_string()))?;
        }
        let e = &self.ensemble;
        if e.boost_clip < 1.0 {
            return bad("ensemble.boost_clip", "must be at least 1".into());
        }
        if e.stacker.batch_size == 0 {
            return bad("ensemble.stacker.batch_size", "must be positive".into());
        }
        if self.output.top_k == 0 {
            return bad("output.top_k", "must be positive".into());
        }
        Ok(())
    }

    pub fn input_dims(&self, cascade: usize) -> InputDims {
        InputDims {
            rgb: self.dataset.rgb_dim,
            audio: self.dataset.audio_dim,
            labels: self.dataset.num_labels,
            max_frames: self.dataset.max_frames,
            cascade,
        }
    }

    pub fn model(&self) -> Result<&ModelConfig, CliError> {
        self.model.as_ref().ok_or_else(|| CliError::Config { path: "model".into(), message: "section required by this command".into() })
    }
}

/// The config as read, with the model section still raw: its variant is
/// picked by `type` before decoding so field paths survive.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    dataset: DatasetSection,
    model: Option<toml::Table>,
    #[serde(default)]
    training: TrainConfig,
    #[serde(default)]
    ensemble: EnsembleSection,
    output: OutputSection,
}

fn path_error<E: std::fmt::Display>(prefix: &str) -> impl Fn(serde_path_to_error::Error<E>) -> CliError + '_ {
    move |e| {
        let inner = e.path().to_string();
        let path = match (prefix, inner.as_str()) {
            (p, ".") => p.to_string(),
            ("", i) => i.to_string(),
            (p, i) => format!("{p}.{i}"),
        };
        CliError::Config { path, message: e.inner().to_string().trim().to_string() }
    }
}

fn parse_model(mut table: toml::Table) -> Result<ModelConfig, CliError> {
    let kind = match table.remove("type") {
        Some(toml::Value::String(s)) => s,
        Some(_) => return Err(CliError::Config { path: "model.type".into(), message: "must be a string".into() }),
        None => return Err(CliError::Config { path: "model.type".into(), message: "missing architecture type".into() }),
    };
    let value = toml::Value::Table(table);
    let err = path_error("model");
    Ok(match kind.as_str() {
        "moe" => ModelConfig::Moe(serde_path_to_error::deserialize(value).map_err(err)?),
        "lstm" => ModelConfig::Lstm(serde_path_to_error::deserialize(value).map_err(err)?),
        "cnn" => ModelConfig::Cnn(serde_path_to_error::deserialize(value).map_err(err)?),
        "attention" => ModelConfig::Attention(serde_path_to_error::deserialize(value).map_err(err)?),
        "multiscale" => ModelConfig::Multiscale(serde_path_to_error::deserialize(value).map_err(err)?),
        other => {
            return Err(CliError::Config {
                path: "model.type".into(),
                message: format!("unknown architecture `{other}` (moe, lstm, cnn, attention, multiscale)"),
            })
        }
    })
}

/// Architecture and widths saved next to a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub dims: InputDims,
    pub model: ModelConfig,
}

impl ModelFile {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("model description serializes")
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| CliError::Config { path: String::new(), message: e.to_string() })?;
        let model = match table.remove("model") {
            Some(toml::Value::Table(t)) => parse_model(t)?,
            _ => return Err(CliError::Config { path: "model".into(), message: "missing model table".into() }),
        };
        let dims = serde_path_to_error::deserialize(table.remove("dims").unwrap_or_else(|| toml::Value::Table(Default::default())))
            .map_err(path_error("dims"))?;
        if let Some(k) = table.keys().next() {
            return Err(CliError::Config { path: k.clone(), message: "unknown key".into() });
        }
        Ok(Self { dims, model })
    }
}
