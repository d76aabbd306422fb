//! Run configuration: one JSON document, named presets and dotted overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::imaging::{load_dataset, synthetic_dataset, Dataset, Split, TaskKind};
use crate::losses::{ContrastiveConfig, LossWeights};
use crate::optim::AdamConfig;
use crate::projector::{AutoencoderBudget, ProjectorConfig};

/// How the task sequence is trained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Tasks one after another, optionally with replay.
    Continual,
    /// One model on the union of all training sets.
    Joint,
    /// A separate model per task, each evaluated on its own test set.
    Individual,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Directory with `manifest.json`; relative paths resolve against the config file.
    Dir { path: PathBuf },
    /// Procedural clean images degraded with the task's synthesizer.
    Synthetic { count: usize, size: usize, seed: u64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub train: DataSource,
    pub test: DataSource,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub adam: AdamConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub steps_per_task: usize,
    pub patch_size: usize,
    /// Run-log row interval in steps.
    pub log_every: usize,
    /// Joint mode: pick the task uniformly before the sample, so task sizes do not
    /// bias the mixture.
    pub balance_tasks: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemoryKind {
    /// Degraded images only, replayed through the previous model.
    Degraded,
    /// Degraded/clean pairs replayed with ground truth.
    Paired,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplayMix {
    /// One current sample plus one memory sample per step.
    PerStep,
    /// One sample per step from the pool of current data and memory pairs.
    Pooled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplayConfig {
    pub capacity: usize,
    pub memory: MemoryKind,
    pub mix: ReplayMix,
    /// Weight of the ground-truth term on paired memory samples.
    pub memory_weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectorSection {
    pub out_channels: usize,
    pub heads: usize,
    pub temperature: f64,
    pub learnable_temperature: bool,
    pub budget: AutoencoderBudget,
}

impl ProjectorSection {
    pub fn config(&self, in_channels: usize) -> ProjectorConfig {
        ProjectorConfig {
            in_channels,
            out_channels: self.out_channels,
            heads: self.heads,
            temperature: self.temperature,
            learnable_temperature: self.learnable_temperature,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub init: u64,
    pub data: u64,
    pub buffer: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    pub tasks: Vec<TaskSpec>,
    pub backbone: BackboneConfig,
    pub loss: LossWeights,
    pub contrastive: ContrastiveConfig,
    pub optimizer: OptimizerConfig,
    pub training: TrainingConfig,
    pub replay: ReplayConfig,
    pub projector: ProjectorSection,
    pub seeds: Seeds,
}

pub const PRESETS: [&str; 7] = [
    "finetune",
    "full_method",
    "er_lsw",
    "lsw_kd",
    "joint",
    "joint_m",
    "individual",
];

fn preset_text(name: &str) -> Option<&'static str> {
    Some(match name {
        "finetune" => include_str!("../presets/finetune.json"),
        "full_method" => include_str!("../presets/full_method.json"),
        "er_lsw" => include_str!("../presets/er_lsw.json"),
        "lsw_kd" => include_str!("../presets/lsw_kd.json"),
        "joint" => include_str!("../presets/joint.json"),
        "joint_m" => include_str!("../presets/joint_m.json"),
        "individual" => include_str!("../presets/individual.json"),
        _ => return None,
    })
}

/// Raw JSON of a bundled preset.
pub fn preset_value(name: &str) -> Result<Value> {
    let text = preset_text(name).ok_or_else(|| Error::Config {
        key: "preset".into(),
        reason: format!("unknown preset `{name}` (known: {})", PRESETS.join(", ")),
    })?;
    Ok(serde_json::from_str(text)?)
}

/// Sets `dotted.key` in `doc` to `raw`, parsed as JSON when possible and as a
/// string otherwise. The key must already exist.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment.split_once('=').ok_or_else(|| Error::Config {
        key: assignment.into(),
        reason: "override must look like key=value".into(),
    })?;
    let missing = || Error::Config {
        key: key.into(),
        reason: "no such key".into(),
    };
    let mut node = doc;
    for part in key.split('.') {
        node = match node {
            Value::Object(map) => map.get_mut(part).ok_or_else(missing)?,
            Value::Array(items) => part
                .parse::<usize>()
                .ok()
                .and_then(|i| items.get_mut(i))
                .ok_or_else(missing)?,
            _ => return Err(missing()),
        };
    }
    *node = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.into()));
    Ok(())
}

fn config_error(key: impl Into<String>, reason: impl Into<String>) -> Error {
    Error::Config {
        key: key.into(),
        reason: reason.into(),
    }
}

impl RunConfig {
    /// Typed config from JSON, reporting the path of the first offending key.
    pub fn from_value(doc: Value) -> Result<Self> {
        let cfg: RunConfig = serde_path_to_error::deserialize(doc).map_err(|e| {
            let path = e.path().to_string();
            config_error(if path == "." { String::new() } else { path }, e.inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|_| Error::MissingFile(path.to_path_buf()))?;
        let mut doc: Value =
            serde_json::from_str(&text).map_err(|e| config_error("", e.to_string()))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let mut cfg = Self::from_value(doc)?;
        if let Some(dir) = path.parent() {
            cfg.resolve_paths(dir);
        }
        Ok(cfg)
    }

    pub fn preset(name: &str, overrides: &[String]) -> Result<Self> {
        let mut doc = preset_value(name)?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        Self::from_value(doc)
    }

    fn resolve_paths(&mut self, base: &Path) {
        for t in &mut self.tasks {
            for src in [&mut t.train, &mut t.test] {
                if let DataSource::Dir { path } = src {
                    if path.is_relative() {
                        *path = base.join(&*path);
                    }
                }
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(config_error("tasks", "at least one task is required"));
        }
        for (i, t) in self.tasks.iter().enumerate() {
            for (name, src) in [("train", &t.train), ("test", &t.test)] {
                if let DataSource::Synthetic { count, size, .. } = src {
                    if *count == 0 {
                        return Err(config_error(format!("tasks.{i}.{name}.count"), "must be >= 1"));
                    }
                    if *size < 8 {
                        return Err(config_error(format!("tasks.{i}.{name}.size"), "must be >= 8"));
                    }
                }
            }
        }
        self.backbone
            .validate()
            .map_err(|e| config_error("backbone", e.to_string()))?;
        for (key, v) in [
            ("loss.beta1", self.loss.beta1),
            ("loss.beta2", self.loss.beta2),
            ("loss.alpha", self.loss.alpha),
            ("loss.lambda", self.loss.lambda),
            ("replay.memory_weight", self.replay.memory_weight),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(config_error(key, "must be finite and >= 0"));
            }
        }
        if !(self.contrastive.tau.is_finite() && self.contrastive.tau > 0.0) {
            return Err(config_error("contrastive.tau", "must be > 0"));
        }
        if let Some(i) = self.contrastive.weights.iter().position(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(config_error(format!("contrastive.weights.{i}"), "must be > 0"));
        }
        if !(self.optimizer.lr.is_finite() && self.optimizer.lr > 0.0) {
            return Err(config_error("optimizer.lr", "must be > 0"));
        }
        let a = &self.optimizer.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || a.eps <= 0.0 {
            return Err(config_error("optimizer.adam", "betas must be in [0, 1) and eps > 0"));
        }
        if self.training.steps_per_task == 0 {
            return Err(config_error("training.steps_per_task", "must be >= 1"));
        }
        if self.training.patch_size < 8 {
            return Err(config_error("training.patch_size", "must be >= 8"));
        }
        if self.training.log_every == 0 {
            return Err(config_error("training.log_every", "must be >= 1"));
        }
        self.projector
            .config(self.backbone.base_channels)
            .validate()
            .map_err(|e| config_error("projector.out_channels", e.to_string()))?;
        let b = &self.projector.budget;
        if b.batch == 0 || !(b.lr.is_finite() && b.lr > 0.0) {
            return Err(config_error("projector.budget", "batch and lr must be positive"));
        }
        if self.replay.mix == ReplayMix::Pooled && self.replay.memory != MemoryKind::Paired {
            return Err(config_error("replay.mix", "pooled replay needs paired memory"));
        }
        if self.mode != Mode::Continual
            && (self.replay.capacity > 0 || self.loss.alpha > 0.0 || self.loss.lambda > 0.0)
        {
            return Err(config_error(
                "mode",
                "joint and individual runs take no replay, alpha or lambda",
            ));
        }
        Ok(())
    }

    /// Replay terms that read degraded memory through the previous model are on.
    pub fn uses_distillation(&self) -> bool {
        self.loss.alpha > 0.0 || self.loss.lambda > 0.0
    }

    pub fn to_pretty_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// Loads or synthesizes one split of a task.
pub fn materialize(kind: &TaskKind, source: &DataSource, split: Split) -> Result<Dataset> {
    match source {
        DataSource::Dir { path } => load_dataset(path),
        DataSource::Synthetic { count, size, seed } => {
            synthetic_dataset(kind, *count, *size, split, *seed)
        }
    }
}
