//! Run configuration: a preset, optionally overridden by a TOML file and
//! `--set section.key=value` flags.
//!
//! ```toml
//! preset = "desk"          # or "paper"
//!
//! [model]                  # architecture
//! num_context = 2
//!
//! [train]                  # optimizer, schedule, augmentation
//! epochs = 30
//!
//! [synth]                  # synthetic dataset generator
//! blob_sigma = 1.5
//!
//! [crop]
//! pixels_per_scale = 200.0
//!
//! [eval]                   # metric settings
//! metric = "pck"           # pck, pckh or pcp
//! threshold = 0.2
//! normalizer = [2, 5]
//! joint_names = ["torso", "head"]
//! limbs = [{ name = "torso-head", a = 0, b = 1 }]
//! ```

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use softpose::data::{CropConfig, SyntheticSpec};
use softpose::metrics::{Limb, Metric, MetricConfig};
use softpose::train::TrainConfig;
use softpose::ModelConfig;
use toml::{Table, Value};

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Pck,
    Pckh,
    Pcp,
}

impl MetricKind {
    pub fn metric(self) -> Metric {
        match self {
            MetricKind::Pck => Metric::Pck,
            MetricKind::Pckh => Metric::Pckh,
            MetricKind::Pcp => Metric::Pcp,
        }
    }

    pub fn default_threshold(self) -> f64 {
        match self {
            MetricKind::Pck => 0.2,
            MetricKind::Pckh | MetricKind::Pcp => 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LimbSpec {
    pub name: String,
    pub a: usize,
    pub b: usize,
}

/// Metric settings; unset fields fall back to the synthetic skeleton.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub metric: MetricKind,
    pub threshold: Option<f64>,
    pub normalizer: Option<[usize; 2]>,
    pub joint_names: Option<Vec<String>>,
    pub limbs: Option<Vec<LimbSpec>>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            metric: MetricKind::Pck,
            threshold: None,
            normalizer: None,
            joint_names: None,
            limbs: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SyntheticSpec,
    pub crop: CropConfig,
    pub eval: EvalSection,
}

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self, CliError> {
        match name {
            "desk" => Ok(RunConfig {
                model: ModelConfig::desk(),
                train: TrainConfig::desk(),
                synth: SyntheticSpec::default(),
                crop: CropConfig::default(),
                eval: EvalSection::default(),
            }),
            "paper" => Ok(RunConfig {
                model: ModelConfig::paper(),
                train: TrainConfig::default(),
                synth: SyntheticSpec {
                    canvas: 256,
                    blob_sigma: 6.0,
                    ..SyntheticSpec::default()
                },
                crop: CropConfig::default(),
                eval: EvalSection::default(),
            }),
            other => Err(CliError::Config(format!("unknown preset {other:?} (expected desk or paper)"))),
        }
    }

    /// Resolves the preset (flag, then file, then `desk`), then applies the
    /// file's sections and the `--set` overrides in that order.
    pub fn load(preset: Option<&str>, file: Option<&Path>, sets: &[String]) -> Result<Self, CliError> {
        let mut table = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
                text.parse::<Table>()
                    .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
            }
            None => Table::new(),
        };
        for s in sets {
            apply_set(&mut table, s)?;
        }
        let file_preset = match table.remove("preset") {
            Some(Value::String(s)) => Some(s),
            Some(other) => return Err(CliError::Config(format!("preset must be a string, got {other}"))),
            None => None,
        };
        let mut cfg = RunConfig::preset(preset.or(file_preset.as_deref()).unwrap_or("desk"))?;
        for (section, value) in table {
            let Value::Table(overrides) = value else {
                return Err(CliError::Config(format!("{section} must be a table")));
            };
            match section.as_str() {
                "model" => cfg.model = merge(&cfg.model, overrides, "model")?,
                "train" => cfg.train = merge(&cfg.train, overrides, "train")?,
                "synth" => cfg.synth = merge(&cfg.synth, overrides, "synth")?,
                "crop" => cfg.crop = merge(&cfg.crop, overrides, "crop")?,
                "eval" => cfg.eval = merge(&cfg.eval, overrides, "eval")?,
                other => return Err(CliError::Config(format!("unknown config section [{other}]"))),
            }
        }
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    /// Metric settings for `num_joints` joints.
    pub fn metric_config(&self, num_joints: usize, kind: Option<MetricKind>, threshold: Option<f64>) -> Result<MetricConfig, CliError> {
        let kind = kind.unwrap_or(self.eval.metric);
        let threshold = threshold.or(self.eval.threshold).unwrap_or(kind.default_threshold());
        let mut cfg = if num_joints == self.synth.num_joints() {
            self.synth.metric_config(kind.metric(), threshold)
        } else {
            MetricConfig {
                metric: kind.metric(),
                threshold,
                normalizer: (0, 1.min(num_joints.saturating_sub(1))),
                joint_names: (0..num_joints).map(|j| format!("joint{j}")).collect(),
                skeleton: (1..num_joints).map(|j| Limb::new(&format!("joint{}-joint{j}", j - 1), j - 1, j)).collect(),
                image_size: (1.0, 1.0),
            }
        };
        cfg.image_size = (self.model.input_size as f64, self.model.input_size as f64);
        if let Some([a, b]) = self.eval.normalizer {
            cfg.normalizer = (a, b);
        }
        if let Some(names) = &self.eval.joint_names {
            cfg.joint_names = names.clone();
        }
        if let Some(limbs) = &self.eval.limbs {
            cfg.skeleton = limbs.iter().map(|l| Limb::new(&l.name, l.a, l.b)).collect();
        }
        if cfg.joint_names.len() != num_joints {
            return Err(CliError::Config(format!(
                "{} joint names for {num_joints} joints",
                cfg.joint_names.len()
            )));
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn merge<T: Serialize + DeserializeOwned>(base: &T, overrides: Table, section: &str) -> Result<T, CliError> {
    let mut table = Table::try_from(base).map_err(|e| CliError::Config(format!("[{section}]: {e}")))?;
    for (k, v) in overrides {
        table.insert(k, v);
    }
    Value::Table(table)
        .try_into()
        .map_err(|e| CliError::Config(format!("[{section}]: {e}")))
}

/// Applies `section.key=value`; the value is parsed as TOML, falling back to a string.
fn apply_set(table: &mut Table, set: &str) -> Result<(), CliError> {
    let (path, raw) = set
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("--set expects section.key=value, got {set:?}")))?;
    let (section, key) = path
        .trim()
        .split_once('.')
        .ok_or_else(|| CliError::Config(format!("--set key {path:?} needs a section")))?;
    let value = format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    let entry = table
        .entry(section.to_string())
        .or_insert_with(|| Value::Table(Table::new()));
    match entry {
        Value::Table(t) => {
            t.insert(key.to_string(), value);
            Ok(())
        }
        _ => Err(CliError::Config(format!("{section} is not a table"))),
    }
}
