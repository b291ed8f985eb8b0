//! Experiment configuration: a TOML file describing the method, the training
//! protocol, the classifier, and the data source for a whole multi-seed run.
//!
//! Parsing is deliberately strict — unknown keys anywhere in the file are
//! errors, and keys that only apply to another method kind are rejected by
//! name — so a typo fails loudly instead of silently running defaults.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::continual::{ClMethod, GeneratorSettings, TrainProtocol};
use crate::data::SynthSpec;
use crate::dsg::GeneratorInit;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    /// Syntax or unknown-key errors; the underlying message carries the
    /// line/column span and the offending key.
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    /// Semantically invalid settings; the message names the bad field.
    #[error("invalid config: {0}")]
    Invalid(String),
}

type Result<T> = std::result::Result<T, ConfigError>;

/// Where the task stream's samples come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DataSource {
    /// Generated in memory from a [`SynthSpec`].
    Synthetic { spec: SynthSpec },
    /// Loaded from a dataset file (binary dump or CSV, by extension).
    File {
        path: PathBuf,
        train_ratio: f64,
        normalize: bool,
    },
}

/// A fully validated experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// One independent run per seed; also seeds the class order.
    pub seeds: Vec<u64>,
    /// Classes introduced per task.
    pub classes_per_task: usize,
    pub method: ClMethod,
    pub protocol: TrainProtocol,
    /// Per-block channel plan of the classifier.
    pub classifier_channels: Vec<usize>,
    pub data: DataSource,
}

impl ExperimentConfig {
    /// Reads and validates a TOML config. Relative data paths are resolved
    /// against the config file's directory.
    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = fs::read_to_string(path)?;
        let config = ExperimentConfig::from_toml_str(&text, path.parent())?;
        config.validate()?;
        Ok(config)
    }

    /// Parses a TOML config from a string without touching the filesystem
    /// (referenced data files are checked by [`ExperimentConfig::validate`]).
    pub fn from_toml_str(text: &str, base_dir: Option<&Path>) -> Result<ExperimentConfig> {
        let raw: RawConfig = toml::from_str(text)?;
        let method = raw.method.into_method()?;
        let data = raw.data.into_source(raw.classes_per_task, base_dir)?;
        Ok(ExperimentConfig {
            seeds: raw.seeds,
            classes_per_task: raw.classes_per_task,
            method,
            protocol: raw.protocol,
            classifier_channels: raw.classifier.channels,
            data,
        })
    }

    /// Semantic checks beyond parsing: value ranges and referenced files.
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(ConfigError::Invalid(
                "seeds must list at least one seed".into(),
            ));
        }
        if self.classes_per_task == 0 {
            return Err(ConfigError::Invalid("classes_per_task must be >= 1".into()));
        }
        self.method
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.protocol
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.classifier_channels.is_empty() {
            return Err(ConfigError::Invalid(
                "classifier channels must list at least one block".into(),
            ));
        }
        if self.classifier_channels.contains(&0) {
            return Err(ConfigError::Invalid(
                "classifier channels must all be >= 1".into(),
            ));
        }
        match &self.data {
            DataSource::Synthetic { spec } => {
                if spec.classes_per_task != self.classes_per_task {
                    return Err(ConfigError::Invalid(format!(
                        "classes_per_task mismatch: {} at top level, {} in the data spec",
                        self.classes_per_task, spec.classes_per_task
                    )));
                }
                spec.validate()
                    .map_err(|e| ConfigError::Invalid(e.to_string()))?;
            }
            DataSource::File {
                path, train_ratio, ..
            } => {
                if !(*train_ratio > 0.0 && *train_ratio < 1.0) {
                    return Err(ConfigError::Invalid(format!(
                        "train_ratio must lie strictly between 0 and 1, got {train_ratio}"
                    )));
                }
                if !path.is_file() {
                    return Err(ConfigError::Invalid(format!(
                        "data path {} does not exist",
                        path.display()
                    )));
                }
            }
        }
        Ok(())
    }
}

// ── raw TOML shape ──────────────────────────────────────────────────────
//
// `[method]` and `[data]` cannot be internally tagged serde enums here:
// tagged enums do not support `deny_unknown_fields`, and we want an `er`
// config with a stray `lambda` key to fail by name. Both sections are
// parsed into flat structs of optionals and dispatched on `kind` by hand.

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    seeds: Vec<u64>,
    #[serde(default = "default_classes_per_task")]
    classes_per_task: usize,
    method: MethodSection,
    #[serde(default)]
    protocol: TrainProtocol,
    #[serde(default)]
    classifier: ClassifierSection,
    data: DataSection,
}

fn default_classes_per_task() -> usize {
    2
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ClassifierSection {
    channels: Vec<usize>,
}

impl Default for ClassifierSection {
    fn default() -> ClassifierSection {
        ClassifierSection {
            channels: vec![64, 128, 256, 128],
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct MethodSection {
    kind: String,
    capacity: Option<usize>,
    lambda: Option<f64>,
    init: Option<GeneratorInit>,
    generator: Option<GeneratorSettings>,
}

impl MethodSection {
    fn into_method(self) -> Result<ClMethod> {
        let MethodSection {
            kind,
            capacity,
            lambda,
            init,
            generator,
        } = self;
        let reject = |name: &str, present: bool| {
            if present {
                Err(ConfigError::Invalid(format!(
                    "[method] {name} does not apply to kind = \"{kind}\""
                )))
            } else {
                Ok(())
            }
        };
        match kind.as_str() {
            "sft" => {
                reject("capacity", capacity.is_some())?;
                reject("lambda", lambda.is_some())?;
                reject("init", init.is_some())?;
                reject("generator", generator.is_some())?;
                Ok(ClMethod::Sft)
            }
            "er" => {
                reject("lambda", lambda.is_some())?;
                reject("init", init.is_some())?;
                reject("generator", generator.is_some())?;
                let capacity = capacity.ok_or_else(|| {
                    ConfigError::Invalid("[method] kind = \"er\" requires capacity".into())
                })?;
                Ok(ClMethod::Er { capacity })
            }
            "gr" => {
                reject("capacity", capacity.is_some())?;
                reject("lambda", lambda.is_some())?;
                reject("init", init.is_some())?;
                Ok(ClMethod::Gr {
                    generator: generator.unwrap_or_default(),
                })
            }
            "dsg" => {
                reject("capacity", capacity.is_some())?;
                Ok(ClMethod::Dsg {
                    generator: generator.unwrap_or_default(),
                    lambda: lambda.unwrap_or(1.0),
                    init: init.unwrap_or_default(),
                })
            }
            other => Err(ConfigError::Invalid(format!(
                "[method] unknown kind \"{other}\" (expected sft, er, gr, or dsg)"
            ))),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct DataSection {
    kind: String,
    // synthetic-only keys (classes_per_task comes from the top level)
    num_classes: Option<usize>,
    channels: Option<usize>,
    length: Option<usize>,
    train_per_class: Option<usize>,
    test_per_class: Option<usize>,
    base_freq: Option<f64>,
    freq_step: Option<f64>,
    amplitude: Option<f64>,
    phase_jitter: Option<f64>,
    noise_level: Option<f64>,
    seed: Option<u64>,
    // file-only keys
    path: Option<PathBuf>,
    train_ratio: Option<f64>,
    normalize: Option<bool>,
}

impl DataSection {
    fn into_source(self, classes_per_task: usize, base_dir: Option<&Path>) -> Result<DataSource> {
        let kind = self.kind.clone();
        let reject = |names: &[(&str, bool)]| -> Result<()> {
            for (name, present) in names {
                if *present {
                    return Err(ConfigError::Invalid(format!(
                        "[data] {name} does not apply to kind = \"{kind}\""
                    )));
                }
            }
            Ok(())
        };
        match self.kind.as_str() {
            "synthetic" => {
                reject(&[
                    ("path", self.path.is_some()),
                    ("train_ratio", self.train_ratio.is_some()),
                    ("normalize", self.normalize.is_some()),
                ])?;
                let d = SynthSpec::default();
                Ok(DataSource::Synthetic {
                    spec: SynthSpec {
                        num_classes: self.num_classes.unwrap_or(d.num_classes),
                        classes_per_task,
                        channels: self.channels.unwrap_or(d.channels),
                        length: self.length.unwrap_or(d.length),
                        train_per_class: self.train_per_class.unwrap_or(d.train_per_class),
                        test_per_class: self.test_per_class.unwrap_or(d.test_per_class),
                        base_freq: self.base_freq.unwrap_or(d.base_freq),
                        freq_step: self.freq_step.unwrap_or(d.freq_step),
                        amplitude: self.amplitude.unwrap_or(d.amplitude),
                        phase_jitter: self.phase_jitter.unwrap_or(d.phase_jitter),
                        noise_level: self.noise_level.unwrap_or(d.noise_level),
                        seed: self.seed.unwrap_or(d.seed),
                    },
                })
            }
            "file" => {
                reject(&[
                    ("num_classes", self.num_classes.is_some()),
                    ("channels", self.channels.is_some()),
                    ("length", self.length.is_some()),
                    ("train_per_class", self.train_per_class.is_some()),
                    ("test_per_class", self.test_per_class.is_some()),
                    ("base_freq", self.base_freq.is_some()),
                    ("freq_step", self.freq_step.is_some()),
                    ("amplitude", self.amplitude.is_some()),
                    ("phase_jitter", self.phase_jitter.is_some()),
                    ("noise_level", self.noise_level.is_some()),
                    ("seed", self.seed.is_some()),
                ])?;
                let path = self.path.ok_or_else(|| {
                    ConfigError::Invalid("[data] kind = \"file\" requires path".into())
                })?;
                let path = match base_dir {
                    Some(dir) if path.is_relative() => dir.join(path),
                    _ => path,
                };
                Ok(DataSource::File {
                    path,
                    train_ratio: self.train_ratio.unwrap_or(0.8),
                    normalize: self.normalize.unwrap_or(false),
                })
            }
            other => Err(ConfigError::Invalid(format!(
                "[data] unknown kind \"{other}\" (expected synthetic or file)"
            ))),
        }
    }
}

#[cfg(test)]
mod tests;
