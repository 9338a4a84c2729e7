//! Experiment configuration: one TOML file, with individual keys
//! overridable as `section.key=value`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data_io::CohortSpec;
use crate::evaluation::{FusionMode, DEFAULT_BETA};
use crate::model::{ModelConfig, Strategy};
use crate::preprocessing::{NormAxis, SpectrogramParams};
use crate::training::{FinetuneConfig, PretrainConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("config: {0}")]
    Parse(String),
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("override `{0}` must look like section.key=value")]
    BadOverride(String),
    #[error("invalid value for `{key}`: {message}")]
    Invalid { key: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataSection,
    pub preprocessing: PreprocessingSection,
    pub model: ModelConfig,
    pub pretrain: PretrainSection,
    pub personalize: PersonalizeSection,
    pub evaluate: EvaluateSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            data: DataSection::default(),
            preprocessing: PreprocessingSection::default(),
            model: ModelConfig::default(),
            pretrain: PretrainSection::default(),
            personalize: PersonalizeSection::default(),
            evaluate: EvaluateSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// EDF recordings, named `{subject}_n{night}.edf`.
    pub input_dir: PathBuf,
    /// Preprocessed night caches.
    pub cache_dir: PathBuf,
    /// Checkpoints, manifests and reports.
    pub output_dir: PathBuf,
    /// EEG channel label to read.
    pub channel: String,
    /// Cohort written by `synthesize`.
    pub synthetic: CohortSpec,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            input_dir: "data/edf".into(),
            cache_dir: "data/cache".into(),
            output_dir: "runs".into(),
            channel: "EEG Fpz-Cz".into(),
            synthetic: CohortSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessingSection {
    pub sample_rate: f64,
    pub epoch_sec: f64,
    pub frame_sec: f64,
    pub hop_sec: f64,
    pub fft_size: usize,
    /// Added to the amplitude spectrum before the logarithm.
    pub eps_spec: f64,
    pub norm_axis: NormAxis,
}

impl Default for PreprocessingSection {
    fn default() -> Self {
        let s = SpectrogramParams::default();
        Self {
            sample_rate: s.sample_rate,
            epoch_sec: s.epoch_sec,
            frame_sec: s.frame_sec,
            hop_sec: s.hop_sec,
            fft_size: s.fft_size,
            eps_spec: s.eps_spec,
            norm_axis: NormAxis::PerBin,
        }
    }
}

impl PreprocessingSection {
    pub fn spectrogram(&self) -> SpectrogramParams {
        SpectrogramParams {
            sample_rate: self.sample_rate,
            epoch_sec: self.epoch_sec,
            frame_sec: self.frame_sec,
            hop_sec: self.hop_sec,
            fft_size: self.fft_size,
            eps_spec: self.eps_spec,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSection {
    /// Training subjects; empty means every cached subject that is neither
    /// a validation nor a personalization subject.
    pub subjects: Vec<String>,
    pub valid_subjects: Vec<String>,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub stride: usize,
    pub lambda: f64,
}

impl Default for PretrainSection {
    fn default() -> Self {
        let p = PretrainConfig::default();
        Self {
            subjects: Vec::new(),
            valid_subjects: Vec::new(),
            epochs: p.epochs,
            learning_rate: p.learning_rate,
            batch_size: p.batch_size,
            stride: p.stride,
            lambda: p.lambda,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PersonalizeSection {
    /// Target subjects, personalized on night 1 and tested on night 2.
    pub subjects: Vec<String>,
    pub alphas: Vec<f64>,
    pub strategies: Vec<Strategy>,
    pub learning_rate: f64,
    pub finetune_epochs: usize,
    pub snapshot_every: usize,
    pub batch_size: usize,
    pub lambda: f64,
    pub stride: usize,
    /// Subject-independent checkpoint; empty means `{output_dir}/si.ckpt`.
    pub si_checkpoint: PathBuf,
}

impl Default for PersonalizeSection {
    fn default() -> Self {
        let f = FinetuneConfig::default();
        Self {
            subjects: Vec::new(),
            alphas: vec![0.0, 0.2, 0.4, 0.6, 0.8],
            strategies: vec![Strategy::All],
            learning_rate: f.learning_rate,
            finetune_epochs: f.finetune_epochs,
            snapshot_every: f.snapshot_every,
            batch_size: f.batch_size,
            lambda: f.lambda,
            stride: f.stride,
            si_checkpoint: PathBuf::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateSection {
    pub beta: f64,
    pub fusion: FusionMode,
    /// Start offset between scored sequences.
    pub stride: usize,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        Self { beta: DEFAULT_BETA, fusion: FusionMode::Geometric, stride: 1 }
    }
}

impl ExperimentConfig {
    /// Reads `path` (or the defaults when `None`) and applies `overrides`.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|source| ConfigError::Read { path: p.to_path_buf(), source })?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let reference = toml::Table::try_from(ExperimentConfig::default()).expect("defaults serialize");
        check_keys(&table, &reference, "")?;
        let cfg: ExperimentConfig = table.try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |key: &str, message: String| ConfigError::Invalid { key: key.into(), message };
        self.model.validate().map_err(|e| invalid("model", e.to_string()))?;
        self.pretrain_config().validate().map_err(|e| invalid("pretrain", e.to_string()))?;
        self.finetune_config(Strategy::All, 0.0).validate().map_err(|e| invalid("personalize", e.to_string()))?;
        if let Some(a) = self.personalize.alphas.iter().find(|a| !(0.0..=1.0).contains(*a)) {
            return Err(invalid("personalize.alphas", format!("{a} is outside [0, 1]")));
        }
        if self.personalize.alphas.is_empty() {
            return Err(invalid("personalize.alphas", "empty grid".into()));
        }
        if self.personalize.strategies.is_empty() {
            return Err(invalid("personalize.strategies", "empty list".into()));
        }
        if !(0.0..=1.0).contains(&self.evaluate.beta) {
            return Err(invalid("evaluate.beta", format!("{} is outside [0, 1]", self.evaluate.beta)));
        }
        if self.evaluate.stride == 0 {
            return Err(invalid("evaluate.stride", "must be positive".into()));
        }
        Ok(())
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        let p = &self.pretrain;
        PretrainConfig {
            epochs: p.epochs,
            learning_rate: p.learning_rate,
            batch_size: p.batch_size,
            stride: p.stride,
            lambda: p.lambda,
            eval_stride: self.evaluate.stride,
            fusion: self.evaluate.fusion,
        }
    }

    pub fn finetune_config(&self, strategy: Strategy, alpha: f64) -> FinetuneConfig {
        let p = &self.personalize;
        FinetuneConfig {
            strategy,
            alpha,
            learning_rate: p.learning_rate,
            finetune_epochs: p.finetune_epochs,
            snapshot_every: p.snapshot_every,
            batch_size: p.batch_size,
            seed: self.seed,
            lambda: p.lambda,
            stride: p.stride,
        }
    }

    pub fn si_checkpoint_path(&self) -> PathBuf {
        if self.personalize.si_checkpoint.as_os_str().is_empty() {
            self.data.output_dir.join("si.ckpt")
        } else {
            self.personalize.si_checkpoint.clone()
        }
    }
}

/// Rejects keys of `table` that do not exist in `reference`, naming the
/// full dotted path of the first offender.
fn check_keys(table: &toml::Table, reference: &toml::Table, prefix: &str) -> Result<(), ConfigError> {
    for (key, value) in table {
        let path = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
        match reference.get(key) {
            None => return Err(ConfigError::UnknownKey(path)),
            Some(toml::Value::Table(r)) => {
                if let toml::Value::Table(t) = value {
                    check_keys(t, r, &path)?;
                }
            }
            Some(_) => {
                // A table where a plain value belongs, as in `seed.x = 3`.
                if let Some(inner) = value.as_table().and_then(|t| t.keys().next()) {
                    return Err(ConfigError::UnknownKey(format!("{path}.{inner}")));
                }
            }
        }
    }
    Ok(())
}

fn apply_override(table: &mut toml::Table, item: &str) -> Result<(), ConfigError> {
    let (key, raw) = item.split_once('=').ok_or_else(|| ConfigError::BadOverride(item.into()))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(ConfigError::BadOverride(item.into()));
    }
    // A bare word that is not valid TOML is taken as a string.
    let value = format!("v = {}", raw.trim())
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("non-empty key");
    let mut cursor = table;
    for (i, part) in parts.iter().enumerate() {
        let entry = cursor.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cursor = match entry {
            toml::Value::Table(t) => t,
            _ => return Err(ConfigError::UnknownKey(parts[..=i].join(".") + "." + last)),
        };
    }
    cursor.insert(last.to_string(), value);
    Ok(())
}
