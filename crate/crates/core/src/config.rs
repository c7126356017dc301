//! Experiment configuration: a TOML document plus `key=value` overrides.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::AugmentationConfig;
use crate::dataset::Label;
use crate::error::{Error, Result};
use crate::evaluate::DEFAULT_THRESHOLD;
use crate::model_zoo::{default_weights_dir, Architecture, ArchitectureSpec, FreezePolicy, Pooling};
use crate::preprocess::{ClaheConfig, PreprocessConfig};
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_fraction: f64,
    pub split_seed: u64,
    /// Augmented copies added per minority-class training image.
    pub oversample_copies: usize,
    /// Augment the validation minority class up to the majority count.
    pub balance_validation: bool,
    /// Keep only this stratified fraction of the scanned images.
    pub subset_fraction: Option<f64>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_fraction: 0.6,
            split_seed: 42,
            oversample_copies: 2,
            balance_validation: true,
            subset_fraction: None,
        }
    }
}

/// Preprocessing options; the target size comes from each architecture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessOptions {
    pub channels: usize,
    pub normalize: bool,
    pub clahe: ClaheConfig,
}

impl Default for PreprocessOptions {
    fn default() -> Self {
        let p = PreprocessConfig::default();
        Self {
            channels: p.channels,
            normalize: p.normalize,
            clahe: p.clahe,
        }
    }
}

impl PreprocessOptions {
    pub fn at_size(&self, target_size: usize) -> PreprocessConfig {
        PreprocessConfig {
            target_size,
            channels: self.channels,
            normalize: self.normalize,
            clahe: self.clahe.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointChoice {
    Last,
    Best,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    pub threshold: f32,
    pub positive_class: Label,
    pub checkpoint: CheckpointChoice,
    pub batch_size: usize,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            positive_class: Label::Pneumonia,
            checkpoint: CheckpointChoice::Last,
            batch_size: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    pub width: u32,
    pub height: u32,
    /// TrueType font for plot text; common system locations are searched
    /// when unset.
    pub font: Option<PathBuf>,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self {
            width: 960,
            height: 640,
            font: None,
        }
    }
}

/// Per-architecture changes to the default [`ArchitectureSpec`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelOverride {
    pub input_size: Option<usize>,
    pub freeze_policy: Option<FreezePolicy>,
    pub pooling: Option<Pooling>,
    pub hidden_units: Option<usize>,
    pub l2_coefficient: Option<f32>,
    pub baseline_filters: Option<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset_root: PathBuf,
    pub output_dir: PathBuf,
    /// Pretrained-weight directory; falls back to `$CXRBENCH_WEIGHTS` and
    /// then the user cache.
    pub weights_dir: Option<PathBuf>,
    pub architectures: Vec<String>,
    pub data: DataConfig,
    pub preprocess: PreprocessOptions,
    pub augmentation: AugmentationConfig,
    pub train: TrainConfig,
    pub evaluation: EvaluationConfig,
    pub report: ReportConfig,
    pub models: BTreeMap<String, ModelOverride>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset_root: PathBuf::from("data/chest_xray"),
            output_dir: PathBuf::from("output"),
            weights_dir: None,
            architectures: Architecture::ALL.iter().map(|a| a.name().to_string()).collect(),
            data: DataConfig::default(),
            preprocess: PreprocessOptions::default(),
            augmentation: AugmentationConfig::default(),
            train: TrainConfig::default(),
            evaluation: EvaluationConfig::default(),
            report: ReportConfig::default(),
            models: BTreeMap::new(),
        }
    }
}

/// Parses the right-hand side of an override as a TOML value, falling back
/// to a plain string.
fn parse_override_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Sets `a.b.c = value` inside a TOML tree, creating tables as needed.
pub fn set_dotted(root: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').map(str::trim).collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("invalid override key {key:?}")));
    }
    let (last, path) = parts.split_last().expect("non-empty");
    let mut table = root;
    for part in path {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key:?}: {part} is not a table")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    /// Loads `path` (or the defaults) and applies `key=value` overrides in
    /// order.
    pub fn load_with_overrides(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)?,
            None => String::new(),
        };
        let mut table: toml::Table = toml::from_str(&text)?;
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {item:?} is not key=value")))?;
            set_dotted(&mut table, key, parse_override_value(raw.trim()))?;
        }
        Ok(toml::Value::Table(table).try_into()?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn architecture_list(&self) -> Result<Vec<Architecture>> {
        let mut out = Vec::new();
        for name in &self.architectures {
            let arch: Architecture = name.parse()?;
            if !out.contains(&arch) {
                out.push(arch);
            }
        }
        if out.is_empty() {
            return Err(Error::Config("no architectures selected".into()));
        }
        Ok(out)
    }

    fn override_for(&self, arch: Architecture) -> Result<Option<&ModelOverride>> {
        let mut found = None;
        for (key, o) in &self.models {
            let parsed: Architecture = key.parse()?;
            if parsed == arch {
                found = Some(o);
            }
        }
        Ok(found)
    }

    pub fn spec_for(&self, arch: Architecture) -> Result<ArchitectureSpec> {
        let mut spec = ArchitectureSpec::default_for(arch);
        spec.channels = self.preprocess.channels;
        if let Some(o) = self.override_for(arch)? {
            if let Some(v) = o.input_size {
                spec.input_size = v;
            }
            if let Some(v) = o.freeze_policy {
                spec.freeze_policy = v;
            }
            if let Some(v) = o.pooling {
                spec.head.pooling = v;
            }
            if let Some(v) = o.hidden_units {
                spec.head.hidden_units = v;
            }
            if let Some(v) = o.l2_coefficient {
                spec.l2_coefficient = v;
            }
            if let Some(v) = &o.baseline_filters {
                if arch != Architecture::BaselineCnn {
                    return Err(Error::Config(format!("baseline_filters given for {arch}")));
                }
                spec.baseline = Some(crate::model_zoo::BaselineLayout { filters: v.clone() });
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn weights_dir(&self) -> PathBuf {
        self.weights_dir.clone().unwrap_or_else(default_weights_dir)
    }

    /// Checks everything that can be checked without touching the dataset.
    pub fn validate(&self) -> Result<()> {
        for arch in self.architecture_list()? {
            let spec = self.spec_for(arch)?;
            self.preprocess.at_size(spec.input_size).validate()?;
        }
        for key in self.models.keys() {
            key.parse::<Architecture>()?;
        }
        let f = self.data.train_fraction;
        if !(f > 0.0 && f < 1.0) {
            return Err(Error::Config(format!("data.train_fraction must lie in (0, 1), got {f}")));
        }
        if let Some(s) = self.data.subset_fraction {
            if !(s > 0.0 && s <= 1.0) {
                return Err(Error::Config(format!("data.subset_fraction must lie in (0, 1], got {s}")));
            }
        }
        self.augmentation.validate()?;
        self.train.validate()?;
        let t = self.evaluation.threshold;
        if !(t > 0.0 && t < 1.0) {
            return Err(Error::Config(format!("evaluation.threshold must lie in (0, 1), got {t}")));
        }
        if self.evaluation.batch_size == 0 {
            return Err(Error::Config("evaluation.batch_size must be positive".into()));
        }
        Ok(())
    }
}
