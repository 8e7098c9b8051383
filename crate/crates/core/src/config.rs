//! Run configuration: a TOML file of sections or flat dotted keys
//! (`train.batch_size = 8`), with `key=value` overrides layered on top.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::spec::{build_meshnet, build_unet, ModelSpec};
use crate::ops::batchnorm::DEFAULT_MOMENTUM;
use crate::sampler::SamplerConfig;
use crate::train::{AdamConfig, Normalization, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// `meshnet-64`, `meshnet-68`, `unet`, or `meshnet` (custom width and dilations).
    pub variant: String,
    pub input_channels: usize,
    pub num_classes: usize,
    pub dropout: f64,
    pub width: Option<usize>,
    pub dilations: Option<Vec<usize>>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            variant: "meshnet-68".into(),
            input_channels: 1,
            num_classes: 3,
            dropout: 0.0,
            width: None,
            dilations: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSection {
    /// Subvolume side; defaults to the variant's own side.
    pub side: Option<usize>,
    pub sigma: f64,
    pub mean: Option<[f64; 3]>,
}

impl Default for SamplerSection {
    fn default() -> Self {
        Self {
            side: None,
            sigma: 50.0,
            mean: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub batch_size: usize,
    pub batches: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub validation_every: usize,
    pub validation_subvolumes: usize,
    /// `minmax` or `divide`.
    pub normalization: String,
    pub normalization_divisor: f32,
    /// Weight of the newest batch in the batchnorm running statistics.
    pub batchnorm_momentum: f64,
    /// Seed for parameter initialization; defaults to the run seed.
    pub init_seed: Option<u64>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            batch_size: 64,
            batches: 2000,
            learning_rate: adam.learning_rate,
            beta1: adam.beta1,
            beta2: adam.beta2,
            epsilon: adam.epsilon,
            validation_every: 0,
            validation_subvolumes: 8,
            normalization: "minmax".into(),
            normalization_divisor: 255.0,
            batchnorm_momentum: DEFAULT_MOMENTUM,
            init_seed: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceSection {
    /// Sampled subvolumes on top of the grid.
    pub subvolumes: usize,
    pub batch: usize,
    pub workers: usize,
}

impl Default for InferenceSection {
    fn default() -> Self {
        Self {
            subvolumes: 1000,
            batch: 4,
            workers: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    pub data_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub log: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Dataset entries to train on; empty means every entry not held out.
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    /// Train on the uncorrupted labels instead of the emitted ones.
    pub clean_labels: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub model: ModelSection,
    pub sampler: SamplerSection,
    pub train: TrainSection,
    pub inference: InferenceSection,
    pub paths: PathsSection,
    pub data: DataSection,
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts = key.split('.').peekable();
    let mut current = table;
    while let Some(part) = parts.next() {
        if part.is_empty() {
            return Err(Error::field(key, "empty key segment"));
        }
        if parts.peek().is_none() {
            current.insert(part.to_string(), value);
            return Ok(());
        }
        let entry = current
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        current = entry
            .as_table_mut()
            .ok_or_else(|| Error::field(key, format!("`{part}` is not a section")))?;
    }
    Err(Error::field(key, "empty key"))
}

/// Parses `value` as a TOML literal, falling back to a bare string.
fn parse_value(value: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()))
}

impl RunConfig {
    /// Parses a config document and applies `key=value` overrides in order.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| Error::field("config", e.message().to_string()))?;
        for o in overrides {
            let (key, value) = o
                .split_once('=')
                .ok_or_else(|| Error::field(o.as_str(), "override must look like key=value"))?;
            set_path(&mut table, key.trim(), parse_value(value.trim()))?;
        }
        let config: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::field("config", e.message().to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)?,
            None => String::new(),
        };
        Self::from_toml_str(&text, overrides)
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        let m = &self.model;
        match m.variant.as_str() {
            "meshnet-64" => build_meshnet(64, m.input_channels, m.num_classes, m.dropout),
            "meshnet-68" => build_meshnet(68, m.input_channels, m.num_classes, m.dropout),
            "unet" => build_unet(m.input_channels, m.num_classes),
            "meshnet" => {
                let width = m
                    .width
                    .ok_or_else(|| Error::field("model.width", "required for variant `meshnet`"))?;
                let dilations = m
                    .dilations
                    .as_ref()
                    .ok_or_else(|| Error::field("model.dilations", "required for variant `meshnet`"))?;
                ModelSpec::meshnet(
                    &format!("meshnet-w{width}"),
                    m.input_channels,
                    m.num_classes,
                    width,
                    dilations,
                    m.dropout,
                )
            }
            other => Err(Error::field(
                "model.variant",
                format!("unknown variant `{other}` (meshnet-64, meshnet-68, unet, meshnet)"),
            )),
        }
    }

    pub fn side(&self) -> Result<usize> {
        match (self.sampler.side, self.model.variant.as_str()) {
            (Some(s), _) => Ok(s),
            (None, "meshnet-64" | "unet") => Ok(64),
            (None, "meshnet-68") => Ok(68),
            (None, _) => Err(Error::field("sampler.side", "required for this model variant")),
        }
    }

    pub fn seed(&self) -> Result<u64> {
        self.seed.ok_or_else(|| Error::field("seed", "a seed is required"))
    }

    pub fn sampler_config(&self) -> Result<SamplerConfig> {
        let cfg = SamplerConfig {
            mean: self.sampler.mean,
            sigma: [self.sampler.sigma; 3],
            side: self.side()?,
            seed: self.seed.unwrap_or(0),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn normalization(&self) -> Result<Normalization> {
        let n = match self.train.normalization.as_str() {
            "minmax" => Normalization::MinMax,
            "divide" => Normalization::Divide {
                by: self.train.normalization_divisor,
            },
            other => {
                return Err(Error::field(
                    "train.normalization",
                    format!("unknown mode `{other}` (minmax, divide)"),
                ))
            }
        };
        n.validate()?;
        Ok(n)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let t = &self.train;
        let cfg = TrainConfig {
            batch_size: t.batch_size,
            batches: t.batches,
            adam: AdamConfig {
                learning_rate: t.learning_rate,
                beta1: t.beta1,
                beta2: t.beta2,
                epsilon: t.epsilon,
            },
            seed: self.seed.unwrap_or(0),
            validation_every: t.validation_every,
            validation_subvolumes: t.validation_subvolumes,
            normalization: self.normalization()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let spec = self.model_spec()?;
        let side = self.side()?;
        if side == 0 {
            return Err(Error::field("sampler.side", "must be >= 1"));
        }
        spec.layer_dims([side; 3])
            .map_err(|e| Error::field("sampler.side", format!("incompatible with the model: {e}")))?;
        self.sampler_config()?;
        self.train_config()?;
        let momentum = self.train.batchnorm_momentum;
        if !(momentum > 0.0 && momentum <= 1.0) {
            return Err(Error::field("train.batchnorm_momentum", "must be in (0, 1]"));
        }
        if self.inference.batch == 0 {
            return Err(Error::field("inference.batch", "must be >= 1"));
        }
        if let Some(i) = self.data.train.iter().find(|i| self.data.validation.contains(i)) {
            return Err(Error::field("data.validation", format!("entry {i} is also a training entry")));
        }
        let p = &self.paths;
        let named = [("paths.checkpoint", &p.checkpoint), ("paths.output", &p.output), ("paths.log", &p.log)];
        for (i, (a, pa)) in named.iter().enumerate() {
            for (b, pb) in &named[i + 1..] {
                if let (Some(x), Some(y)) = (pa, pb) {
                    if x == y {
                        return Err(Error::field(*b, format!("same path as {a}")));
                    }
                }
            }
        }
        Ok(())
    }
}
