//! Run configuration: a flat `key = value` file plus `--set key=value`
//! overrides, resolved against a model preset.
//!
//! ```text
//! preset = "nano"
//! model.window_size = 4
//! train.epochs = 30
//! loss.alpha_adv = 0.1
//! data.augment = true
//! extractor.seed = 0
//! discriminator.widths = [64, 128, 256, 256, 256]
//! ```

use serde::{Deserialize, Serialize};

use crate::config::{preset, write_flat, ModelConfig};
use crate::discriminator::DISC_WIDTHS;
use crate::error::{Error, Result};
use crate::losses::{LossWeights, VGG16_WIDTHS};

pub const DEFAULT_PRESET: &str = "nano";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Initial learning rate; the phase default when absent.
    pub lr: Option<f64>,
    /// Final learning rate of the linear schedule; the phase default when absent.
    pub final_lr: Option<f64>,
    /// Epoch at which the pretraining schedule drops its learning rate.
    pub drop_epoch: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub mim_ratio: f64,
    pub mim_patch: usize,
    /// Epochs between checkpoints; the final epoch is always saved.
    pub checkpoint_every: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 4,
            seed: 0,
            lr: None,
            final_lr: None,
            drop_epoch: 80,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            mim_ratio: 0.6,
            mim_patch: 32,
            checkpoint_every: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSettings {
    /// Random horizontal flips during training.
    pub augment: bool,
    /// Number of samples written by `make-data`.
    pub samples: usize,
    /// Side length of generated samples; the model input size when absent.
    pub size: Option<usize>,
}

impl Default for DataSettings {
    fn default() -> Self {
        Self { augment: true, samples: 256, size: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractorSettings {
    /// Tensor container with pretrained weights; random weights when absent.
    pub weights: Option<String>,
    pub seed: u64,
    pub widths: [usize; 3],
}

impl Default for ExtractorSettings {
    fn default() -> Self {
        Self { weights: None, seed: 0, widths: VGG16_WIDTHS }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorSettings {
    /// Channels of the five hidden convolutions.
    pub widths: [usize; 5],
}

impl Default for DiscriminatorSettings {
    fn default() -> Self {
        Self { widths: DISC_WIDTHS }
    }
}

/// Fully resolved configuration of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: String,
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainSettings,
    #[serde(default)]
    pub loss: LossWeights,
    #[serde(default)]
    pub data: DataSettings,
    #[serde(default)]
    pub extractor: ExtractorSettings,
    #[serde(default)]
    pub discriminator: DiscriminatorSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::resolve(toml::Table::new()).expect("default preset resolves")
    }
}

/// Parses one `key=value` override. Values that are not valid TOML are taken
/// as bare strings.
pub fn parse_override(s: &str) -> Result<(String, toml::Value)> {
    let (k, v) = s.split_once('=').ok_or_else(|| Error::Config(format!("override `{s}` is not key=value")))?;
    let (k, v) = (k.trim(), v.trim());
    if k.is_empty() {
        return Err(Error::Config(format!("override `{s}` has an empty key")));
    }
    let value = toml::from_str::<toml::Table>(&format!("x = {v}"))
        .ok()
        .and_then(|mut t| t.remove("x"))
        .unwrap_or_else(|| toml::Value::String(v.to_string()));
    Ok((k.to_string(), value))
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("split yields one part");
    let mut t = table;
    for p in parts {
        let entry = t.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        t = entry.as_table_mut().ok_or_else(|| Error::Config(format!("`{key}`: `{p}` is not a section")))?;
    }
    t.insert(last.to_string(), value);
    Ok(())
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

impl RunConfig {
    /// Builds a configuration from file text (may be empty) and overrides,
    /// overrides taking precedence.
    pub fn from_sources(file_text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(file_text).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            let (k, v) = parse_override(o)?;
            set_path(&mut table, &k, v)?;
        }
        Self::resolve(table)
    }

    /// Fills `model` from the named preset, then applies `model.*` keys.
    pub fn resolve(mut table: toml::Table) -> Result<Self> {
        let name = match table.get("preset") {
            None => DEFAULT_PRESET.to_string(),
            Some(toml::Value::String(s)) => s.clone(),
            Some(v) => return Err(Error::Config(format!("preset must be a string, got {v}"))),
        };
        let base = toml::Value::try_from(preset(&name)?).map_err(|e| Error::Config(e.to_string()))?;
        let mut model = base.as_table().cloned().expect("config serializes to a table");
        if let Some(over) = table.remove("model") {
            let over = over.as_table().cloned().ok_or_else(|| Error::Config("`model` must be a section".into()))?;
            merge(&mut model, over);
        }
        table.insert("preset".into(), toml::Value::String(name));
        table.insert("model".into(), toml::Value::Table(model));
        let cfg: RunConfig = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate().into_result()?;
        let t = &self.train;
        if t.epochs == 0 || t.batch_size == 0 || t.checkpoint_every == 0 {
            return Err(Error::Config("train.epochs, train.batch_size and train.checkpoint_every must be positive".into()));
        }
        if !(0.0..=1.0).contains(&t.mim_ratio) || t.mim_patch == 0 {
            return Err(Error::Config("train.mim_ratio must lie in [0, 1] and train.mim_patch be positive".into()));
        }
        if self.extractor.widths.contains(&0) || self.discriminator.widths.contains(&0) {
            return Err(Error::Config("extractor.widths and discriminator.widths must be positive".into()));
        }
        if let Some(s) = self.data.size {
            if s % 32 != 0 || s == 0 {
                return Err(Error::Config(format!("data.size {s} must be a positive multiple of 32")));
            }
        }
        Ok(())
    }

    pub fn sample_size(&self) -> usize {
        self.data.size.unwrap_or(self.model.input_size)
    }

    /// Flat `key = value` rendering that [`from_sources`](Self::from_sources)
    /// reads back unchanged.
    pub fn to_flat_string(&self) -> String {
        let value = toml::Value::try_from(self).expect("config is always representable");
        let mut out = String::new();
        write_flat(&mut out, "", &value);
        out
    }
}
