//! Declarative run configuration. Defaults give the full-scale training
//! setup; flag overrides take precedence over the file.

use std::fs;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{DateRange, NoiseTarget, Schema, SplitSpec, SynthConfig};
use crate::error::{Error, Result};
use crate::experiment::AblationAxis;
use crate::task_graph::ModelVariant;
use crate::training::TrainConfig;

fn date(y: i32, m: u32, d: u32) -> NaiveDate {
    NaiveDate::from_ymd_opt(y, m, d).expect("valid date")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub dir: PathBuf,
    pub schema: Schema,
    pub split: SplitSpec,
    /// Keep only the last N years of the training range.
    pub train_years: Option<u32>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dir: PathBuf::from("data"),
            schema: Schema::default(),
            split: SplitSpec {
                train: DateRange::new(date(1989, 1, 1), date(1996, 12, 31)),
                val: DateRange::new(date(1997, 1, 1), date(1999, 12, 31)),
                test: DateRange::new(date(2000, 1, 1), date(2009, 12, 31)),
            },
            train_years: None,
        }
    }
}

impl DataConfig {
    /// The split after applying `train_years`.
    pub fn effective_split(&self) -> Result<SplitSpec> {
        let mut split = self.split;
        if let Some(years) = self.train_years {
            if years == 0 {
                return Err(Error::Config("train_years must be at least 1".into()));
            }
            split.train = split.train.last_years(years)?;
        }
        split.validate()?;
        Ok(split)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub variants: Vec<ModelVariant>,
    pub hidden: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variants: vec![ModelVariant::Hcmtl],
            hidden: 256,
            dropout: 0.4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentConfig {
    pub window: usize,
    pub stride: usize,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        SegmentConfig {
            window: 365,
            stride: 182,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub axis: Option<AblationAxis>,
    /// Axis values; empty means the axis defaults.
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    pub level: f64,
    pub target: NoiseTarget,
    pub seed: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub segment: SegmentConfig,
    pub eval: EvalConfig,
    pub noise: NoiseConfig,
    pub synth: SynthConfig,
}

/// Parses `raw` as a TOML value, falling back to a plain string.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Applies `section.key=value` to a parsed table.
fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Usage(format!("override '{spec}' is not of the form key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Usage(format!("override '{spec}' has an empty key")));
    }
    let (last, parents) = keys.split_last().expect("non-empty");
    let mut node = table;
    for k in parents {
        let entry = node
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| Error::Usage(format!("override '{spec}': '{k}' is not a section")))?;
    }
    node.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<RunConfig> {
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` (defaults only when `None`) and applies overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
        let text = match path {
            Some(p) => fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml_str(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.data.effective_split()?;
        if self.model.variants.is_empty() {
            return Err(Error::Config("model.variants is empty".into()));
        }
        if self.model.hidden == 0 {
            return Err(Error::Config("model.hidden must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.model.dropout) {
            return Err(Error::Config(format!(
                "model.dropout {} outside [0, 1)",
                self.model.dropout
            )));
        }
        let SegmentConfig { window, stride } = self.segment;
        if window == 0 || stride == 0 || stride > window {
            return Err(Error::Config(format!(
                "segment needs 1 <= stride <= window, got window {window}, stride {stride}"
            )));
        }
        if !(self.noise.level >= 0.0 && self.noise.level.is_finite()) {
            return Err(Error::Config(format!(
                "noise.level {} must be >= 0",
                self.noise.level
            )));
        }
        Ok(())
    }

    /// Shifts every seed by `offset`.
    pub fn with_seed_offset(mut self, offset: u64) -> RunConfig {
        for s in &mut self.train.seeds {
            *s = s.wrapping_add(offset);
        }
        self.noise.seed = self.noise.seed.wrapping_add(offset);
        self.synth.seed = self.synth.seed.wrapping_add(offset);
        self
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 over everything that shapes a trained model, i.e. all
    /// sections except `eval`. Hex encoded.
    pub fn config_hash(&self) -> String {
        let identity = serde_json::json!({
            "data": self.data,
            "model": self.model,
            "train": self.train,
            "segment": self.segment,
            "noise": self.noise,
            "synth": self.synth,
        });
        let digest = Sha256::digest(identity.to_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Short hash used to name run directories.
    pub fn run_id(&self) -> String {
        self.config_hash()[..16].to_string()
    }
}
