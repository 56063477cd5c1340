//! The experiment configuration document: one strict TOML file covering
//! training, the relighting network, and the segmenter, plus `key=value`
//! override handling and the two-arm relighting ablation built on top of it.

use crate::hrseg::SegConfig;
use crate::relight::RelightConfig;
use crate::training::{fit, FitInputs, Result, TrainConfig, TrainError};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Format version stamped into every config document; bumped only on
/// incompatible schema changes.
pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub train: TrainConfig,
    pub relight: RelightConfig,
    pub seg: SegConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            train: TrainConfig::default(),
            relight: RelightConfig::default(),
            seg: SegConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parses a config document. Unknown keys anywhere in the tree are
    /// errors — a typo must never silently fall back to a default.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self =
            toml::from_str(text).map_err(|e| TrainError::Config(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| TrainError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(TrainError::Config(format!(
                "config version {} not supported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        self.train.validate()?;
        self.relight
            .validate()
            .map_err(|e| TrainError::Config(e.to_string()))?;
        self.seg
            .validate()
            .map_err(|e| TrainError::Config(e.to_string()))?;
        Ok(())
    }

    /// Serializes the full document with every default made explicit, so
    /// the echo stored in run directories and checkpoints is self-contained.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| TrainError::Config(format!("config encode: {e}")))
    }

    /// Applies dotted-path `key=value` overrides and re-validates. Missing
    /// intermediate tables are created (so `train.adaptation.adv_weight=...`
    /// can switch adaptation on), but a key that the schema does not know
    /// is still rejected by the strict re-parse.
    pub fn with_overrides(&self, overrides: &[(String, String)]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut doc = toml::Value::try_from(self)
            .map_err(|e| TrainError::Config(format!("config encode: {e}")))?;
        for (key, raw) in overrides {
            set_path(&mut doc, key, raw)?;
        }
        let cfg: Self = doc
            .try_into()
            .map_err(|e| TrainError::Config(format!("override produced an invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Splits a CLI `key=value` override argument.
pub fn parse_override(arg: &str) -> Result<(String, String)> {
    let (key, value) = arg.split_once('=').ok_or_else(|| {
        TrainError::Config(format!("override {arg:?} is not of the form key=value"))
    })?;
    if key.is_empty() {
        return Err(TrainError::Config(format!("override {arg:?} has an empty key")));
    }
    Ok((key.trim().to_string(), value.trim().to_string()))
}

/// Interprets an override value with TOML syntax (numbers, bools, arrays,
/// quoted strings); anything that does not parse is taken as a bare string.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(doc: &mut toml::Value, key: &str, raw: &str) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(TrainError::Config(format!("override key {key:?} has an empty segment")));
    }
    let mut node = doc;
    for part in &parts[..parts.len() - 1] {
        let table = node.as_table_mut().ok_or_else(|| {
            TrainError::Config(format!("override key {key:?}: {part:?} is not a table"))
        })?;
        node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    let leaf = parts.last().expect("split always yields at least one part");
    let table = node.as_table_mut().ok_or_else(|| {
        TrainError::Config(format!("override key {key:?}: parent is not a table"))
    })?;
    table.insert(leaf.to_string(), parse_value(raw));
    Ok(())
}

/// One arm of the relighting ablation. The report holds only run-invariant
/// values, so re-running the ablation reproduces it byte for byte.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationArm {
    pub miou: f64,
    pub best_miou: f64,
    pub sample_order_hash: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub with_relight: AblationArm,
    pub without_relight: AblationArm,
    /// `with_relight.miou - without_relight.miou`.
    pub miou_delta: f64,
}

/// Trains the same configuration twice — relighting on, then off — into
/// `run_dir/with_relight` and `run_dir/without_relight`, and writes a
/// comparison to `run_dir/ablation.json`. Both arms share the seed and
/// dataset streams, so they consume identical sample orders.
pub fn ablation_run(base: &ExperimentConfig, run_dir: &Path) -> Result<AblationReport> {
    base.validate()?;
    let mut arms = Vec::with_capacity(2);
    for (enabled, name) in [(true, "with_relight"), (false, "without_relight")] {
        let mut cfg = base.clone();
        cfg.train.relight_enabled = enabled;
        let echo = cfg.to_toml()?;
        let inputs = FitInputs {
            train: &cfg.train,
            relight: &cfg.relight,
            seg: &cfg.seg,
            config_echo: &echo,
        };
        let report = fit(&inputs, &run_dir.join(name))?;
        arms.push(AblationArm {
            miou: report.final_miou,
            best_miou: report.best_miou,
            sample_order_hash: report.sample_order_hash,
        });
    }
    let without_relight = arms.pop().expect("two arms were pushed");
    let with_relight = arms.pop().expect("two arms were pushed");
    let report = AblationReport {
        miou_delta: with_relight.miou - without_relight.miou,
        with_relight,
        without_relight,
    };
    let path = run_dir.join("ablation.json");
    let rendered = serde_json::to_string_pretty(&report)?;
    std::fs::write(&path, rendered).map_err(|e| TrainError::Io {
        path,
        source: e,
    })?;
    Ok(report)
}
