//! Layered settings: built-in preset, then `--config` file, then flags.

use std::path::Path;

use anyhow::Context;
use defusion_core::backbone::PretrainConfig;
use defusion_core::model::ModelConfig;
use defusion_core::trainer::TrainConfig;
use defusion_core::Error;
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const DEFAULT_PRESET: &str = "micro";

/// Everything a command may read from a config file. Field names mirror the
/// library configuration types.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Settings {
    pub preset: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub pretrain: PretrainConfig,
}

impl Settings {
    fn defaults(preset: &str) -> anyhow::Result<Self> {
        let model = ModelConfig::preset(preset)?;
        let pretrain = PretrainConfig {
            crop: model.backbone.img_size,
            ..PretrainConfig::default()
        };
        let train = TrainConfig {
            crop: model.backbone.img_size,
            ..TrainConfig::default()
        };
        Ok(Self {
            preset: preset.to_string(),
            model,
            train,
            pretrain,
        })
    }

    /// Resolves the preset (flag, then file, then default), then overlays the
    /// file's `[model]`, `[train]` and `[pretrain]` tables on its defaults.
    /// Unknown keys are rejected.
    pub fn load(file: Option<&Path>, preset_flag: Option<&str>) -> anyhow::Result<Self> {
        let overrides = match file {
            Some(path) => {
                if !path.exists() {
                    return Err(Error::Config(format!("config file {} does not exist", path.display())).into());
                }
                let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                let table: toml::Table = toml::from_str(&text)
                    .map_err(|e| Error::Config(format!("invalid config file {}: {e}", path.display())))?;
                serde_json::to_value(table)?
            }
            None => Value::Object(Default::default()),
        };
        let preset = preset_flag
            .map(str::to_string)
            .or_else(|| overrides.get("preset").and_then(Value::as_str).map(str::to_string))
            .unwrap_or_else(|| DEFAULT_PRESET.to_string());
        let mut base = serde_json::to_value(Self::defaults(&preset)?)?;
        merge(&mut base, &overrides, "")?;
        base["preset"] = Value::String(preset);
        let settings: Settings =
            serde_json::from_value(base).map_err(|e| Error::Config(format!("invalid config value: {e}")))?;
        Ok(settings)
    }

    /// Logged once per command after flags are applied.
    pub fn report(&self) {
        log::info!(
            "effective configuration: {}",
            serde_json::to_string(self).expect("settings serialise")
        );
    }
}

fn merge(base: &mut Value, over: &Value, path: &str) -> Result<(), Error> {
    let Value::Object(over) = over else {
        *base = over.clone();
        return Ok(());
    };
    let Value::Object(obj) = base else {
        return Err(Error::Config(format!("`{path}` is not a table")));
    };
    for (k, v) in over {
        let key = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
        match obj.get_mut(k) {
            // Optional fields serialise as null; any value may replace them.
            Some(slot) if slot.is_null() => *slot = v.clone(),
            Some(slot) => merge(slot, v, &key)?,
            None => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
    }
    Ok(())
}
