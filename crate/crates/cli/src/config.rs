//! Layered training configuration: built-in defaults, then a TOML or JSON
//! file, then command-line overrides.

use std::fs;
use std::path::Path;

use gsdf_core::trainer::TrainConfig;
use gsdf_core::{Error, Result};
use serde_json::{Map, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Preset {
    /// The published 30000-iteration schedule.
    Paper,
    /// Schedule marks scaled to `--iters`, fewer rays per step.
    Desk,
}

pub fn base_config(preset: Preset, iters: Option<usize>) -> TrainConfig {
    match preset {
        Preset::Paper => TrainConfig {
            iterations: iters.unwrap_or(TrainConfig::default().iterations),
            ..TrainConfig::default()
        },
        Preset::Desk => TrainConfig::desk(iters.unwrap_or(3000)),
    }
}

pub fn read_config_file(path: &Path) -> Result<Value> {
    let text = fs::read_to_string(path).map_err(|e| Error::InvalidParameter(format!("{}: {e}", path.display())))?;
    let is_toml = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("toml"));
    let value: Value = if is_toml {
        toml::from_str(&text).map_err(|e| Error::InvalidParameter(format!("{}: {e}", path.display())))?
    } else {
        serde_json::from_str(&text).map_err(|e| Error::InvalidParameter(format!("{}: {e}", path.display())))?
    };
    if !value.is_object() {
        return Err(Error::InvalidParameter(format!("{}: expected a table of settings", path.display())));
    }
    Ok(value)
}

/// Overlays `patch` onto `base`, recursing into tables. Keys absent from
/// `base` are rejected so typos do not pass silently.
pub fn merge(base: &mut Value, patch: &Value, path: &str) -> Result<()> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                let here = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match b.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v, &here)?,
                    Some(slot) => *slot = v.clone(),
                    // Optional settings serialize as absent when unset.
                    None if OPTIONAL_KEYS.contains(&here.as_str()) => {
                        b.insert(k.clone(), v.clone());
                    }
                    None => return Err(Error::InvalidParameter(format!("unknown config key `{here}`"))),
                }
            }
            Ok(())
        }
        (b, p) => {
            *b = p.clone();
            Ok(())
        }
    }
}

const OPTIONAL_KEYS: &[&str] = &["truncation", "prune_interval"];

pub fn layered(base: TrainConfig, file: Option<&Value>, flags: &Map<String, Value>) -> Result<TrainConfig> {
    let mut v = serde_json::to_value(&base).expect("config serializes");
    if let Some(f) = file {
        merge(&mut v, f, "")?;
    }
    merge(&mut v, &Value::Object(flags.clone()), "")?;
    let cfg: TrainConfig =
        serde_json::from_value(v).map_err(|e| Error::InvalidParameter(format!("invalid configuration: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}
