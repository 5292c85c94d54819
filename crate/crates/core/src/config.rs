//! Aggregated run configuration: one TOML document covering every
//! module, plus `key=value` override support for CLI flags.

use crate::env::EnvConfig;
use crate::rl::MbpoConfig;
use crate::rollout::RolloutConfig;
use crate::tokenizer::TokenizerConfig;
use crate::transformer::TransformerConfig;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("config serialize: {0}")]
    Serialize(#[from] toml::ser::Error),
    #[error("config io: {0}")]
    Io(#[from] std::io::Error),
    #[error("override `{key}`: {msg}")]
    Override { key: String, msg: String },
}

pub type Result<T> = std::result::Result<T, ConfigError>;

/// Settings for rollout-fidelity evaluation reports.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Cap on evaluated trajectories; 0 means all.
    pub max_trajectories: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { max_trajectories: 0 }
    }
}

/// Every tunable in one document.  Unset keys take their defaults, so an
/// empty file (or none at all) is a valid configuration.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub env: EnvConfig,
    pub tokenizer: TokenizerConfig,
    pub transformer: TransformerConfig,
    pub rollout: RolloutConfig,
    pub mbrl: MbpoConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Parses a TOML document and layers `key=value` overrides on top.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Value = toml::from_str(text)?;
        for entry in overrides {
            let (key, raw) = entry.split_once('=').ok_or_else(|| ConfigError::Override {
                key: entry.clone(),
                msg: "expected key=value".into(),
            })?;
            set_key(&mut doc, key.trim(), raw.trim())?;
        }
        Ok(doc.try_into()?)
    }

    /// Reads an optional config file; no file means pure defaults.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)?,
            None => String::new(),
        };
        Self::parse(&text, overrides)
    }

    /// Canonical text of the fully-resolved configuration.
    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }
}

/// Interprets the raw override value with TOML's literal grammar;
/// anything that does not parse (e.g. a bare word) becomes a string, so
/// `env.gen_policy=expert` needs no quoting.
fn typed_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Value>(&format!("v = {raw}"))
        .ok()
        .and_then(|doc| doc.get("v").cloned())
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Inserts `raw` at the dotted `key` path, creating tables as needed.
fn set_key(doc: &mut toml::Value, key: &str, raw: &str) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if key.is_empty() || parts.iter().any(|p| p.is_empty()) {
        return Err(ConfigError::Override { key: key.into(), msg: "empty path segment".into() });
    }
    let mut cur = doc;
    for part in &parts[..parts.len() - 1] {
        let table = cur.as_table_mut().ok_or_else(|| ConfigError::Override {
            key: key.into(),
            msg: format!("`{part}` overwrites a non-table value"),
        })?;
        cur = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::map::Map::new()));
    }
    let table = cur.as_table_mut().ok_or_else(|| ConfigError::Override {
        key: key.into(),
        msg: "parent is not a table".into(),
    })?;
    table.insert(parts[parts.len() - 1].to_string(), typed_value(raw));
    Ok(())
}
