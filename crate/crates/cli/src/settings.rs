//! `key=value` config files and their merge with command-line flags.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::CliError;

/// Keys accepted in a config file; `model.<key>` entries are forwarded to
/// the model configuration.
const KEYS: &[&str] = &[
    "data",
    "synth",
    "feature-dim",
    "noise-control",
    "seed",
    "out",
    "checkpoint",
    "epochs-stage1",
    "epochs-stage2",
    "lr-stage1",
    "lr-stage2",
    "batch-size",
    "mode",
    "beam",
    "max-len",
    "split",
];

#[derive(Clone, Debug, Default)]
pub struct FileConfig {
    values: BTreeMap<String, String>,
}

impl FileConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("config line {}: expected key=value", i + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !KEYS.contains(&k) && !k.starts_with("model.") {
                return Err(CliError::Usage(format!("config line {}: unknown key {k:?}", i + 1)));
            }
            if values.insert(k.to_string(), v.to_string()).is_some() {
                return Err(CliError::Usage(format!("config line {}: duplicate key {k:?}", i + 1)));
            }
        }
        Ok(Self { values })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| r1_core::Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError> {
        self.values
            .get(key)
            .map(|v| {
                v.parse()
                    .map_err(|_| CliError::Usage(format!("config key {key} has invalid value {v:?}")))
            })
            .transpose()
    }

    pub fn flag(&self, key: &str) -> Result<bool, CliError> {
        Ok(self.get::<bool>(key)?.unwrap_or(false))
    }

    /// `model.<key>` entries with the prefix stripped.
    pub fn model_overrides(&self) -> impl Iterator<Item = (&str, &str)> {
        self.values
            .iter()
            .filter_map(|(k, v)| k.strip_prefix("model.").map(|k| (k, v.as_str())))
    }
}

/// Flag value if given, else the config file value.
pub fn pick<T: FromStr>(flag: Option<T>, file: &FileConfig, key: &str) -> Result<Option<T>, CliError> {
    match flag {
        Some(v) => Ok(Some(v)),
        None => file.get(key),
    }
}
