//! `key = value` config files: UTF-8, `#` comments, blank lines ignored.
//! Flags always override file values; unknown keys are errors.

use crate::CliError;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Default)]
pub struct ConfigMap {
    entries: BTreeMap<String, String>,
}

pub fn load(path: &Path) -> Result<ConfigMap, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::io(format!("cannot read config {}: {e}", path.display())))?;
    let mut entries = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(CliError::validation(format!(
                "{}:{}: expected `key = value`, got {raw:?}",
                path.display(),
                lineno + 1
            )));
        };
        entries.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(ConfigMap { entries })
}

impl ConfigMap {
    /// Remove and return a raw value.
    pub fn take(&mut self, key: &str) -> Result<Option<String>, CliError> {
        Ok(self.entries.remove(key))
    }

    /// All keys must have been consumed by the invoked command.
    pub fn finish(self) -> Result<(), CliError> {
        if let Some(key) = self.entries.keys().next() {
            return Err(CliError::validation(format!(
                "unknown config key {key:?} for this command"
            )));
        }
        Ok(())
    }
}

/// Fill `slot` from the config when the command line left it unset.
pub fn fill<T: std::str::FromStr>(
    slot: &mut Option<T>,
    cfg: &mut ConfigMap,
    key: &str,
) -> Result<(), CliError> {
    if let Some(raw) = cfg.take(key)? {
        if slot.is_none() {
            let parsed = raw
                .parse::<T>()
                .map_err(|_| CliError::validation(format!("config key {key}: bad value {raw:?}")))?;
            *slot = Some(parsed);
        }
    }
    Ok(())
}

/// Like [`fill`] for plain strings (grid specs, ratio lists).
pub fn fill_parse(
    slot: &mut Option<String>,
    cfg: &mut ConfigMap,
    key: &str,
) -> Result<(), CliError> {
    if let Some(raw) = cfg.take(key)? {
        if slot.is_none() {
            *slot = Some(raw);
        }
    }
    Ok(())
}

pub fn fill_path(
    slot: &mut Option<PathBuf>,
    cfg: &mut ConfigMap,
    key: &str,
) -> Result<(), CliError> {
    if let Some(raw) = cfg.take(key)? {
        if slot.is_none() {
            *slot = Some(PathBuf::from(raw));
        }
    }
    Ok(())
}
