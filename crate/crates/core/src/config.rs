//! Flat key=value settings files.
//!
//! Every command-line flag has a same-named key here; precedence is
//! built-in defaults, then the file, then explicit flags.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

const KNOWN_KEYS: &[&str] = &[
    "data",
    "head",
    "hx",
    "window",
    "dt-mode",
    "copy",
    "epochs",
    "lr",
    "batch-size",
    "seed",
    "out",
    "model",
    "split",
    "filter",
    "tsv",
    "granularity",
    "threshold",
    "embed-dim",
    "time-dim",
    "enc-heads",
    "enc-layers",
    "neighbor-cap",
    "patience",
    "mlp-hidden",
    "satt-layers",
    "satt-heads",
    "conv-channels",
    "lstm-hidden",
    "decoder-blocks",
    "ignore-eval-times",
    "entities",
    "relations",
    "timestamps",
    "pattern",
    "period",
];

#[derive(Debug, Clone, Default)]
pub struct Settings {
    map: BTreeMap<String, String>,
}

impl Settings {
    pub fn empty() -> Settings {
        Settings::default()
    }

    /// Parses `key = value` lines; `#` starts a comment, blank lines are
    /// skipped, unknown keys are rejected.
    pub fn load(path: &Path) -> Result<Settings> {
        let text = fs::read_to_string(path)?;
        let mut map = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Config(format!(
                "{}:{}: expected key=value, got '{line}'",
                path.display(),
                lineno + 1
            )))?;
            let key = key.trim();
            let value = value.trim();
            if !KNOWN_KEYS.contains(&key) {
                return Err(Error::Config(format!(
                    "{}:{}: unknown setting '{key}'",
                    path.display(),
                    lineno + 1
                )));
            }
            if map.insert(key.to_string(), value.to_string()).is_some() {
                return Err(Error::Config(format!(
                    "{}:{}: duplicate setting '{key}'",
                    path.display(),
                    lineno + 1
                )));
            }
        }
        Ok(Settings { map })
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        debug_assert!(KNOWN_KEYS.contains(&key), "unregistered settings key {key}");
        match self.map.get(key) {
            None => Ok(None),
            Some(raw) => raw.parse().map(Some).map_err(|_| {
                Error::Config(format!("setting '{key}' has invalid value '{raw}'"))
            }),
        }
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(String::as_str)
    }
}

/// Applies precedence: explicit flag, then settings file, then default.
pub fn pick<T: FromStr>(
    flag: Option<T>,
    settings: &Settings,
    key: &str,
    default: T,
) -> Result<T> {
    if let Some(v) = flag {
        return Ok(v);
    }
    Ok(settings.get(key)?.unwrap_or(default))
}

/// Like [`pick`] but with no default: the value must come from a flag or
/// the settings file.
pub fn require<T: FromStr>(flag: Option<T>, settings: &Settings, key: &str) -> Result<T> {
    if let Some(v) = flag {
        return Ok(v);
    }
    settings
        .get(key)?
        .ok_or_else(|| Error::Config(format!("missing required setting '--{key}'")))
}
