//! Flat `key = value` configuration files.
//!
//! Keys are the long flag names without dashes (`weight-mode = softmax:0.5`);
//! underscores are accepted as well. A value from the file is only used when
//! the corresponding flag was not given on the command line.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{Context, Result};

/// A mistake in how the tool was invoked, as opposed to bad input data.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Debug, Default)]
pub struct ConfigFile {
    path: Option<PathBuf>,
    entries: BTreeMap<String, String>,
}

impl ConfigFile {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config file {}", path.display()))?;
        Self::parse(&text, path)
    }

    fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| usage(format!("{}:{}: expected key = value", path.display(), n + 1)))?;
            let key = key.trim().replace('_', "-");
            let value = value.trim().trim_matches('"').to_string();
            if entries.insert(key.clone(), value).is_some() {
                return Err(usage(format!("{}:{}: duplicate key {key:?}", path.display(), n + 1)));
            }
        }
        Ok(Self {
            path: Some(path.to_path_buf()),
            entries,
        })
    }

    /// Consumes `key` from the file and stores it into `slot` unless the flag
    /// already set it.
    pub fn fill<T>(&mut self, key: &str, slot: &mut Option<T>) -> Result<()>
    where
        T: FromStr,
        T::Err: fmt::Display,
    {
        if let Some(raw) = self.entries.remove(key) {
            if slot.is_none() {
                let value = raw.parse().map_err(|e| usage(format!("config key {key}: {e}")))?;
                *slot = Some(value);
            }
        }
        Ok(())
    }

    /// Fails on keys that no option consumed, so typos do not go unnoticed.
    pub fn finish(self) -> Result<()> {
        match (self.entries.keys().next(), &self.path) {
            (Some(key), Some(path)) => Err(usage(format!("{}: unknown key {key:?}", path.display()))),
            _ => Ok(()),
        }
    }
}

/// Returns the value of a required option that may come from either source.
pub fn required<T>(slot: Option<T>, flag: &str) -> Result<T> {
    slot.ok_or_else(|| usage(format!("missing required option --{flag}")))
}
