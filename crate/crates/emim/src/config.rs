//! Flat `key=value` configuration text.
//!
//! One key per line, `#` comments, dotted prefixes as sections. Consumers
//! `take_*` the keys they understand (each with a default); whatever is left
//! when [`ConfigMap::finish`] runs is an unknown key and rejected by name,
//! so typos never pass silently.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default)]
pub struct ConfigMap {
    values: BTreeMap<String, String>,
}

impl ConfigMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut map = Self::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: `{line}` is not key=value", lineno + 1))
            })?;
            map.values
                .insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(map)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingInput(path.to_path_buf()));
        }
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    /// Applies one `key=value` override (the CLI's `--set`).
    pub fn set(&mut self, pair: &str) -> Result<()> {
        let (key, value) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("`--set {pair}` is not key=value")))?;
        self.values
            .insert(key.trim().to_string(), value.trim().to_string());
        Ok(())
    }

    fn take_raw(&mut self, key: &str) -> Option<String> {
        self.values.remove(key)
    }

    fn parse<T: std::str::FromStr>(key: &str, raw: &str, what: &str) -> Result<T> {
        raw.parse()
            .map_err(|_| Error::Config(format!("key `{key}`: `{raw}` is not {what}")))
    }

    pub fn take_usize(&mut self, key: &str, default: usize) -> Result<usize> {
        match self.take_raw(key) {
            Some(raw) => Self::parse(key, &raw, "an integer"),
            None => Ok(default),
        }
    }

    pub fn take_u64(&mut self, key: &str, default: u64) -> Result<u64> {
        match self.take_raw(key) {
            Some(raw) => Self::parse(key, &raw, "an integer"),
            None => Ok(default),
        }
    }

    pub fn take_f64(&mut self, key: &str, default: f64) -> Result<f64> {
        match self.take_raw(key) {
            Some(raw) => Self::parse(key, &raw, "a number"),
            None => Ok(default),
        }
    }

    pub fn take_bool(&mut self, key: &str, default: bool) -> Result<bool> {
        match self.take_raw(key) {
            Some(raw) => match raw.as_str() {
                "true" | "1" | "yes" | "on" => Ok(true),
                "false" | "0" | "no" | "off" => Ok(false),
                other => Err(Error::Config(format!(
                    "key `{key}`: `{other}` is not a boolean"
                ))),
            },
            None => Ok(default),
        }
    }

    pub fn take_string(&mut self, key: &str, default: &str) -> String {
        self.take_raw(key).unwrap_or_else(|| default.to_string())
    }

    /// Comma-separated list of numbers; `None` when the key is absent.
    pub fn take_f64_list(&mut self, key: &str) -> Result<Option<Vec<f64>>> {
        match self.take_raw(key) {
            Some(raw) => raw
                .split(',')
                .map(|s| Self::parse(key, s.trim(), "a number"))
                .collect::<Result<Vec<f64>>>()
                .map(Some),
            None => Ok(None),
        }
    }

    /// Rejects any key nobody consumed, naming the first offender.
    pub fn finish(self) -> Result<()> {
        match self.values.into_keys().next() {
            Some(key) => Err(Error::UnknownKey(key)),
            None => Ok(()),
        }
    }
}
