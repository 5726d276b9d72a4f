//! Flat key-value experiment configuration with `[section]` prefixes.
//!
//! Grammar: one `key = value` per line; `#` starts a comment; a `[name]`
//! line prefixes subsequent keys with `name.`. CLI flags override file
//! values. The fully resolved configuration is embedded in every output file
//! and hashed to name the run directory, so reruns are content-addressed.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config line {0} is not `key = value`: {1}")]
    BadLine(usize, String),
    #[error("invalid value for `{key}`: {msg}")]
    Invalid { key: String, msg: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, Default)]
pub struct Config {
    map: BTreeMap<String, String>,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut map = BTreeMap::new();
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if line.starts_with('[') && line.ends_with(']') {
                section = line[1..line.len() - 1].trim().to_string();
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(ConfigError::BadLine(i + 1, raw.to_string()));
            };
            let key = if section.is_empty() {
                k.trim().to_string()
            } else {
                format!("{section}.{}", k.trim())
            };
            map.insert(key, v.trim().to_string());
        }
        Ok(Config { map })
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self, ConfigError> {
        Ok(Self::parse(&std::fs::read_to_string(path)?)?)
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.map.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(|s| s.as_str())
    }

    pub fn get_f64(&self, key: &str, default: f64) -> Result<f64, ConfigError> {
        match self.map.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| ConfigError::Invalid {
                key: key.into(),
                msg: format!("`{v}` is not a real number"),
            }),
        }
    }

    pub fn get_usize(&self, key: &str, default: usize) -> Result<usize, ConfigError> {
        match self.map.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| ConfigError::Invalid {
                key: key.into(),
                msg: format!("`{v}` is not a non-negative integer"),
            }),
        }
    }

    pub fn get_u64(&self, key: &str, default: u64) -> Result<u64, ConfigError> {
        match self.map.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| ConfigError::Invalid {
                key: key.into(),
                msg: format!("`{v}` is not an integer"),
            }),
        }
    }

    pub fn get_f64_list(&self, key: &str, default: &[f64]) -> Result<Vec<f64>, ConfigError> {
        match self.map.get(key) {
            None => Ok(default.to_vec()),
            Some(v) => v
                .split(',')
                .map(|s| {
                    s.trim().parse().map_err(|_| ConfigError::Invalid {
                        key: key.into(),
                        msg: format!("`{s}` is not a real number"),
                    })
                })
                .collect(),
        }
    }

    /// Canonical resolved form: sorted `key = value` lines.
    pub fn resolved(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.map {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// FNV-1a hash of the resolved form, as 16 hex digits.
    pub fn content_hash(&self) -> String {
        let mut h: u64 = 0xcbf29ce484222325;
        for b in self.resolved().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        format!("{h:016x}")
    }
}
