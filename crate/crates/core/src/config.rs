//! `key = value` text dialect shared by pipeline and scene configs.
//!
//! One entry per line, `#` starts a comment, keys may repeat (e.g. several
//! `object` lines). Order is preserved.

use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("invalid value for `{key}`: `{value}` ({reason})")]
    InvalidValue { key: String, value: String, reason: String },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("missing required key `{0}`")]
    Missing(&'static str),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct KeyValues {
    pub entries: Vec<Entry>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut entries = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| ConfigError::Syntax { line: idx + 1, message: format!("expected `key = value`, got `{line}`") })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(ConfigError::Syntax { line: idx + 1, message: "empty key".into() });
            }
            entries.push(Entry { key: key.to_string(), value: value.trim().to_string(), line: idx + 1 });
        }
        Ok(KeyValues { entries })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Parses a `key=value` override as given on the command line.
    pub fn push_override(&mut self, assignment: &str) -> Result<(), ConfigError> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| ConfigError::Syntax { line: 0, message: format!("override `{assignment}` is not key=value") })?;
        self.entries.push(Entry { key: key.trim().to_string(), value: value.trim().to_string(), line: 0 });
        Ok(())
    }
}

pub fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse::<T>().map_err(|e| ConfigError::InvalidValue { key: key.into(), value: value.into(), reason: e.to_string() })
}

pub fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(ConfigError::InvalidValue { key: key.into(), value: value.into(), reason: "expected a boolean".into() }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_repeats() {
        let kv = KeyValues::parse("# header\na = 1\n\nobject = car box 1 2 3 # trailing\nobject=x\n").unwrap();
        let keys: Vec<_> = kv.entries.iter().map(|e| (e.key.as_str(), e.value.as_str(), e.line)).collect();
        assert_eq!(keys, vec![("a", "1", 2), ("object", "car box 1 2 3", 4), ("object", "x", 5)]);
        assert!(matches!(KeyValues::parse("novalue\n"), Err(ConfigError::Syntax { line: 1, .. })));
        assert!(matches!(KeyValues::parse(" = 3\n"), Err(ConfigError::Syntax { line: 1, .. })));
    }

    #[test]
    fn overrides_and_values() {
        let mut kv = KeyValues::default();
        kv.push_override("workers=3").unwrap();
        assert!(kv.push_override("workers").is_err());
        assert_eq!(parse_value::<usize>("workers", "3").unwrap(), 3);
        assert!(parse_value::<usize>("workers", "-3").is_err());
        assert!(parse_bool("clustering", "on").unwrap());
        assert!(parse_bool("clustering", "maybe").is_err());
    }
}
