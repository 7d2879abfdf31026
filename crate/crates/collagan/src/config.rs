//! Plain `key = value` configuration files: diff-friendly, order-preserving,
//! no nested structure. `#` starts a comment; blank lines are ignored.

use std::fmt::Write as _;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config line {line}: expected `key = value`")]
    BadLine { line: usize },
    #[error("config line {line}: duplicate key {key:?}")]
    DuplicateKey { line: usize, key: String },
    #[error("config key {key:?}: cannot parse {value:?} as {ty}")]
    BadValue { key: String, value: String, ty: &'static str },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("missing config key {0:?}")]
    MissingKey(String),
}

/// Ordered key=value document.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KvFile {
    entries: Vec<(String, String)>,
}

impl KvFile {
    pub fn new() -> Self {
        KvFile::default()
    }

    /// Parse untrusted text; errors carry 1-based line numbers.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut entries: Vec<(String, String)> = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(ConfigError::BadLine { line: idx + 1 })?;
            let key = key.trim();
            let value = value.trim();
            if key.is_empty() || key.contains(char::is_whitespace) {
                return Err(ConfigError::BadLine { line: idx + 1 });
            }
            if entries.iter().any(|(k, _)| k == key) {
                return Err(ConfigError::DuplicateKey { line: idx + 1, key: key.to_string() });
            }
            entries.push((key.to_string(), value.to_string()));
        }
        Ok(KvFile { entries })
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) {
        let key = key.into();
        let value = value.to_string();
        match self.entries.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => *v = value,
            None => self.entries.push((key, value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(k, _)| k.as_str())
    }

    /// Typed lookup; absent keys yield `Ok(None)`.
    pub fn get_parsed<T: FromStr>(&self, key: &str) -> Result<Option<T>, ConfigError> {
        match self.get(key) {
            None => Ok(None),
            Some(raw) => raw.parse::<T>().map(Some).map_err(|_| ConfigError::BadValue {
                key: key.to_string(),
                value: raw.to_string(),
                ty: std::any::type_name::<T>(),
            }),
        }
    }

    /// Typed lookup that falls back to a default when the key is absent.
    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T, ConfigError> {
        Ok(self.get_parsed(key)?.unwrap_or(default))
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T, ConfigError> {
        self.get_parsed(key)?.ok_or_else(|| ConfigError::MissingKey(key.to_string()))
    }

    /// Reject keys outside the allowed set; catches typos in config files.
    pub fn check_known_keys(&self, allowed: &[&str]) -> Result<(), ConfigError> {
        for key in self.keys() {
            if !allowed.contains(&key) {
                return Err(ConfigError::UnknownKey(key.to_string()));
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_blanks_and_values() {
        let kv = KvFile::parse("# header\nsteps = 100\n\nlr_g = 1e-4  # inline\n").unwrap();
        assert_eq!(kv.get("steps"), Some("100"));
        assert_eq!(kv.get_parsed::<f64>("lr_g").unwrap(), Some(1e-4));
        assert_eq!(kv.get("missing"), None);
    }

    #[test]
    fn round_trips_through_text() {
        let mut kv = KvFile::new();
        kv.set("alpha", 3);
        kv.set("beta", "x y z");
        let reparsed = KvFile::parse(&kv.to_text()).unwrap();
        assert_eq!(kv, reparsed);
    }

    #[test]
    fn errors_name_lines_and_keys() {
        assert!(matches!(
            KvFile::parse("a = 1\nnonsense\n"),
            Err(ConfigError::BadLine { line: 2 })
        ));
        assert!(matches!(
            KvFile::parse("a = 1\na = 2\n"),
            Err(ConfigError::DuplicateKey { line: 2, .. })
        ));
        let kv = KvFile::parse("steps = soon\n").unwrap();
        assert!(matches!(
            kv.get_parsed::<usize>("steps"),
            Err(ConfigError::BadValue { .. })
        ));
        assert!(matches!(
            kv.check_known_keys(&["other"]),
            Err(ConfigError::UnknownKey(_))
        ));
    }
}
