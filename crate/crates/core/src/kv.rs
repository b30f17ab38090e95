//! Flat `key = value` text files.
//!
//! Recipe files, evaluation suites, run configs, and output manifests all use
//! the same line format: one `key = value` pair per line, `#` comments,
//! repeated keys allowed where a consumer expects a list. Consumers declare
//! their schema and reject unknown keys so that typos fail loudly.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum KvError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Malformed { line: usize, text: String },
    #[error("missing required key `{0}`")]
    Missing(String),
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("key `{key}`: {message}")]
    BadValue { key: String, message: String },
}

/// An ordered list of key/value pairs parsed from (or destined for) a flat
/// text file.
#[derive(Debug, Clone, Default)]
pub struct KvFile {
    pairs: Vec<(String, String)>,
}

impl KvFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self, KvError> {
        let mut pairs = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(KvError::Malformed {
                    line: i + 1,
                    text: line.to_string(),
                });
            };
            pairs.push((key.trim().to_string(), value.trim().to_string()));
        }
        Ok(Self { pairs })
    }

    pub fn load(path: &Path) -> Result<Self, KvError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn push(&mut self, key: &str, value: impl ToString) {
        self.pairs.push((key.to_string(), value.to_string()));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.pairs
            .iter()
            .rev()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn get_all<'a>(&'a self, key: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.pairs
            .iter()
            .filter(move |(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str, KvError> {
        self.get(key).ok_or_else(|| KvError::Missing(key.into()))
    }

    pub fn parse_value<T: std::str::FromStr>(&self, key: &str) -> Result<T, KvError> {
        let raw = self.require(key)?;
        raw.parse().map_err(|_| KvError::BadValue {
            key: key.into(),
            message: format!("cannot parse `{raw}`"),
        })
    }

    pub fn parse_or<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T, KvError> {
        match self.get(key) {
            None => Ok(default),
            Some(raw) => raw.parse().map_err(|_| KvError::BadValue {
                key: key.into(),
                message: format!("cannot parse `{raw}`"),
            }),
        }
    }

    /// Error on any key outside the allowed set.
    pub fn check_known_keys(&self, allowed: &[&str]) -> Result<(), KvError> {
        for (k, _) in &self.pairs {
            if !allowed.contains(&k.as_str()) {
                return Err(KvError::UnknownKey(k.clone()));
            }
        }
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.pairs.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.pairs {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), KvError> {
        std::fs::write(path, self.render())?;
        Ok(())
    }
}

/// FNV-1a hash of a string, rendered as fixed-width hex. Used to fingerprint
/// resolved configs in manifests.
pub fn content_hash(text: &str) -> String {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in text.bytes() {
        hash ^= u64::from(byte);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{hash:016x}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_get() {
        let kv = KvFile::parse("# comment\na = 1\nb = two words\na = 3\n").unwrap();
        assert_eq!(kv.get("b"), Some("two words"));
        // Last occurrence wins for scalar reads.
        assert_eq!(kv.get("a"), Some("3"));
        assert_eq!(kv.get_all("a").count(), 2);
    }

    #[test]
    fn malformed_line_rejected() {
        assert!(KvFile::parse("just text\n").is_err());
    }

    #[test]
    fn unknown_key_rejected() {
        let kv = KvFile::parse("a = 1\nzz = 2\n").unwrap();
        assert!(matches!(
            kv.check_known_keys(&["a"]),
            Err(KvError::UnknownKey(_))
        ));
    }

    #[test]
    fn hash_is_stable() {
        assert_eq!(content_hash("abc"), content_hash("abc"));
        assert_ne!(content_hash("abc"), content_hash("abd"));
    }
}
