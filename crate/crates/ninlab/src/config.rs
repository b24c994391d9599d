//! Flat key=value configuration files.
//!
//! Config files use one `key = value` pair per line; `#` starts a comment
//! and blank lines are ignored. Keys are documented in the README and in
//! [`crate::presets`], which consumes them as overrides on top of a preset.
//! Values are plain scalars or comma-separated lists. Unknown keys are an
//! error (exit code 2 at the CLI) so typos never fail silently.

use std::collections::BTreeMap;
use std::path::Path;

use crate::{Error, Result};

/// An ordered bag of raw key/value strings from a config file, plus
/// bookkeeping of which keys have been consumed so leftovers are reported.
#[derive(Debug, Clone, Default)]
pub struct KvConfig {
    entries: BTreeMap<String, String>,
    consumed: BTreeMap<String, bool>,
}

impl KvConfig {
    /// Parse a config string. Later duplicates of a key override earlier
    /// ones, matching "last flag wins" CLI behavior.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`, got {raw:?}", lineno + 1))
            })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", lineno + 1)));
            }
            entries.insert(key.to_string(), value.trim().to_string());
        }
        let consumed = entries.keys().map(|k| (k.clone(), false)).collect();
        Ok(KvConfig { entries, consumed })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Raw string lookup; marks the key as consumed.
    pub fn get(&mut self, key: &str) -> Option<&str> {
        if let Some(c) = self.consumed.get_mut(key) {
            *c = true;
        }
        self.entries.get(key).map(String::as_str)
    }

    fn parse_as<T: std::str::FromStr>(key: &str, raw: &str, what: &str) -> Result<T> {
        raw.parse().map_err(|_| Error::Config(format!("key {key}: expected {what}, got {raw:?}")))
    }

    pub fn get_f64(&mut self, key: &str) -> Result<Option<f64>> {
        self.get(key)
            .map(|r| r.to_string())
            .map(|r| Self::parse_as(key, &r, "a number"))
            .transpose()
    }

    pub fn get_usize(&mut self, key: &str) -> Result<Option<usize>> {
        self.get(key)
            .map(|r| r.to_string())
            .map(|r| Self::parse_as(key, &r, "a non-negative integer"))
            .transpose()
    }

    pub fn get_u64(&mut self, key: &str) -> Result<Option<u64>> {
        self.get(key)
            .map(|r| r.to_string())
            .map(|r| Self::parse_as(key, &r, "a non-negative integer"))
            .transpose()
    }

    pub fn get_bool(&mut self, key: &str) -> Result<Option<bool>> {
        match self.get(key) {
            None => Ok(None),
            Some("true") | Some("1") | Some("yes") => Ok(Some(true)),
            Some("false") | Some("0") | Some("no") => Ok(Some(false)),
            Some(other) => {
                Err(Error::Config(format!("key {key}: expected a boolean, got {other:?}")))
            }
        }
    }

    pub fn get_string(&mut self, key: &str) -> Option<String> {
        self.get(key).map(str::to_string)
    }

    /// Comma-separated list of numbers.
    pub fn get_f64_list(&mut self, key: &str) -> Result<Option<Vec<f64>>> {
        match self.get(key).map(str::to_string) {
            None => Ok(None),
            Some(raw) => raw
                .split(',')
                .map(|s| Self::parse_as(key, s.trim(), "a number"))
                .collect::<Result<Vec<f64>>>()
                .map(Some),
        }
    }

    /// Comma-separated list of seeds.
    pub fn get_u64_list(&mut self, key: &str) -> Result<Option<Vec<u64>>> {
        match self.get(key).map(str::to_string) {
            None => Ok(None),
            Some(raw) => raw
                .split(',')
                .map(|s| Self::parse_as(key, s.trim(), "a non-negative integer"))
                .collect::<Result<Vec<u64>>>()
                .map(Some),
        }
    }

    /// Error if any key was never consumed by an override handler.
    pub fn finish(&self) -> Result<()> {
        let leftover: Vec<&str> = self
            .consumed
            .iter()
            .filter(|(_, used)| !**used)
            .map(|(k, _)| k.as_str())
            .collect();
        if leftover.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("unknown config key(s): {}", leftover.join(", "))))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_pairs_comments_and_blanks() {
        let mut kv = KvConfig::parse(
            "# header\n\neta = 0.05\nseeds = 1, 2, 3\nname = fc-decay # trailing\n",
        )
        .unwrap();
        assert_eq!(kv.get_f64("eta").unwrap(), Some(0.05));
        assert_eq!(kv.get_u64_list("seeds").unwrap(), Some(vec![1, 2, 3]));
        assert_eq!(kv.get_string("name").as_deref(), Some("fc-decay"));
        kv.finish().unwrap();
    }

    #[test]
    fn duplicate_keys_last_wins() {
        let mut kv = KvConfig::parse("eta = 0.1\neta = 0.2\n").unwrap();
        assert_eq!(kv.get_f64("eta").unwrap(), Some(0.2));
    }

    #[test]
    fn missing_equals_is_an_error() {
        assert!(KvConfig::parse("just a line\n").is_err());
    }

    #[test]
    fn bad_number_is_an_error() {
        let mut kv = KvConfig::parse("eta = fast\n").unwrap();
        assert!(kv.get_f64("eta").is_err());
    }

    #[test]
    fn unconsumed_key_is_reported() {
        let kv = KvConfig::parse("tpyo = 1\n").unwrap();
        let err = kv.finish().unwrap_err().to_string();
        assert!(err.contains("tpyo"), "{err}");
    }

    #[test]
    fn booleans() {
        let mut kv = KvConfig::parse("a = true\nb = 0\nc = maybe\n").unwrap();
        assert_eq!(kv.get_bool("a").unwrap(), Some(true));
        assert_eq!(kv.get_bool("b").unwrap(), Some(false));
        assert!(kv.get_bool("c").is_err());
    }
}
