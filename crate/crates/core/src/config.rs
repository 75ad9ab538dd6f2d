//! Flat `key=value` configuration text.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Parsed `key=value` lines. Blank lines and lines starting with `#` are
/// skipped; later keys override earlier ones.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Schema {
                path: path.to_path_buf(),
                line: i as u64 + 1,
                detail: format!("expected key=value, got {line:?}"),
            })?;
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::Schema {
                    path: path.to_path_buf(),
                    line: i as u64 + 1,
                    detail: "empty key".into(),
                });
            }
            entries.insert(k.to_string(), v.trim().to_string());
        }
        Ok(KeyValues { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl Display) {
        self.entries.insert(key.into(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn parsed<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("cannot parse {key}={v:?}"))),
        }
    }

    /// Keys under `prefix.`, with the prefix removed.
    pub fn section(&self, prefix: &str) -> KeyValues {
        let p = format!("{prefix}.");
        let entries = self
            .entries
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(&p).map(|s| (s.to_string(), v.clone())))
            .collect();
        KeyValues { entries }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Overlays `other` onto `self`.
    pub fn merge(&mut self, other: &KeyValues) {
        for (k, v) in &other.entries {
            self.entries.insert(k.clone(), v.clone());
        }
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}

/// Configs that read from and write to flat key-value text.
pub trait Configurable: Sized {
    /// Applies one key; returns `false` when the key is not recognized.
    fn set_key(&mut self, key: &str, value: &str) -> Result<bool>;

    fn to_kv(&self) -> KeyValues;

    fn validate(&self) -> Result<()>;

    /// Overlays every entry of `kv`; unknown keys are an error.
    fn apply(&mut self, kv: &KeyValues) -> Result<()> {
        for (k, v) in kv.iter() {
            if !self.set_key(k, v)? {
                return Err(Error::Config(format!("unknown key {k:?}")));
            }
        }
        self.validate()
    }
}

pub(crate) fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse {key}={value:?}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_sections() {
        let text = "# comment\nvae.hidden = 16\n\nflow.blocks=3\nseed=4\nvae.hidden=24\n";
        let kv = KeyValues::parse(text, Path::new("x.cfg")).unwrap();
        assert_eq!(kv.get("vae.hidden"), Some("24"));
        assert_eq!(kv.parsed::<u64>("seed").unwrap(), Some(4));
        let vae = kv.section("vae");
        assert_eq!(vae.len(), 1);
        assert_eq!(vae.get("hidden"), Some("24"));
        let back = KeyValues::parse(&kv.to_text(), Path::new("y")).unwrap();
        assert_eq!(back, kv);
    }

    #[test]
    fn bad_lines_name_the_line() {
        let err = KeyValues::parse("a=1\nnot a pair\n", Path::new("c.cfg")).unwrap_err();
        assert!(matches!(err, Error::Schema { line: 2, .. }), "{err}");
        assert!(KeyValues::parse("a=x", Path::new("c")).unwrap().parsed::<u32>("a").is_err());
    }
}
