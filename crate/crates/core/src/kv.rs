//! Flat `key=value` text files with `#` comments.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got `{}`", lineno + 1, raw.trim())))?;
            let key = k.trim().to_string();
            if entries.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key `{}`", lineno + 1, key)));
            }
        }
        Ok(KeyValues { entries })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn parse_or<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|e| Error::Config(format!("key `{key}`: cannot parse `{v}`: {e}"))),
        }
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: Display,
    {
        let v = self.get(key).ok_or_else(|| Error::Config(format!("missing key `{key}`")))?;
        v.parse()
            .map_err(|e| Error::Config(format!("key `{key}`: cannot parse `{v}`: {e}")))
    }

    /// Rejects keys outside `known`.
    pub fn check_known(&self, known: &[&str]) -> Result<()> {
        match self.keys().find(|k| !known.contains(k)) {
            Some(k) => Err(Error::Config(format!("unknown key `{k}`"))),
            None => Ok(()),
        }
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_blank_lines() {
        let kv = KeyValues::parse("# header\nbeta = 1\n\nlambda2=40 # strong\n").unwrap();
        assert_eq!(kv.get("beta"), Some("1"));
        assert_eq!(kv.get("lambda2"), Some("40"));
        assert_eq!(kv.parse_or("epochs", 7usize).unwrap(), 7);
    }

    #[test]
    fn rejects_malformed_and_duplicate_lines() {
        assert!(KeyValues::parse("beta 1").is_err());
        assert!(KeyValues::parse("a=1\na=2").is_err());
    }

    #[test]
    fn typed_errors_name_the_key() {
        let kv = KeyValues::parse("epochs=ten").unwrap();
        let err = kv.require::<usize>("epochs").unwrap_err().to_string();
        assert!(err.contains("epochs"), "{err}");
    }
}
