//! Flat `key = value` text, used for config files and checkpoint headers.
//!
//! Blank lines and `#` comments are ignored. Keys are unique.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KeyValues {
    map: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key = value, got {line:?}", i + 1)))?;
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::config(format!("line {}: empty key", i + 1)));
            }
            if map.insert(key.to_string(), value.trim().to_string()).is_some() {
                return Err(Error::config(format!("line {}: duplicate key {key}", i + 1)));
            }
        }
        Ok(Self { map })
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.map.insert(key.to_string(), value.to_string());
    }

    pub fn contains(&self, key: &str) -> bool {
        self.map.contains_key(key)
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(String::as_str)
    }

    /// Parsed value of `key`, or `default` when absent.
    pub fn get_or<V: FromStr>(&self, key: &str, default: V) -> Result<V> {
        match self.map.get(key) {
            None => Ok(default),
            Some(s) => parse_value(key, s),
        }
    }

    pub fn require<V: FromStr>(&self, key: &str) -> Result<V> {
        let s = self.map.get(key).ok_or_else(|| Error::config(format!("missing key {key}")))?;
        parse_value(key, s)
    }

    /// Comma-separated list, or `default` when absent.
    pub fn get_list<V: FromStr>(&self, key: &str, default: Vec<V>) -> Result<Vec<V>> {
        match self.map.get(key) {
            None => Ok(default),
            Some(s) => s.split(',').map(|part| parse_value(key, part.trim())).collect(),
        }
    }

    /// Fail on the first key not in `known`.
    pub fn check_known(&self, known: &[&str]) -> Result<()> {
        match self.map.keys().find(|k| !known.contains(&k.as_str())) {
            Some(k) => Err(Error::config(format!("unknown key {k}"))),
            None => Ok(()),
        }
    }

    pub fn extend(&mut self, other: &KeyValues) {
        for (k, v) in &other.map {
            self.map.insert(k.clone(), v.clone());
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn to_text(&self) -> String {
        self.map.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

fn parse_value<V: FromStr>(key: &str, s: &str) -> Result<V> {
    s.parse().map_err(|_| Error::config(format!("{key}: cannot parse {s:?}")))
}
