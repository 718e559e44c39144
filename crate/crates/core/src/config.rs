//! Plain-text `key = value` configuration with `[section]` headers.
//!
//! `#` and `;` start comment lines. Keys before the first header belong to
//! the unnamed section `""`. Duplicate keys within a section are rejected.

use std::collections::{BTreeMap, BTreeSet};
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Ini {
    sections: BTreeMap<String, BTreeMap<String, (usize, String)>>,
}

impl Ini {
    pub fn parse(text: &str) -> Result<Self> {
        let mut ini = Ini::default();
        let mut current = String::new();
        ini.sections.entry(current.clone()).or_default();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .map(str::trim)
                    .filter(|n| !n.is_empty())
                    .ok_or_else(|| Error::Config(format!("malformed section header, line {line_no}")))?;
                current = name.to_string();
                if ini.sections.contains_key(&current) && !ini.sections[&current].is_empty() {
                    return Err(Error::Config(format!("duplicate section [{current}], line {line_no}")));
                }
                ini.sections.entry(current.clone()).or_default();
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key = value, line {line_no}")))?;
            let key = k.trim();
            if key.is_empty() {
                return Err(Error::Config(format!("empty key, line {line_no}")));
            }
            let section = ini.sections.entry(current.clone()).or_default();
            if section.insert(key.to_string(), (line_no, v.trim().to_string())).is_some() {
                return Err(Error::Config(format!("duplicate key '{key}', line {line_no}")));
            }
        }
        Ok(ini)
    }

    pub fn section(&self, name: &str) -> Section<'_> {
        Section {
            name: name.to_string(),
            entries: self.sections.get(name),
        }
    }

    pub fn section_names(&self) -> impl Iterator<Item = &str> {
        self.sections.iter().filter(|(_, v)| !v.is_empty()).map(|(k, _)| k.as_str())
    }

    /// Rejects sections outside `allowed`.
    pub fn expect_sections(&self, allowed: &[&str]) -> Result<()> {
        for name in self.section_names() {
            if !allowed.contains(&name) {
                let shown = if name.is_empty() { "(top level)" } else { name };
                return Err(Error::Config(format!("unexpected section '{shown}'")));
            }
        }
        Ok(())
    }
}

pub struct Section<'a> {
    name: String,
    entries: Option<&'a BTreeMap<String, (usize, String)>>,
}

impl Section<'_> {
    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.and_then(|e| e.get(key)).map(|(_, v)| v.as_str())
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        let Some((line, v)) = self.entries.and_then(|e| e.get(key)) else {
            return Ok(None);
        };
        v.parse::<T>().map(Some).map_err(|_| {
            Error::Config(format!("invalid value '{v}' for {}.{key}, line {line}", self.name))
        })
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    /// Comma-separated list with surrounding whitespace removed.
    pub fn list(&self, key: &str) -> Option<Vec<String>> {
        self.raw(key).map(|v| {
            v.split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(str::to_string)
                .collect()
        })
    }

    pub fn list_of<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>> {
        let Some(items) = self.list(key) else {
            return Ok(None);
        };
        items
            .iter()
            .map(|s| {
                s.parse::<T>()
                    .map_err(|_| Error::Config(format!("invalid item '{s}' in {}.{key}", self.name)))
            })
            .collect::<Result<Vec<T>>>()
            .map(Some)
    }

    pub fn keys(&self) -> Vec<&str> {
        self.entries.map_or_else(Vec::new, |e| e.keys().map(String::as_str).collect())
    }

    /// Rejects keys outside `allowed`.
    pub fn expect_keys(&self, allowed: &[&str]) -> Result<()> {
        let allowed: BTreeSet<&str> = allowed.iter().copied().collect();
        for k in self.keys() {
            if !allowed.contains(k) {
                return Err(Error::Config(format!("unknown key '{k}' in [{}]", self.name)));
            }
        }
        Ok(())
    }
}
