//! Plain-text `key = value` configuration files.
//!
//! One pair per line. Blank lines and lines starting with `#` are ignored;
//! a `#` after a value starts a trailing comment. Keys are lowercase ASCII
//! letters, digits, `_`, `-` and `.`. Repeating a key is an error, and so is
//! any key the consumer never asked for (see [`KeyValues::finish`]).

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{format_err, Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KeyValues {
    /// key -> (1-based line, raw value)
    entries: BTreeMap<String, (usize, String)>,
}

fn malformed(reason: String) -> Error {
    format_err("config", reason)
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| malformed(format!("line {line_no}: expected `key = value`")))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty()
                || !k
                    .bytes()
                    .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || matches!(b, b'_' | b'-' | b'.'))
            {
                return Err(malformed(format!("line {line_no}: invalid key `{k}`")));
            }
            if v.is_empty() {
                return Err(malformed(format!("line {line_no}: empty value for `{k}`")));
            }
            if entries.insert(k.to_string(), (line_no, v.to_string())).is_some() {
                return Err(malformed(format!("line {line_no}: duplicate key `{k}`")));
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Removes `key` and parses its value.
    pub fn take<T>(&mut self, key: &str) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: Display,
    {
        match self.entries.remove(key) {
            None => Ok(None),
            Some((line, v)) => v
                .parse()
                .map(Some)
                .map_err(|e| malformed(format!("line {line}: bad value for `{key}`: {e}"))),
        }
    }

    /// Fails if any key was left untaken.
    pub fn finish(self) -> Result<()> {
        match self.entries.into_iter().next() {
            None => Ok(()),
            Some((k, (line, _))) => Err(malformed(format!("line {line}: unknown key `{k}`"))),
        }
    }
}
