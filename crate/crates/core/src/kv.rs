//! Plain-text `key=value` files with optional `[section]` headers.
//!
//! Used for the binning sidecar, generator parameter echoes and the CLI
//! configuration file. Blank lines and lines starting with `#` are ignored.

use std::fmt::Write as _;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum KvError {
    #[error("line {line}: expected `key=value`, got {text:?}")]
    BadLine { line: usize, text: String },
    #[error("line {line}: duplicate key `{key}`")]
    Duplicate { line: usize, key: String },
}

/// One parsed entry. `section` is empty for keys before the first header.
#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub section: String,
    pub key: String,
    pub value: String,
    pub line: usize,
}

pub fn parse(text: &str) -> Result<Vec<Entry>, KvError> {
    let mut section = String::new();
    let mut out: Vec<Entry> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        if let Some(name) = trimmed.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            section = name.trim().to_string();
            continue;
        }
        let Some((key, value)) = trimmed.split_once('=') else {
            return Err(KvError::BadLine {
                line,
                text: raw.to_string(),
            });
        };
        let key = key.trim();
        if key.is_empty() {
            return Err(KvError::BadLine {
                line,
                text: raw.to_string(),
            });
        }
        if out.iter().any(|e| e.section == section && e.key == key) {
            return Err(KvError::Duplicate {
                line,
                key: key.to_string(),
            });
        }
        out.push(Entry {
            section: section.clone(),
            key: key.to_string(),
            value: value.trim().to_string(),
            line,
        });
    }
    Ok(out)
}

/// Renders unsectioned pairs, one per line, LF terminated.
pub fn render<K: AsRef<str>, V: AsRef<str>>(pairs: &[(K, V)]) -> String {
    let mut s = String::new();
    for (k, v) in pairs {
        let _ = writeln!(s, "{}={}", k.as_ref(), v.as_ref());
    }
    s
}

pub fn lookup<'a>(entries: &'a [Entry], section: &str, key: &str) -> Option<&'a str> {
    entries
        .iter()
        .find(|e| e.section == section && e.key == key)
        .map(|e| e.value.as_str())
}
