//! Pattern -> canned-response tables backing the scripted controller and the
//! mock experts. First match wins; a table must end in a catch-all.
//!
//! ```toml
//! [[entries]]
//! match = "what flowers"
//! respond = "[S.need_vision] Let me look."
//! pass = "controller"        # optional: controller | fusion
//!
//! [[entries]]
//! match = ".*"
//! respond = "[S.speak] Sorry, could you rephrase?"
//! ```

use std::path::Path;

use regex::{Regex, RegexBuilder};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MockTableError {
    #[error("cannot read mock table {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("mock table parse error: {0}")]
    Parse(String),
    #[error("mock table entry {index}: invalid pattern `{pattern}`: {reason}")]
    BadPattern { index: usize, pattern: String, reason: String },
    #[error("mock table has no catch-all entry")]
    NoCatchAll,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockEntry {
    #[serde(rename = "match")]
    pub pattern: String,
    pub respond: String,
    /// Restricts the entry to one controller pass (`controller` or `fusion`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pass: Option<String>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct RawTable {
    #[serde(default)]
    entries: Vec<MockEntry>,
}

#[derive(Debug, Clone)]
pub struct MockTable {
    entries: Vec<(MockEntry, Regex)>,
}

fn is_catch_all(re: &Regex) -> bool {
    re.is_match("") && re.is_match("Zq 9 ?\nlast line")
}

impl MockTable {
    pub fn new(entries: Vec<MockEntry>) -> Result<Self, MockTableError> {
        let mut compiled = Vec::with_capacity(entries.len());
        for (index, entry) in entries.into_iter().enumerate() {
            let re = RegexBuilder::new(&entry.pattern)
                .case_insensitive(true)
                .dot_matches_new_line(true)
                .build()
                .map_err(|e| MockTableError::BadPattern {
                    index,
                    pattern: entry.pattern.clone(),
                    reason: e.to_string(),
                })?;
            compiled.push((entry, re));
        }
        let table = Self { entries: compiled };
        if !table.entries.iter().any(|(e, re)| e.pass.is_none() && is_catch_all(re)) {
            return Err(MockTableError::NoCatchAll);
        }
        Ok(table)
    }

    pub fn from_toml_str(text: &str) -> Result<Self, MockTableError> {
        let raw: RawTable = toml::from_str(text).map_err(|e| MockTableError::Parse(e.to_string()))?;
        Self::new(raw.entries)
    }

    pub fn load(path: &Path) -> Result<Self, MockTableError> {
        let text = std::fs::read_to_string(path).map_err(|source| MockTableError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    /// First entry whose pattern matches `text` and whose pass (if any) is `pass`.
    pub fn lookup(&self, text: &str, pass: Option<&str>) -> Option<&str> {
        self.entries
            .iter()
            .find(|(entry, re)| {
                let pass_ok = match (&entry.pass, pass) {
                    (None, _) => true,
                    (Some(want), Some(got)) => want == got,
                    (Some(_), None) => false,
                };
                pass_ok && re.is_match(text)
            })
            .map(|(entry, _)| entry.respond.as_str())
    }

    pub fn entries(&self) -> impl Iterator<Item = &MockEntry> {
        self.entries.iter().map(|(e, _)| e)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
