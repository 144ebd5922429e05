use std::path::Path;

use maestro_core::memory::{decode_at_rest, MemoryItem, RecordReport};
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MemToolError {
    #[error("memory file {0} not found")]
    FileMissing(String),
    #[error("cannot read {path}: {reason}")]
    Io { path: String, reason: String },
}

#[derive(Debug, Clone, Serialize)]
pub struct Validation {
    pub records: usize,
    pub reports: Vec<RecordReport>,
}

impl Validation {
    pub fn violations(&self) -> usize {
        self.reports.iter().map(|r| r.violations.len()).sum()
    }

    pub fn warnings(&self) -> usize {
        self.reports.iter().map(|r| r.warnings.len()).sum()
    }

    pub fn is_valid(&self) -> bool {
        self.violations() == 0
    }
}

fn read(path: &Path) -> Result<String, MemToolError> {
    std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => MemToolError::FileMissing(path.display().to_string()),
        _ => MemToolError::Io { path: path.display().to_string(), reason: e.to_string() },
    })
}

pub fn validate_file(path: &Path) -> Result<Validation, MemToolError> {
    let reports = RecordReport::check_all(&read(path)?);
    Ok(Validation { records: reports.len(), reports })
}

/// One line per record: id, turn, modality, tags and a short preview.
/// Records that do not parse are shown by their validation report only.
pub fn dump_lines(path: &Path) -> Result<(Vec<String>, Validation), MemToolError> {
    let text = read(path)?;
    let reports = RecordReport::check_all(&text);
    let mut lines = Vec::new();
    let records = text.lines().filter(|l| !l.trim().is_empty());
    for (report, raw) in reports.iter().zip(records) {
        let shown = serde_json::from_str::<MemoryItem>(raw).ok().and_then(|i| decode_at_rest(i).ok());
        let mut line = match shown {
            Some(item) => {
                let preview: String = item.render_block().chars().take(96).collect();
                format!("{:>4}  {}  {}  [{}]", report.line, item.id, preview, item.content.metadata.context.join(","))
            }
            None => format!("{:>4}  <unreadable record>", report.line),
        };
        for v in &report.violations {
            line.push_str(&format!("\n      violation: {v}"));
        }
        for w in &report.warnings {
            line.push_str(&format!("\n      warning: {w}"));
        }
        lines.push(line);
    }
    Ok((lines, Validation { records: reports.len(), reports }))
}
