//! Newline-delimited on-disk form of a session store.
//!
//! One schema-valid record per line, UTF-8. Payloads over the at-rest
//! threshold are lz4-compressed and base64-encoded, with
//! `compression.algorithm = "lz4"` and `compression.ratio = original/compressed`.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use base64::Engine as _;
use serde::Serialize;
use serde_json::Value;

use super::{validate_record, Compression, MemoryError, MemoryItem, MemoryStore};

const B64: base64::engine::GeneralPurpose = base64::engine::general_purpose::STANDARD;

/// Applies at-rest compression to a copy of `item` if its payload is large.
pub fn encode_at_rest(item: &MemoryItem, threshold: usize) -> MemoryItem {
    let Some(raw) = item.payload_bytes() else {
        return item.clone();
    };
    if raw.len() <= threshold || item.compression.is_some() {
        return item.clone();
    }
    let packed = lz4_flex::compress_prepend_size(&raw);
    if packed.len() >= raw.len() {
        return item.clone();
    }
    let mut out = item.clone();
    out.content.data = B64.encode(&packed);
    out.compression = Some(Compression {
        algorithm: Some("lz4".to_string()),
        ratio: Some(raw.len() as f64 / packed.len() as f64),
    });
    out
}

/// Inverse of [`encode_at_rest`].
pub fn decode_at_rest(item: MemoryItem) -> Result<MemoryItem, MemoryError> {
    let algorithm = item.compression.as_ref().and_then(|c| c.algorithm.clone());
    let Some(algorithm) = algorithm else {
        return Ok(item);
    };
    let bad = |msg: String| MemoryError::Io(format!("item {}: {msg}", item.id));
    if algorithm != "lz4" {
        return Err(bad(format!("unsupported compression algorithm `{algorithm}`")));
    }
    let packed = B64.decode(&item.content.data).map_err(|e| bad(e.to_string()))?;
    let raw = lz4_flex::decompress_size_prepended(&packed).map_err(|e| bad(e.to_string()))?;
    let mut out = item.clone();
    out.content.data = if out.is_textual() {
        String::from_utf8(raw).map_err(|e| bad(e.to_string()))?
    } else {
        B64.encode(raw)
    };
    out.compression = None;
    Ok(out)
}

pub fn save_jsonl(store: &MemoryStore, path: &Path) -> Result<(), MemoryError> {
    let io = |e: std::io::Error| MemoryError::Io(format!("{}: {e}", path.display()));
    let tmp = path.with_extension("jsonl.tmp");
    {
        let mut file = fs::File::create(&tmp).map_err(io)?;
        for item in store.items() {
            let line = encode_at_rest(item, store.config().at_rest_threshold).to_json_line();
            writeln!(file, "{line}").map_err(io)?;
        }
        file.sync_all().map_err(io)?;
    }
    fs::rename(&tmp, path).map_err(io)
}

/// Parses and decodes every record; fails on the first invalid line.
pub fn load_jsonl(path: &Path) -> Result<Vec<MemoryItem>, MemoryError> {
    let text = fs::read_to_string(path)
        .map_err(|e| MemoryError::Io(format!("{}: {e}", path.display())))?;
    let mut items = Vec::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let item: MemoryItem = serde_json::from_str(line)
            .map_err(|e| MemoryError::Io(format!("line {}: {e}", n + 1)))?;
        items.push(decode_at_rest(item)?);
    }
    Ok(items)
}

/// Per-line outcome of validating a memory file.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecordReport {
    pub line: usize,
    pub id: Option<String>,
    pub violations: Vec<String>,
    pub warnings: Vec<String>,
}

impl RecordReport {
    /// Validates every line of `text`. Dangling references are warnings.
    pub fn check_all(text: &str) -> Vec<RecordReport> {
        let mut reports: Vec<RecordReport> = Vec::new();
        let mut known: Vec<String> = Vec::new();
        let mut covered: Vec<String> = Vec::new();
        let mut refs: Vec<(usize, Vec<String>)> = Vec::new();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let mut report =
                RecordReport { line: n + 1, id: None, violations: vec![], warnings: vec![] };
            match serde_json::from_str::<Value>(line) {
                Ok(value) => {
                    report.violations = validate_record(&value);
                    report.id = value.get("id").and_then(Value::as_str).map(str::to_string);
                    if let Some(id) = &report.id {
                        if known.contains(id) {
                            report.violations.push(format!("duplicate id {id}"));
                        }
                        known.push(id.clone());
                    }
                    let these: Vec<String> = value
                        .get("references")
                        .and_then(Value::as_array)
                        .map(|a| a.iter().filter_map(|v| v.as_str().map(str::to_string)).collect())
                        .unwrap_or_default();
                    let is_summary = value
                        .pointer("/content/metadata/context")
                        .and_then(Value::as_array)
                        .is_some_and(|a| a.iter().any(|t| t == super::SUMMARY_TAG));
                    if is_summary {
                        covered.extend(these);
                    } else {
                        refs.push((reports.len(), these));
                    }
                }
                Err(e) => report.violations.push(format!("not JSON: {e}")),
            }
            reports.push(report);
        }
        for (idx, these) in refs {
            for r in these {
                if !known.contains(&r) && !covered.contains(&r) {
                    reports[idx].warnings.push(format!("dangling reference {r}"));
                }
            }
        }
        reports
    }
}
