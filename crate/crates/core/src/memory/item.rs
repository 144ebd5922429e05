use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::protocol::is_valid_modality;
use crate::text;

pub const BUILTIN_MODALITIES: &[&str] = &["vision", "audio", "text", "reasoning"];
pub const SUMMARY_TAG: &str = "summary";

/// One cross-modal record. Field names follow the on-disk memory schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemoryItem {
    pub id: String,
    pub modality: String,
    pub content: Content,
    pub turn_id: u64,
    pub references: Vec<String>,
    pub priority: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compression: Option<Compression>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Content {
    #[serde(rename = "type")]
    pub media_type: String,
    /// Plain text for textual media types, base64 otherwise.
    pub data: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f64>>,
    pub metadata: Metadata,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Metadata {
    pub source: String,
    pub timestamp: String,
    pub context: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Compression {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub algorithm: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ratio: Option<f64>,
}

pub fn is_textual(media_type: &str) -> bool {
    media_type.starts_with("text/") || media_type == "application/json"
}

/// Tags surfaced in rendered blocks so the controller can see them.
pub const MARKER_TAGS: &[&str] = &["interrupt_flag", "await_completion", "turn_failed"];

impl MemoryItem {
    /// A plain-text item with the given tags.
    pub fn text(
        id: impl Into<String>,
        modality: &str,
        turn_id: u64,
        data: impl Into<String>,
        tags: Vec<String>,
    ) -> Self {
        Self {
            id: id.into(),
            modality: modality.to_string(),
            content: Content {
                media_type: "text/plain".to_string(),
                data: data.into(),
                embedding: None,
                metadata: Metadata {
                    source: "dialogue".to_string(),
                    timestamp: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
                    context: tags,
                },
            },
            turn_id,
            references: Vec::new(),
            priority: 0.5,
            compression: None,
        }
    }

    /// A binary attachment; `bytes` are stored base64-encoded.
    pub fn binary(
        id: impl Into<String>,
        modality: &str,
        turn_id: u64,
        media_type: &str,
        bytes: &[u8],
        tags: Vec<String>,
    ) -> Self {
        let mut item = Self::text(id, modality, turn_id, String::new(), tags);
        item.content.media_type = media_type.to_string();
        item.content.data = base64::engine::general_purpose::STANDARD.encode(bytes);
        item.content.metadata.source = "user_upload".to_string();
        item
    }

    pub fn with_source(mut self, source: &str) -> Self {
        self.content.metadata.source = source.to_string();
        self
    }

    pub fn with_references(mut self, references: Vec<String>) -> Self {
        self.references = references;
        self
    }

    pub fn with_priority(mut self, priority: f64) -> Self {
        self.priority = priority;
        self
    }

    pub fn is_textual(&self) -> bool {
        is_textual(&self.content.media_type)
    }

    pub fn has_tag(&self, tag: &str) -> bool {
        self.content.metadata.context.iter().any(|t| t == tag)
    }

    pub fn is_summary(&self) -> bool {
        self.has_tag(SUMMARY_TAG)
    }

    /// Raw payload bytes (base64-decoded for binary items).
    pub fn payload_bytes(&self) -> Option<Vec<u8>> {
        if self.is_textual() {
            Some(self.content.data.as_bytes().to_vec())
        } else {
            base64::engine::general_purpose::STANDARD.decode(&self.content.data).ok()
        }
    }

    /// Lexical terms from tags and, for textual items, the payload.
    pub fn terms(&self) -> std::collections::BTreeSet<String> {
        let mut t = text::tag_terms(&self.content.metadata.context);
        if self.is_textual() {
            t.extend(text::terms(&self.content.data));
        }
        t
    }

    /// Prompt-ready single-line block: `[modality @ turn N] body`.
    pub fn render_block(&self) -> String {
        let body = if self.is_textual() {
            self.content.data.split_whitespace().collect::<Vec<_>>().join(" ")
        } else {
            let bytes = self.content.data.len() / 4 * 3;
            format!("<{} attachment, ~{} bytes>", self.content.media_type, bytes)
        };
        let markers: Vec<&str> = self
            .content
            .metadata
            .context
            .iter()
            .map(String::as_str)
            .filter(|t| MARKER_TAGS.contains(t))
            .collect();
        if markers.is_empty() {
            format!("[{} @ turn {}] {}", self.modality, self.turn_id, body)
        } else {
            format!("[{} @ turn {} | {}] {}", self.modality, self.turn_id, markers.join(","), body)
        }
    }

    /// Field-level schema violations of this item.
    pub fn violations(&self) -> Vec<String> {
        match serde_json::to_value(self) {
            Ok(v) => validate_record(&v),
            Err(e) => vec![format!("unserializable: {e}")],
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("memory items always serialize")
    }
}

/// Checks a raw JSON record against the memory schema, one message per
/// violated field. Dangling references are a store-level concern and are
/// not reported here.
pub fn validate_record(value: &Value) -> Vec<String> {
    let mut errs = Vec::new();
    let Some(obj) = value.as_object() else {
        return vec!["record is not a JSON object".to_string()];
    };
    const TOP: &[&str] =
        &["id", "modality", "content", "turn_id", "references", "priority", "compression"];
    for key in obj.keys() {
        if !TOP.contains(&key.as_str()) {
            errs.push(format!("unexpected field `{key}`"));
        }
    }

    match obj.get("id").and_then(Value::as_str) {
        Some(id) if uuid::Uuid::parse_str(id).is_ok() => {}
        Some(id) => errs.push(format!("id `{id}` is not a uuid")),
        None => errs.push("id missing or not a string".to_string()),
    }
    match obj.get("modality").and_then(Value::as_str) {
        Some(m) if is_valid_modality(m) => {}
        Some(m) => errs.push(format!("modality `{m}` is not an identifier")),
        None => errs.push("modality missing or not a string".to_string()),
    }
    match obj.get("turn_id").and_then(Value::as_u64) {
        Some(t) if t >= 1 => {}
        Some(_) => errs.push("turn_id must be >= 1".to_string()),
        None => errs.push("turn_id missing or not a positive integer".to_string()),
    }
    match obj.get("references").and_then(Value::as_array) {
        Some(refs) => {
            for r in refs {
                if !r.as_str().is_some_and(|s| uuid::Uuid::parse_str(s).is_ok()) {
                    errs.push(format!("reference {r} is not a uuid"));
                }
            }
        }
        None => errs.push("references missing or not a list".to_string()),
    }
    match obj.get("priority").and_then(Value::as_f64) {
        Some(p) if (0.0..=1.0).contains(&p) => {}
        Some(_) => errs.push("priority out of [0,1]".to_string()),
        None => errs.push("priority missing or not a number".to_string()),
    }
    if let Some(comp) = obj.get("compression") {
        validate_compression(comp, &mut errs);
    }
    match obj.get("content") {
        Some(content) => {
            let compressed =
                obj.get("compression").and_then(|c| c.get("algorithm")).is_some();
            validate_content(content, compressed, &mut errs)
        }
        None => errs.push("content missing".to_string()),
    }
    errs
}

fn validate_compression(comp: &Value, errs: &mut Vec<String>) {
    let Some(c) = comp.as_object() else {
        errs.push("compression is not an object".to_string());
        return;
    };
    for key in c.keys() {
        if key != "algorithm" && key != "ratio" {
            errs.push(format!("unexpected field `compression.{key}`"));
        }
    }
    if let Some(alg) = c.get("algorithm") {
        match alg.as_str() {
            Some("zstd" | "lz4") => {}
            _ => errs.push(format!("compression.algorithm {alg} is not zstd or lz4")),
        }
    }
    if let Some(ratio) = c.get("ratio") {
        if !ratio.as_f64().is_some_and(|r| r > 0.0) {
            errs.push("compression.ratio must be > 0".to_string());
        }
    }
}

fn validate_content(content: &Value, compressed: bool, errs: &mut Vec<String>) {
    let Some(c) = content.as_object() else {
        errs.push("content is not an object".to_string());
        return;
    };
    for key in c.keys() {
        if !["type", "data", "embedding", "metadata"].contains(&key.as_str()) {
            errs.push(format!("unexpected field `content.{key}`"));
        }
    }
    let media_type = c.get("type").and_then(Value::as_str);
    match media_type {
        Some(t) if is_mime(t) => {}
        Some(t) => errs.push(format!("content.type `{t}` is not a media type")),
        None => errs.push("content.type missing".to_string()),
    }
    match c.get("data").and_then(Value::as_str) {
        Some(data) => {
            let needs_base64 = compressed || media_type.is_some_and(|t| !is_textual(t));
            if needs_base64 && base64::engine::general_purpose::STANDARD.decode(data).is_err() {
                errs.push("content.data is not valid base64 for a binary type".to_string());
            }
        }
        None => errs.push("content.data missing or not a string".to_string()),
    }
    if let Some(emb) = c.get("embedding") {
        if !emb.as_array().is_some_and(|a| a.iter().all(Value::is_number)) {
            errs.push("content.embedding must be a list of numbers".to_string());
        }
    }
    let Some(meta) = c.get("metadata").and_then(Value::as_object) else {
        errs.push("content.metadata missing".to_string());
        return;
    };
    for key in meta.keys() {
        if !["source", "timestamp", "context"].contains(&key.as_str()) {
            errs.push(format!("unexpected field `content.metadata.{key}`"));
        }
    }
    if meta.get("source").and_then(Value::as_str).is_none() {
        errs.push("content.metadata.source missing".to_string());
    }
    match meta.get("timestamp").and_then(Value::as_str) {
        Some(ts) if chrono::DateTime::parse_from_rfc3339(ts).is_ok() => {}
        Some(ts) => errs.push(format!("content.metadata.timestamp `{ts}` is not ISO-8601")),
        None => errs.push("content.metadata.timestamp missing".to_string()),
    }
    if !meta
        .get("context")
        .and_then(Value::as_array)
        .is_some_and(|a| a.iter().all(Value::is_string))
    {
        errs.push("content.metadata.context must be a list of strings".to_string());
    }
}

fn is_mime(t: &str) -> bool {
    let mut parts = t.splitn(2, '/');
    let ok = |s: Option<&str>| {
        s.is_some_and(|s| {
            !s.is_empty()
                && s.chars().all(|c| c.is_ascii_alphanumeric() || "+-.;=_ ".contains(c))
        })
    };
    ok(parts.next()) && ok(parts.next())
}
