//! Expert backends, the per-modality invocation path, and speech recognition.
//!
//! Invoking a modality first consults memory: if an earlier data unit of the
//! same modality covers the query (Jaccard overlap of its context tags with
//! the query terms at or above the cache threshold) it is reused and no
//! backend request is made. Otherwise the backend receives the query, the
//! rendered retrieval context and the newest raw media of that modality.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use futures::StreamExt;
use indexmap::IndexMap;
use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use tokio::time::Instant;

use crate::chat::{data_uri, ChatClient, ChatMessage, ContentPart, ImageUrl};
use crate::controller::BackendError;
use crate::memory::{MemoryItem, MemoryStore};
use crate::mock::MockTable;
use crate::protocol::{is_valid_modality, ControlToken, ProtocolError, SharedRegistry};
use crate::text;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MediaAttachment {
    pub media_type: String,
    #[serde(with = "b64")]
    pub bytes: Vec<u8>,
    /// Memory item the payload came from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_id: Option<String>,
}

mod b64 {
    use base64::Engine as _;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&base64::engine::general_purpose::STANDARD.encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let text = String::deserialize(d)?;
        base64::engine::general_purpose::STANDARD.decode(text).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExpertRequest {
    pub query: String,
    pub context: String,
    pub media: Vec<MediaAttachment>,
}

impl ExpertRequest {
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.query.as_bytes());
        h.update([0]);
        h.update(self.context.as_bytes());
        for m in &self.media {
            h.update([0]);
            h.update(m.media_type.as_bytes());
            h.update(&m.bytes);
        }
        h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

/// A specialized model serving one modality.
#[async_trait]
pub trait ExpertBackend: Send + Sync {
    fn modality(&self) -> &str;
    fn name(&self) -> &str;
    async fn invoke(&self, request: &ExpertRequest) -> Result<String, BackendError>;
    async fn health(&self) -> bool {
        true
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CallOutcome {
    Ok,
    Timeout,
    Error,
    SkippedCached,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertCallRecord {
    pub modality: String,
    pub backend: String,
    pub latency_ms: f64,
    pub input_digest: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<String>,
    pub outcome: CallOutcome,
    /// Memory item that satisfied a cached call.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cached_item: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ExpertError {
    #[error("no backend registered for modality `{0}`")]
    NoBackend(String),
    #[error("backend `{backend}` is already registered for `{modality}`")]
    DuplicateBackend { modality: String, backend: String },
    #[error("`{0}` is not a valid modality name")]
    InvalidModality(String),
    #[error("`{backend}` ({modality}) exceeded its {deadline_ms} ms deadline")]
    BackendTimeout { modality: String, backend: String, deadline_ms: u64 },
    #[error("`{backend}` ({modality}) failed: {source}")]
    BackendError { modality: String, backend: String, source: BackendError },
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
}

/// A successful (possibly cached) modality invocation.
#[derive(Debug, Clone, PartialEq)]
pub struct Invocation {
    pub data: String,
    pub record: ExpertCallRecord,
    /// Media items forwarded to the backend.
    pub media_sources: Vec<String>,
}

/// A failed invocation; `record` is absent only for `NoBackend`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertFailure {
    pub error: ExpertError,
    pub record: Option<ExpertCallRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExpertConfig {
    pub deadline_ms: u64,
    /// Minimum Jaccard overlap between query terms and an item's context
    /// tags for cached reuse.
    pub cache_threshold: f64,
    pub retrieve_k: usize,
    /// Concurrent expert calls per turn; `None` means one per modality.
    pub parallelism: Option<usize>,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        Self { deadline_ms: 60_000, cache_threshold: 0.3, retrieve_k: 3, parallelism: None }
    }
}

type BackendMap = IndexMap<String, Vec<Arc<dyn ExpertBackend>>>;

/// Registered backends per modality, in registration order.
#[derive(Clone, Default)]
pub struct ExpertRegistry {
    backends: Arc<RwLock<BackendMap>>,
    instructions: SharedRegistry,
}

impl std::fmt::Debug for ExpertRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let names: Vec<(String, Vec<String>)> = self
            .backends
            .read()
            .iter()
            .map(|(m, b)| (m.clone(), b.iter().map(|b| b.name().to_string()).collect()))
            .collect();
        f.debug_struct("ExpertRegistry").field("backends", &names).finish()
    }
}

impl ExpertRegistry {
    pub fn new(instructions: SharedRegistry) -> Self {
        Self { backends: Arc::default(), instructions }
    }

    pub fn instructions(&self) -> &SharedRegistry {
        &self.instructions
    }

    /// Registers `backend` for `modality`, adding the `[S.need_<modality>]`
    /// token to the instruction registry if it is missing.
    pub fn register_expert(
        &self,
        modality: &str,
        backend: Arc<dyn ExpertBackend>,
    ) -> Result<(), ExpertError> {
        if !is_valid_modality(modality) {
            return Err(ExpertError::InvalidModality(modality.to_string()));
        }
        let mut backends = self.backends.write();
        let slot = backends.entry(modality.to_string()).or_default();
        if slot.iter().any(|b| b.name() == backend.name()) {
            return Err(ExpertError::DuplicateBackend {
                modality: modality.to_string(),
                backend: backend.name().to_string(),
            });
        }
        self.instructions.update(|r| {
            if !r.has_modality(modality) {
                let raw = ControlToken::need(modality).raw;
                let description = format!("Use when the request needs the {modality} expert.");
                r.register_instruction(&raw, &description, Some(modality))
            } else {
                Ok(())
            }
        })?;
        slot.push(backend);
        Ok(())
    }

    /// First registered backend of `modality`.
    pub fn backend(&self, modality: &str) -> Option<Arc<dyn ExpertBackend>> {
        self.backends.read().get(modality).and_then(|v| v.first().cloned())
    }

    pub fn modalities(&self) -> Vec<String> {
        self.backends.read().iter().filter(|(_, v)| !v.is_empty()).map(|(m, _)| m.clone()).collect()
    }
}

/// Best cached data unit of `modality` for `query`, if any clears the threshold.
pub fn cached_unit<'a>(
    store: &'a MemoryStore,
    modality: &str,
    query: &str,
    threshold: f64,
) -> Option<(&'a MemoryItem, f64)> {
    let q = text::terms(query);
    store
        .items()
        .iter()
        .filter(|i| i.modality == modality && i.is_textual() && !i.is_summary())
        .map(|i| (i, text::jaccard(&q, &text::tag_terms(&i.content.metadata.context))))
        .filter(|(_, j)| *j >= threshold)
        .max_by(|(a, ja), (b, jb)| ja.total_cmp(jb).then(a.turn_id.cmp(&b.turn_id)))
}

/// Newest raw (non-textual) media item of `modality`.
pub fn latest_media<'a>(store: &'a MemoryStore, modality: &str) -> Option<&'a MemoryItem> {
    store.items().iter().rev().find(|i| i.modality == modality && !i.is_textual())
}

pub async fn invoke_modality(
    registry: &ExpertRegistry,
    modality: &str,
    query: &str,
    store: &MemoryStore,
    config: &ExpertConfig,
) -> Result<Invocation, ExpertFailure> {
    let retrieval = store.retrieve(modality, query, config.retrieve_k.max(1));

    if let Some((item, _)) = cached_unit(store, modality, query, config.cache_threshold) {
        let request =
            ExpertRequest { query: query.to_string(), context: retrieval.rendered, media: vec![] };
        return Ok(Invocation {
            data: item.content.data.clone(),
            record: ExpertCallRecord {
                modality: modality.to_string(),
                backend: "memory".to_string(),
                latency_ms: 0.0,
                input_digest: request.digest(),
                output: Some(item.content.data.clone()),
                outcome: CallOutcome::SkippedCached,
                cached_item: Some(item.id.clone()),
                error: None,
            },
            media_sources: vec![],
        });
    }

    let Some(backend) = registry.backend(modality) else {
        return Err(ExpertFailure { error: ExpertError::NoBackend(modality.to_string()), record: None });
    };
    let media: Vec<MediaAttachment> = latest_media(store, modality)
        .and_then(|item| {
            item.payload_bytes().map(|bytes| MediaAttachment {
                media_type: item.content.media_type.clone(),
                bytes,
                source_id: Some(item.id.clone()),
            })
        })
        .into_iter()
        .collect();
    let media_sources = media.iter().filter_map(|m| m.source_id.clone()).collect();
    let request = ExpertRequest { query: query.to_string(), context: retrieval.rendered, media };

    let deadline = Duration::from_millis(config.deadline_ms);
    let started = Instant::now();
    let result = tokio::time::timeout(deadline, backend.invoke(&request)).await;
    let latency_ms = started.elapsed().as_secs_f64() * 1000.0;
    let mut record = ExpertCallRecord {
        modality: modality.to_string(),
        backend: backend.name().to_string(),
        latency_ms,
        input_digest: request.digest(),
        output: None,
        outcome: CallOutcome::Ok,
        cached_item: None,
        error: None,
    };
    let timeout_err = || ExpertError::BackendTimeout {
        modality: modality.to_string(),
        backend: backend.name().to_string(),
        deadline_ms: config.deadline_ms,
    };
    match result {
        Ok(Ok(data)) => {
            record.output = Some(data.clone());
            Ok(Invocation { data, record, media_sources })
        }
        Err(_) | Ok(Err(BackendError::Timeout(_))) => {
            let error = timeout_err();
            record.outcome = CallOutcome::Timeout;
            record.error = Some(error.to_string());
            Err(ExpertFailure { error, record: Some(record) })
        }
        Ok(Err(source)) => {
            let error = ExpertError::BackendError {
                modality: modality.to_string(),
                backend: backend.name().to_string(),
                source,
            };
            record.outcome = CallOutcome::Error;
            record.error = Some(error.to_string());
            Err(ExpertFailure { error, record: Some(record) })
        }
    }
}

/// Invokes every selected modality concurrently. Results come back in the
/// order of `modalities`; one failure never aborts the others.
pub async fn invoke_all(
    registry: &ExpertRegistry,
    modalities: &[String],
    query: &str,
    store: &MemoryStore,
    config: &ExpertConfig,
) -> Vec<Result<Invocation, ExpertFailure>> {
    let limit = config.parallelism.unwrap_or(modalities.len()).max(1);
    let calls: Vec<_> = modalities.iter().map(|m| invoke_modality(registry, m, query, store, config)).collect();
    futures::stream::iter(calls)
        .buffered(limit)
        .collect()
        .await
}

/// Table-driven expert; a pure function of the query.
#[derive(Debug)]
pub struct MockExpert {
    modality: String,
    name: String,
    table: MockTable,
    latency: Duration,
    failure: Option<BackendError>,
    calls: AtomicUsize,
}

impl MockExpert {
    pub fn new(modality: &str, table: MockTable) -> Self {
        Self {
            modality: modality.to_string(),
            name: format!("mock-{modality}"),
            table,
            latency: Duration::ZERO,
            failure: None,
            calls: AtomicUsize::new(0),
        }
    }

    /// A mock answering every query with `response`.
    pub fn constant(modality: &str, response: &str) -> Self {
        let table = MockTable::new(vec![crate::mock::MockEntry {
            pattern: ".*".into(),
            respond: response.into(),
            pass: None,
        }])
        .expect("catch-all table");
        Self::new(modality, table)
    }

    pub fn named(mut self, name: &str) -> Self {
        self.name = name.to_string();
        self
    }

    pub fn with_latency(mut self, latency: Duration) -> Self {
        self.latency = latency;
        self
    }

    /// Makes every call fail with `error` (after the configured latency).
    pub fn failing(mut self, error: BackendError) -> Self {
        self.failure = Some(error);
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

#[async_trait]
impl ExpertBackend for MockExpert {
    fn modality(&self) -> &str {
        &self.modality
    }

    fn name(&self) -> &str {
        &self.name
    }

    async fn invoke(&self, request: &ExpertRequest) -> Result<String, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        if !self.latency.is_zero() {
            tokio::time::sleep(self.latency).await;
        }
        if let Some(err) = &self.failure {
            return Err(err.clone());
        }
        self.table
            .lookup(&request.query, None)
            .map(str::to_string)
            .ok_or_else(|| BackendError::NoMatch(request.query.clone()))
    }
}

/// Expert behind a chat-completion endpoint; media travels as data URIs.
#[derive(Debug, Clone)]
pub struct RemoteExpert {
    modality: String,
    name: String,
    client: ChatClient,
    timeout: Duration,
}

impl RemoteExpert {
    pub fn new(modality: &str, client: ChatClient, timeout: Duration) -> Self {
        Self {
            modality: modality.to_string(),
            name: format!("remote:{}", client.config().model),
            client,
            timeout,
        }
    }
}

#[async_trait]
impl ExpertBackend for RemoteExpert {
    fn modality(&self) -> &str {
        &self.modality
    }

    fn name(&self) -> &str {
        &self.name
    }

    async fn invoke(&self, request: &ExpertRequest) -> Result<String, BackendError> {
        let system = format!(
            "You are the {} expert. Answer the request factually and concisely in plain text.",
            self.modality
        );
        let mut text = request.query.clone();
        if !request.context.is_empty() {
            text = format!("Relevant memory:\n{}\n\nRequest: {}", request.context, request.query);
        }
        let mut parts = vec![ContentPart::Text { text }];
        for m in &request.media {
            parts.push(ContentPart::ImageUrl {
                image_url: ImageUrl { url: data_uri(&m.media_type, &m.bytes) },
            });
        }
        let messages = [ChatMessage::system(system), ChatMessage::user_parts(parts)];
        Ok(self.client.complete(&messages, self.timeout).await?)
    }
}

// ---------------------------------------------------------------------------
// Speech recognition
// ---------------------------------------------------------------------------

/// Media type of synthetic test payloads: the bytes are the transcript.
pub const SYNTHETIC_AUDIO: &str = "audio/x-synthetic-label";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AudioPayload {
    pub media_type: String,
    #[serde(with = "b64")]
    pub bytes: Vec<u8>,
}

impl AudioPayload {
    pub fn synthetic(label: &str) -> Self {
        Self { media_type: SYNTHETIC_AUDIO.to_string(), bytes: label.as_bytes().to_vec() }
    }

    pub fn wav(bytes: Vec<u8>) -> Self {
        Self { media_type: "audio/wav".to_string(), bytes }
    }

    pub fn is_wav(&self) -> bool {
        self.bytes.len() >= 12 && &self.bytes[0..4] == b"RIFF" && &self.bytes[8..12] == b"WAVE"
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AsrError {
    #[error("transcription failed: {0}")]
    TranscriptionFailure(String),
}

#[async_trait]
pub trait AsrAdapter: Send + Sync {
    async fn transcribe(&self, payload: &AudioPayload) -> Result<String, AsrError>;
}

/// Returns the embedded label of synthetic payloads, trimmed.
#[derive(Debug, Clone, Copy, Default)]
pub struct MockAsr;

#[async_trait]
impl AsrAdapter for MockAsr {
    async fn transcribe(&self, payload: &AudioPayload) -> Result<String, AsrError> {
        if payload.bytes.is_empty() {
            return Err(AsrError::TranscriptionFailure("empty payload".into()));
        }
        if payload.media_type != SYNTHETIC_AUDIO {
            return Err(AsrError::TranscriptionFailure(format!(
                "mock recognizer cannot decode `{}`",
                payload.media_type
            )));
        }
        let text = String::from_utf8(payload.bytes.clone())
            .map_err(|e| AsrError::TranscriptionFailure(e.to_string()))?;
        Ok(text.trim().to_string())
    }
}

/// Posts WAV payloads to an `/audio/transcriptions` endpoint.
#[derive(Debug, Clone)]
pub struct RemoteAsr {
    http: reqwest::Client,
    base_url: String,
    model: String,
    api_key: Option<String>,
    timeout: Duration,
}

impl RemoteAsr {
    pub fn new(base_url: &str, model: &str, api_key: Option<String>, timeout: Duration) -> Self {
        Self {
            http: reqwest::Client::new(),
            base_url: base_url.trim_end_matches('/').to_string(),
            model: model.to_string(),
            api_key,
            timeout,
        }
    }
}

#[derive(Deserialize)]
struct TranscriptionResponse {
    text: String,
}

#[async_trait]
impl AsrAdapter for RemoteAsr {
    async fn transcribe(&self, payload: &AudioPayload) -> Result<String, AsrError> {
        let fail = |m: String| AsrError::TranscriptionFailure(m);
        if payload.bytes.is_empty() {
            return Err(fail("empty payload".into()));
        }
        if !payload.is_wav() {
            return Err(fail("payload is not a WAV container".into()));
        }
        let part = reqwest::multipart::Part::bytes(payload.bytes.clone())
            .file_name("turn.wav")
            .mime_str("audio/wav")
            .map_err(|e| fail(e.to_string()))?;
        let form = reqwest::multipart::Form::new().text("model", self.model.clone()).part("file", part);
        let mut req = self
            .http
            .post(format!("{}/audio/transcriptions", self.base_url))
            .multipart(form)
            .timeout(self.timeout);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().await.map_err(|e| fail(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(fail(format!("status {}", resp.status())));
        }
        let body: TranscriptionResponse = resp.json().await.map_err(|e| fail(e.to_string()))?;
        Ok(body.text.trim().to_string())
    }
}

pub async fn transcribe(adapter: &dyn AsrAdapter, payload: &AudioPayload) -> Result<String, AsrError> {
    adapter.transcribe(payload).await
}
