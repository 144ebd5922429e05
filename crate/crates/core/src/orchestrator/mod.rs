//! Per-session turn executor.
//!
//! A turn runs: transcribe, controller pass, then exactly one branch:
//!
//! * stop: clear the speech queue and record an `interrupt_flag` item (a
//!   `[S.listen]` alongside it also parks the query for completion);
//! * listen: park the partial query and wait for the rest;
//! * full: fan out to the selected experts, fuse their evidence, segment,
//!   synthesize and play, then append `{query, expert data, answer}` to memory
//!   and compress.
//!
//! Playback continues after `handle_turn` returns; the turn's terminal event
//! (`turn_done` or `interrupted`) is emitted when the audio drains or is cut.

mod events;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;
use tokio::task::JoinHandle;
use tokio::time::Instant;
use tokio_util::sync::CancellationToken;

pub use events::{AudioFrame, EventBus, EventEnvelope, EventKind};

use crate::controller::{
    compose_prompt, integrate, run_controller, ControllerBackend, ControllerConfig, Evidence,
    FusionInput,
};
use crate::experts::{
    invoke_all, AsrAdapter, AudioPayload, CallOutcome, ExpertCallRecord, ExpertConfig, ExpertRegistry,
};
use crate::memory::{save_jsonl, MemoryConfig, MemoryItem, MemoryStore};
use crate::protocol::{ControlToken, TokenKind};
use crate::text;
use crate::tts::{
    segment, write_wav, Boundary, ConcatConfig, Segment, StreamConcat, Synthesizer, TtsEvent, TtsQueue,
    TtsStream,
};

pub const INTERRUPT_FLAG: &str = "interrupt_flag";
pub const AWAIT_COMPLETION: &str = "await_completion";
pub const TURN_FAILED: &str = "turn_failed";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OrchestratorConfig {
    pub controller: ControllerConfig,
    pub experts: ExpertConfig,
    pub memory: MemoryConfig,
    pub concat: ConcatConfig,
    /// Seed for memory ids.
    pub seed: u64,
    /// Hold each chunk for its duration, as a real output device would.
    pub realtime_playback: bool,
    /// Save the memory pool as JSONL after every turn.
    pub persist_dir: Option<PathBuf>,
    /// Write each played utterance as a WAV file.
    pub wav_dir: Option<PathBuf>,
}

impl Default for OrchestratorConfig {
    fn default() -> Self {
        Self {
            controller: ControllerConfig::default(),
            experts: ExpertConfig::default(),
            memory: MemoryConfig::default(),
            concat: ConcatConfig::default(),
            seed: 42,
            realtime_playback: true,
            persist_dir: None,
            wav_dir: None,
        }
    }
}

/// Backends shared by every session.
pub struct Runtime {
    pub controller: Arc<dyn ControllerBackend>,
    pub experts: ExpertRegistry,
    pub asr: Arc<dyn AsrAdapter>,
    pub synth: Synthesizer,
    pub config: OrchestratorConfig,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", content = "value", rename_all = "snake_case")]
pub enum TurnInput {
    Text(String),
    Audio(AudioPayload),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionState {
    Idle,
    AwaitingCompletion,
    Processing,
    Speaking,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Full,
    Stop,
    Listen,
    Failed,
    Interrupted,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub asr_ms: Option<f64>,
    pub controller_ms: Option<f64>,
    pub experts_ms: Option<f64>,
    pub fusion_ms: Option<f64>,
    /// From turn start to the first audio frame.
    pub first_audio_ms: Option<f64>,
    /// From turn start until the executor released the turn.
    pub processing_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AudioSummary {
    pub generation: u64,
    pub segments: usize,
    pub delivered: usize,
    pub frames: usize,
    pub sample_rate: u32,
    pub interrupted: bool,
    pub degraded: Vec<usize>,
    /// Still playing when the trace was taken.
    pub streaming: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnResult {
    pub session_id: String,
    pub turn_id: u64,
    pub branch: Branch,
    /// Recognized user input for this turn.
    pub transcript: String,
    /// Query sent to the controller (prefixed by a parked partial, if any).
    pub query: String,
    pub controller_raw: Option<String>,
    pub controls: Vec<ControlToken>,
    pub expert_trace: Vec<ExpertCallRecord>,
    pub final_text: Option<String>,
    pub segments: Vec<Segment>,
    pub audio: Option<AudioSummary>,
    pub memory_added: Vec<String>,
    pub warnings: Vec<String>,
    pub error: Option<String>,
    pub timings: StageTimings,
}

impl TurnResult {
    fn new(session_id: &str, turn_id: u64) -> Self {
        Self {
            session_id: session_id.to_string(),
            turn_id,
            branch: Branch::Failed,
            transcript: String::new(),
            query: String::new(),
            controller_raw: None,
            controls: Vec::new(),
            expert_trace: Vec::new(),
            final_text: None,
            segments: Vec::new(),
            audio: None,
            memory_added: Vec::new(),
            warnings: Vec::new(),
            error: None,
            timings: StageTimings::default(),
        }
    }

    /// The result without wall-clock measurements: timings are dropped and
    /// expert latencies zeroed.
    pub fn stable_view(&self) -> Value {
        let mut copy = self.clone();
        copy.timings = StageTimings::default();
        for r in &mut copy.expert_trace {
            r.latency_ms = 0.0;
        }
        let mut v = serde_json::to_value(copy).expect("turn result serializes");
        v.as_object_mut().expect("object").remove("timings");
        v
    }

    pub fn calls_to(&self, modality: &str) -> usize {
        self.expert_trace
            .iter()
            .filter(|r| r.modality == modality && r.outcome != CallOutcome::SkippedCached)
            .count()
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum OrchestratorError {
    #[error("session {0} is already processing a turn")]
    Busy(String),
    #[error("unknown turn {0}")]
    UnknownTurn(u64),
}

#[derive(Debug, Clone)]
struct PendingMedia {
    modality: String,
    media_type: String,
    bytes: Vec<u8>,
    tags: Vec<String>,
}

enum Outcome {
    Full(TtsStream),
    Done(Branch),
    Failed { stage: &'static str, error: String },
    Interrupted,
}

pub struct Session {
    id: String,
    runtime: Arc<Runtime>,
    store: tokio::sync::Mutex<MemoryStore>,
    state: Mutex<SessionState>,
    partial: Mutex<Option<String>>,
    pending_media: Mutex<Vec<PendingMedia>>,
    queue: TtsQueue,
    bus: EventBus,
    turns: AtomicU64,
    turn_lock: Arc<tokio::sync::Mutex<()>>,
    traces: Mutex<BTreeMap<u64, TurnResult>>,
    inflight: Mutex<Option<(u64, CancellationToken)>>,
}

impl std::fmt::Debug for Session {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Session").field("id", &self.id).field("state", &self.state()).finish()
    }
}

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1000.0
}

impl Session {
    pub fn new(id: impl Into<String>, runtime: Arc<Runtime>) -> Arc<Self> {
        let memory = runtime.config.memory.clone();
        Self::with_memory(id, runtime, memory)
    }

    pub fn with_memory(id: impl Into<String>, runtime: Arc<Runtime>, memory: MemoryConfig) -> Arc<Self> {
        let id = id.into();
        let store = MemoryStore::new(id.clone(), memory, runtime.config.seed);
        Arc::new(Self {
            queue: TtsQueue::new(id.clone()),
            bus: EventBus::new(id.clone()),
            id,
            runtime,
            store: tokio::sync::Mutex::new(store),
            state: Mutex::new(SessionState::Idle),
            partial: Mutex::new(None),
            pending_media: Mutex::new(Vec::new()),
            turns: AtomicU64::new(0),
            turn_lock: Arc::new(tokio::sync::Mutex::new(())),
            traces: Mutex::new(BTreeMap::new()),
            inflight: Mutex::new(None),
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn state(&self) -> SessionState {
        *self.state.lock()
    }

    pub fn events(&self) -> &EventBus {
        &self.bus
    }

    pub fn queue(&self) -> &TtsQueue {
        &self.queue
    }

    pub fn turn_count(&self) -> u64 {
        self.turns.load(Ordering::SeqCst)
    }

    pub async fn memory_items(&self) -> Vec<MemoryItem> {
        self.store.lock().await.items().to_vec()
    }

    pub async fn with_store<R>(&self, f: impl FnOnce(&MemoryStore) -> R) -> R {
        f(&*self.store.lock().await)
    }

    /// Queues a media payload; it enters memory at the start of the next turn.
    pub fn attach_media(&self, modality: &str, media_type: &str, bytes: Vec<u8>, tags: Vec<String>) {
        self.pending_media.lock().push(PendingMedia {
            modality: modality.to_string(),
            media_type: media_type.to_string(),
            bytes,
            tags,
        });
    }

    pub fn snapshot_trace(&self, turn_id: u64) -> Result<TurnResult, OrchestratorError> {
        self.traces.lock().get(&turn_id).cloned().ok_or(OrchestratorError::UnknownTurn(turn_id))
    }

    pub fn traces(&self) -> Vec<TurnResult> {
        self.traces.lock().values().cloned().collect()
    }

    /// Starts a turn and returns its id without waiting for it to finish.
    pub fn start_turn(
        self: &Arc<Self>,
        input: TurnInput,
    ) -> Result<(u64, JoinHandle<TurnResult>), OrchestratorError> {
        let guard = self
            .turn_lock
            .clone()
            .try_lock_owned()
            .map_err(|_| OrchestratorError::Busy(self.id.clone()))?;
        let turn_id = self.turns.fetch_add(1, Ordering::SeqCst) + 1;
        let token = CancellationToken::new();
        *self.inflight.lock() = Some((turn_id, token.clone()));
        let prior = std::mem::replace(&mut *self.state.lock(), SessionState::Processing);
        let this = self.clone();
        let handle = tokio::spawn(async move {
            let result = this.run_turn(turn_id, input, prior, token).await;
            drop(guard);
            result
        });
        Ok((turn_id, handle))
    }

    pub async fn handle_turn(self: &Arc<Self>, input: TurnInput) -> Result<TurnResult, OrchestratorError> {
        let (_, handle) = self.start_turn(input)?;
        Ok(handle.await.expect("turn task panicked"))
    }

    /// Hard interrupt: clears speech, cancels the in-flight turn and records
    /// an `interrupt_flag`. Returns whether anything was active.
    pub async fn interrupt(&self) -> bool {
        let cleared = self.queue.clear();
        let cancelled = match &*self.inflight.lock() {
            Some((_, token)) if !token.is_cancelled() => {
                token.cancel();
                true
            }
            _ => false,
        };
        if !(cleared || cancelled) {
            return false;
        }
        {
            let mut state = self.state.lock();
            if *state == SessionState::Speaking {
                *state = SessionState::Idle;
            }
        }
        let mut store = self.store.lock().await;
        let turn = self.turns.load(Ordering::SeqCst).max(1);
        let flag = MemoryItem::text(store.next_id(), "text", turn, "interrupted by user", vec![
            INTERRUPT_FLAG.to_string(),
        ])
        .with_source("system");
        if let Err(e) = store.append(flag) {
            tracing::warn!(session = %self.id, "could not record interrupt flag: {e}");
        }
        true
    }

    async fn run_turn(
        self: Arc<Self>,
        turn_id: u64,
        input: TurnInput,
        prior: SessionState,
        token: CancellationToken,
    ) -> TurnResult {
        let started = Instant::now();
        let mut tr = TurnResult::new(&self.id, turn_id);
        let mut query_recorded = false;
        let outcome = {
            let work = self.pipeline(turn_id, input, prior, &mut tr, &mut query_recorded);
            tokio::select! {
                biased;
                _ = token.cancelled() => Outcome::Interrupted,
                o = work => o,
            }
        };

        let mut stream = None;
        match outcome {
            Outcome::Full(s) => {
                tr.branch = Branch::Full;
                stream = Some(s);
            }
            Outcome::Done(branch) => tr.branch = branch,
            Outcome::Failed { stage, error } => {
                tr.branch = Branch::Failed;
                tr.error = Some(format!("{stage}: {error}"));
                self.record_failure(turn_id, &mut tr, query_recorded).await;
                self.set_state_from(SessionState::Processing, SessionState::Idle);
                self.bus.emit(turn_id, EventKind::TurnFailed, json!({"stage": stage, "error": error}));
            }
            Outcome::Interrupted => {
                tr.branch = Branch::Interrupted;
                if !query_recorded && !tr.query.is_empty() {
                    let mut store = self.store.lock().await;
                    let item = MemoryItem::text(store.next_id(), "text", turn_id, tr.query.clone(), vec![
                        "query".to_string(),
                    ])
                    .with_source("user");
                    tr.memory_added.push(item.id.clone());
                    let _ = store.append(item);
                }
                self.set_state_from(SessionState::Processing, SessionState::Idle);
                self.bus.emit(turn_id, EventKind::Interrupted, json!({"during": "processing"}));
            }
        }

        {
            let mut inflight = self.inflight.lock();
            if inflight.as_ref().is_some_and(|(t, _)| *t == turn_id) {
                *inflight = None;
            }
        }
        if let Some(dir) = &self.runtime.config.persist_dir {
            let store = self.store.lock().await;
            if let Err(e) = save_jsonl(&store, &dir.join(format!("{}.jsonl", self.id))) {
                tr.warnings.push(format!("persist: {e}"));
            }
        }
        tr.timings.processing_ms = ms_since(started);
        self.traces.lock().insert(turn_id, tr.clone());

        match (tr.branch, stream) {
            (Branch::Full, Some(stream)) => {
                let this = self.clone();
                let segments = tr.segments.clone();
                tokio::spawn(async move { this.playback(turn_id, stream, segments, started).await });
            }
            (Branch::Stop | Branch::Listen, _) => {
                self.bus.emit(turn_id, EventKind::TurnDone, json!({"branch": tr.branch}));
            }
            (Branch::Full, None) => {
                self.set_state_from(SessionState::Processing, SessionState::Idle);
                self.bus.emit(turn_id, EventKind::TurnDone, json!({"branch": tr.branch, "audio": false}));
            }
            _ => {}
        }
        tr
    }

    fn set_state_from(&self, from: SessionState, to: SessionState) {
        let mut state = self.state.lock();
        if *state == from {
            *state = to;
        }
    }

    async fn record_failure(&self, turn_id: u64, tr: &mut TurnResult, query_recorded: bool) {
        let mut store = self.store.lock().await;
        let mut refs = Vec::new();
        if !query_recorded {
            let item = MemoryItem::text(store.next_id(), "text", turn_id, tr.query.clone(), vec![
                "query".to_string(),
            ])
            .with_source("user");
            refs.push(item.id.clone());
            tr.memory_added.push(item.id.clone());
            if let Err(e) = store.append(item) {
                tr.warnings.push(format!("memory: {e}"));
            }
        }
        let record = MemoryItem::text(
            store.next_id(),
            "text",
            turn_id,
            tr.error.clone().unwrap_or_default(),
            vec![TURN_FAILED.to_string()],
        )
        .with_source("system")
        .with_references(refs);
        tr.memory_added.push(record.id.clone());
        if let Err(e) = store.append(record) {
            tr.warnings.push(format!("memory: {e}"));
        }
    }

    async fn pipeline(
        &self,
        turn_id: u64,
        input: TurnInput,
        prior: SessionState,
        tr: &mut TurnResult,
        query_recorded: &mut bool,
    ) -> Outcome {
        let rt = &self.runtime;

        // Media attached since the last turn.
        let mut media_ids = Vec::new();
        {
            let pending = std::mem::take(&mut *self.pending_media.lock());
            let mut store = self.store.lock().await;
            for m in pending {
                let item = MemoryItem::binary(store.next_id(), &m.modality, turn_id, &m.media_type, &m.bytes, m.tags);
                media_ids.push(item.id.clone());
                if let Err(e) = store.append(item) {
                    return Outcome::Failed { stage: "media", error: e.to_string() };
                }
            }
        }
        tr.memory_added.extend(media_ids);

        let transcript = match input {
            TurnInput::Text(t) => t,
            TurnInput::Audio(payload) => {
                let t0 = Instant::now();
                let r = rt.asr.transcribe(&payload).await;
                tr.timings.asr_ms = Some(ms_since(t0));
                match r {
                    Ok(t) => t,
                    Err(e) => return Outcome::Failed { stage: "asr", error: e.to_string() },
                }
            }
        };
        tr.transcript = transcript.clone();
        let parked = if prior == SessionState::AwaitingCompletion { self.partial.lock().take() } else { None };
        tr.query = match parked {
            Some(p) => format!("{p} {transcript}"),
            None => transcript,
        };
        self.bus.emit(turn_id, EventKind::Transcript, json!({"text": tr.transcript, "query": tr.query}));

        // Controller pass.
        let registry = rt.experts.instructions().snapshot();
        let view = self.store.lock().await.render_timeline();
        let bundle = match compose_prompt(&tr.query, &view, &registry, rt.config.controller.prompt_budget) {
            Ok(b) => b,
            Err(e) => return Outcome::Failed { stage: "controller", error: e.to_string() },
        };
        let t0 = Instant::now();
        let call = match run_controller(rt.controller.as_ref(), &bundle, &registry, rt.config.controller.deadline()).await {
            Ok(c) => c,
            Err(e) => return Outcome::Failed { stage: "controller", error: e.to_string() },
        };
        tr.timings.controller_ms = Some(ms_since(t0));
        let output = call.output;
        tr.controller_raw = Some(output.raw.clone());
        tr.controls = output.controls.clone();
        if !output.diagnostics.unknown_tokens.is_empty() {
            tr.warnings.push(format!("unknown tokens left in content: {:?}", output.diagnostics.unknown_tokens));
        }
        self.bus.emit(
            turn_id,
            EventKind::Controls,
            json!({
                "controls": output.controls.iter().map(|c| c.raw.as_str()).collect::<Vec<_>>(),
                "content": output.content,
            }),
        );

        if output.has(TokenKind::Stop) {
            let was_active = self.queue.clear();
            let listen = output.has(TokenKind::Listen);
            let mut store = self.store.lock().await;
            let mut tags = vec!["query".to_string()];
            if listen {
                tags.push(AWAIT_COMPLETION.to_string());
            }
            let q = MemoryItem::text(store.next_id(), "text", turn_id, tr.query.clone(), tags).with_source("user");
            let flag = MemoryItem::text(store.next_id(), "text", turn_id, "interrupted by user", vec![
                INTERRUPT_FLAG.to_string(),
            ])
            .with_source("system")
            .with_references(vec![q.id.clone()]);
            for item in [q, flag] {
                tr.memory_added.push(item.id.clone());
                if let Err(e) = store.append(item) {
                    tr.warnings.push(format!("memory: {e}"));
                }
            }
            *query_recorded = true;
            if !was_active {
                tr.warnings.push("stop with nothing playing".to_string());
            }
            if listen {
                *self.partial.lock() = Some(tr.query.clone());
                self.set_state_from(SessionState::Processing, SessionState::AwaitingCompletion);
            } else {
                self.set_state_from(SessionState::Processing, SessionState::Idle);
            }
            return Outcome::Done(Branch::Stop);
        }

        if output.has(TokenKind::Listen) {
            let mut store = self.store.lock().await;
            let q = MemoryItem::text(store.next_id(), "text", turn_id, tr.query.clone(), vec![
                "query".to_string(),
                AWAIT_COMPLETION.to_string(),
            ])
            .with_source("user");
            tr.memory_added.push(q.id.clone());
            if let Err(e) = store.append(q) {
                tr.warnings.push(format!("memory: {e}"));
            }
            *query_recorded = true;
            *self.partial.lock() = Some(tr.query.clone());
            self.set_state_from(SessionState::Processing, SessionState::AwaitingCompletion);
            return Outcome::Done(Branch::Listen);
        }

        // Fan-out to the requested, registered modalities.
        let mut modalities = Vec::new();
        for c in output.controls.iter().filter(|c| c.kind == TokenKind::Need) {
            let m = c.modality.clone().unwrap_or_default();
            if registry.has_modality(&m) && rt.experts.backend(&m).is_some() {
                if !modalities.contains(&m) {
                    modalities.push(m);
                }
            } else {
                tr.warnings.push(format!("no expert serves `{m}`"));
            }
        }
        registry.sort_by_registration(&mut modalities, |m| m.as_str());
        for m in &modalities {
            self.bus.emit(turn_id, EventKind::ExpertStarted, json!({"modality": m}));
        }

        let t0 = Instant::now();
        let mut evidence = Vec::new();
        let mut expert_items = Vec::new();
        let mut cited = Vec::new();
        {
            let store = self.store.lock().await;
            let results = invoke_all(&rt.experts, &modalities, &tr.query, &store, &rt.config.experts).await;
            for (m, result) in modalities.iter().zip(results) {
                match result {
                    Ok(inv) => {
                        self.bus.emit(turn_id, EventKind::ExpertDone, json!({"record": inv.record}));
                        evidence.push(Evidence { modality: m.clone(), data: inv.data.clone() });
                        if let Some(id) = &inv.record.cached_item {
                            cited.push(id.clone());
                        } else {
                            let tags = match inv.media_sources.first().and_then(|id| store.get(id)) {
                                Some(src) => src.content.metadata.context.clone(),
                                None => text::terms(&tr.query).into_iter().collect(),
                            };
                            expert_items.push((m.clone(), inv.data, tags, inv.media_sources, inv.record.backend.clone()));
                        }
                        tr.expert_trace.push(inv.record);
                    }
                    Err(failure) => {
                        tr.warnings.push(failure.error.to_string());
                        let payload = json!({"modality": m, "error": failure.error.to_string(), "record": failure.record});
                        self.bus.emit(turn_id, EventKind::ExpertDone, payload);
                        if let Some(r) = failure.record {
                            tr.expert_trace.push(r);
                        }
                    }
                }
            }
        }
        tr.timings.experts_ms = Some(ms_since(t0));

        // Fusion.
        let t0 = Instant::now();
        let fusion = FusionInput { query: tr.query.clone(), original: output.clone(), expert_data: evidence };
        let fused = match integrate(rt.controller.as_ref(), &fusion, &bundle.context, &registry, rt.config.controller.deadline()).await {
            Ok(f) => f,
            Err(e) => return Outcome::Failed { stage: "fusion", error: e.to_string() },
        };
        tr.timings.fusion_ms = Some(ms_since(t0));
        let final_text = fused.text.trim().to_string();
        tr.final_text = Some(final_text.clone());
        self.bus.emit(turn_id, EventKind::FusionDone, json!({"text": final_text, "attempts": fused.attempts}));

        let segments = segment(&final_text).unwrap_or_default();
        for s in &segments {
            self.bus.emit(
                turn_id,
                EventKind::Segment,
                json!({"index": s.index, "text": s.text, "punct": s.punct, "word_count": s.word_count, "boundary": s.boundary}),
            );
        }
        tr.segments = segments.clone();

        let stream = (!segments.is_empty()).then(|| {
            let stream = rt.synth.synthesize_parallel(segments.clone(), &self.queue);
            tr.audio = Some(AudioSummary {
                generation: stream.generation(),
                segments: segments.len(),
                delivered: 0,
                frames: 0,
                sample_rate: rt.synth.engine().sample_rate(),
                interrupted: false,
                degraded: Vec::new(),
                streaming: true,
            });
            self.set_state_from(SessionState::Processing, SessionState::Speaking);
            stream
        });

        // Memory update and compression.
        {
            let mut store = self.store.lock().await;
            let q = MemoryItem::text(store.next_id(), "text", turn_id, tr.query.clone(), vec!["query".to_string()])
                .with_source("user");
            let mut answer_refs = vec![q.id.clone()];
            let mut items = vec![q];
            for (m, data, tags, sources, backend) in expert_items {
                let item = MemoryItem::text(store.next_id(), &m, turn_id, data, tags)
                    .with_source(&backend)
                    .with_references(sources);
                answer_refs.push(item.id.clone());
                items.push(item);
            }
            answer_refs.extend(cited);
            let answer = MemoryItem::text(store.next_id(), "text", turn_id, final_text, vec!["response".to_string()])
                .with_source("assistant")
                .with_references(answer_refs);
            items.push(answer);
            for item in items {
                tr.memory_added.push(item.id.clone());
                if let Err(e) = store.append(item) {
                    tr.warnings.push(format!("memory: {e}"));
                }
            }
            *query_recorded = true;
            if let Err(e) = store.compress() {
                tr.warnings.push(format!("compression: {e}"));
            }
        }

        match stream {
            Some(s) => Outcome::Full(s),
            None => Outcome::Done(Branch::Full),
        }
    }

    async fn playback(self: Arc<Self>, turn_id: u64, mut stream: TtsStream, segments: Vec<Segment>, started: Instant) {
        let generation = stream.generation();
        let token = stream.cancellation();
        let boundaries: Vec<Option<Boundary>> = segments.iter().map(|s| s.boundary).collect();
        let n = boundaries.len();
        let mut concat = StreamConcat::new(self.runtime.config.concat);
        let mut delivered = 0;
        let mut frames = 0;
        let mut degraded = Vec::new();
        let mut interrupted = false;
        let mut first_audio = None;
        let mut recording = self.runtime.config.wav_dir.as_ref().map(|_| Vec::<i16>::new());
        let mut rate = self.runtime.synth.engine().sample_rate();

        loop {
            let event = tokio::select! {
                biased;
                _ = token.cancelled() => Some(TtsEvent::Interrupted { generation }),
                ev = stream.next() => ev,
            };
            match event {
                Some(TtsEvent::Chunk(chunk)) => {
                    rate = chunk.sample_rate;
                    let boundary = boundaries.get(chunk.index - 1).copied().flatten();
                    let mut samples = match concat.push(&chunk, boundary) {
                        Ok(s) => s,
                        Err(e) => {
                            tracing::warn!(session = %self.id, "playback: {e}");
                            continue;
                        }
                    };
                    let is_final = chunk.index == n;
                    if is_final {
                        samples.extend(concat.finish());
                    }
                    if self.queue.generation() != generation {
                        interrupted = true;
                        break;
                    }
                    let duration_ms = samples.len() as f64 * 1000.0 / rate as f64;
                    frames += samples.len();
                    delivered += 1;
                    if let Some(rec) = recording.as_mut() {
                        rec.extend_from_slice(&samples);
                    }
                    first_audio.get_or_insert_with(|| ms_since(started));
                    self.bus.send_audio(AudioFrame {
                        turn_id,
                        generation,
                        index: chunk.index as u32,
                        is_final,
                        sample_rate: rate,
                        samples: Arc::new(samples),
                    });
                    self.bus.emit(
                        turn_id,
                        EventKind::AudioChunkMeta,
                        json!({
                            "generation": generation,
                            "index": chunk.index,
                            "final": is_final,
                            "frames": frames,
                            "duration_ms": duration_ms,
                            "degraded": chunk.degraded,
                        }),
                    );
                    if self.runtime.config.realtime_playback {
                        let hold = std::time::Duration::from_secs_f64(duration_ms / 1000.0);
                        tokio::select! {
                            biased;
                            _ = token.cancelled() => {
                                interrupted = true;
                                break;
                            }
                            _ = tokio::time::sleep(hold) => {}
                        }
                    }
                }
                Some(TtsEvent::Degraded { index, reason, .. }) => {
                    tracing::warn!(session = %self.id, index, "degraded audio: {reason}");
                    degraded.push(index);
                }
                Some(TtsEvent::Finished { .. }) => break,
                Some(TtsEvent::Interrupted { .. }) | None => {
                    interrupted = true;
                    break;
                }
            }
        }

        if !interrupted {
            self.queue.complete(generation);
            if self.queue.generation() == generation {
                self.set_state_from(SessionState::Speaking, SessionState::Idle);
            }
        }
        let mut warning = None;
        if let (Some(dir), Some(rec)) = (&self.runtime.config.wav_dir, &recording) {
            let path = dir.join(format!("{}-turn{turn_id}.wav", self.id));
            if let Err(e) = write_wav(&path, rec, rate) {
                warning = Some(format!("wav sink: {e}"));
            }
        }
        {
            let mut traces = self.traces.lock();
            if let Some(tr) = traces.get_mut(&turn_id) {
                if let Some(a) = tr.audio.as_mut() {
                    a.delivered = delivered;
                    a.frames = frames;
                    a.sample_rate = rate;
                    a.interrupted = interrupted;
                    a.degraded = degraded.clone();
                    a.streaming = false;
                }
                tr.timings.first_audio_ms = first_audio;
                tr.warnings.extend(warning);
            }
        }
        if interrupted {
            self.bus.emit(turn_id, EventKind::Interrupted, json!({"during": "playback", "delivered": delivered}));
        } else {
            self.bus.emit(
                turn_id,
                EventKind::TurnDone,
                json!({"branch": Branch::Full, "delivered": delivered, "frames": frames, "degraded": degraded}),
            );
        }
    }
}
