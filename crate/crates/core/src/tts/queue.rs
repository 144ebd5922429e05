use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use tokio::sync::{mpsc, Semaphore};
use tokio::task::JoinSet;
use tokio::time::Instant;
use tokio_util::sync::CancellationToken;

use super::{estimated_duration_ms, silence, AudioChunk, EngineError, Segment, TtsEngine};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueueState {
    Idle,
    Synthesizing,
    Playing,
    Cleared,
}

#[derive(Debug)]
struct QueueInner {
    generation: u64,
    state: QueueState,
    token: CancellationToken,
    pending: usize,
    buffered: usize,
}

/// Per-session synthesis and playback queue.
///
/// Every utterance runs under a generation number. `clear` bumps the
/// generation and cancels the running producer; consumers drop anything
/// tagged with an older generation, so nothing from a cleared utterance is
/// observed once `clear` has returned.
#[derive(Debug, Clone)]
pub struct TtsQueue {
    session_id: String,
    inner: Arc<Mutex<QueueInner>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueueSnapshot {
    pub session_id: String,
    pub generation: u64,
    pub state: QueueState,
    pub pending: usize,
    pub buffered: usize,
}

impl TtsQueue {
    pub fn new(session_id: impl Into<String>) -> Self {
        Self {
            session_id: session_id.into(),
            inner: Arc::new(Mutex::new(QueueInner {
                generation: 0,
                state: QueueState::Idle,
                token: CancellationToken::new(),
                pending: 0,
                buffered: 0,
            })),
        }
    }

    pub fn generation(&self) -> u64 {
        self.inner.lock().generation
    }

    pub fn state(&self) -> QueueState {
        self.inner.lock().state
    }

    pub fn is_active(&self) -> bool {
        matches!(self.state(), QueueState::Synthesizing | QueueState::Playing)
    }

    pub fn snapshot(&self) -> QueueSnapshot {
        let inner = self.inner.lock();
        QueueSnapshot {
            session_id: self.session_id.clone(),
            generation: inner.generation,
            state: inner.state,
            pending: inner.pending,
            buffered: inner.buffered,
        }
    }

    /// Starts a new utterance, superseding any running one.
    pub fn begin(&self, segments: usize) -> (u64, CancellationToken) {
        let mut inner = self.inner.lock();
        if matches!(inner.state, QueueState::Synthesizing | QueueState::Playing) {
            inner.token.cancel();
        }
        inner.generation += 1;
        inner.token = CancellationToken::new();
        inner.state = QueueState::Synthesizing;
        inner.pending = segments;
        inner.buffered = 0;
        (inner.generation, inner.token.clone())
    }

    /// Cancels the running utterance. Returns whether anything was active;
    /// clearing an idle queue changes nothing.
    pub fn clear(&self) -> bool {
        let mut inner = self.inner.lock();
        if !matches!(inner.state, QueueState::Synthesizing | QueueState::Playing) {
            return false;
        }
        inner.generation += 1;
        inner.token.cancel();
        inner.token = CancellationToken::new();
        inner.state = QueueState::Cleared;
        inner.pending = 0;
        inner.buffered = 0;
        inner.state = QueueState::Idle;
        true
    }

    /// Marks the utterance of `generation` as fully played out.
    pub fn complete(&self, generation: u64) {
        let mut inner = self.inner.lock();
        if inner.generation == generation && inner.state != QueueState::Idle {
            inner.state = QueueState::Idle;
            inner.pending = 0;
            inner.buffered = 0;
        }
    }

    fn update(&self, generation: u64, f: impl FnOnce(&mut QueueInner)) {
        let mut inner = self.inner.lock();
        if inner.generation == generation {
            f(&mut inner);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TtsEvent {
    Chunk(AudioChunk),
    /// The engine failed twice on `index`; silence was substituted.
    Degraded { generation: u64, index: usize, reason: String },
    Interrupted { generation: u64 },
    Finished { generation: u64 },
}

impl TtsEvent {
    pub fn generation(&self) -> u64 {
        match self {
            TtsEvent::Chunk(c) => c.generation,
            TtsEvent::Degraded { generation, .. }
            | TtsEvent::Interrupted { generation }
            | TtsEvent::Finished { generation } => *generation,
        }
    }
}

/// Receiving end of one utterance. Chunks arrive in index order; anything
/// from a superseded generation is discarded on receipt.
#[derive(Debug)]
pub struct TtsStream {
    generation: u64,
    queue: TtsQueue,
    rx: mpsc::UnboundedReceiver<TtsEvent>,
    token: CancellationToken,
    done: bool,
}

impl TtsStream {
    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn queue(&self) -> &TtsQueue {
        &self.queue
    }

    /// Fires when the utterance is cleared or superseded.
    pub fn cancellation(&self) -> CancellationToken {
        self.token.clone()
    }

    pub async fn next(&mut self) -> Option<TtsEvent> {
        if self.done {
            return None;
        }
        let Some(event) = self.rx.recv().await else {
            self.done = true;
            return None;
        };
        let current = self.queue.generation() == self.generation;
        match event {
            TtsEvent::Interrupted { .. } | TtsEvent::Finished { .. } => {
                self.done = true;
                if !current && matches!(event, TtsEvent::Finished { .. }) {
                    return Some(TtsEvent::Interrupted { generation: self.generation });
                }
                Some(event)
            }
            _ if !current => {
                // Superseded: report termination instead of stale audio.
                self.done = true;
                Some(TtsEvent::Interrupted { generation: self.generation })
            }
            other => Some(other),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    /// Size of the worker pool shared by every session using this synthesizer.
    pub workers: usize,
    /// Attempts per segment before silence is substituted.
    pub attempts: u32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { workers: 4, attempts: 2 }
    }
}

/// Drives an engine for any number of sessions through one bounded pool.
#[derive(Clone)]
pub struct Synthesizer {
    engine: Arc<dyn TtsEngine>,
    pool: Arc<Semaphore>,
    config: SynthConfig,
}

impl std::fmt::Debug for Synthesizer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Synthesizer")
            .field("engine", &self.engine.name())
            .field("config", &self.config)
            .finish()
    }
}

struct Synthesized {
    chunk: AudioChunk,
    error: Option<EngineError>,
}

async fn synthesize_one(
    engine: &dyn TtsEngine,
    segment: &Segment,
    generation: u64,
    attempts: u32,
) -> Synthesized {
    let started = Instant::now();
    let mut last_err = None;
    for _ in 0..attempts.max(1) {
        match engine.synthesize(segment).await {
            Ok(samples) => {
                return Synthesized {
                    chunk: AudioChunk {
                        index: segment.index,
                        generation,
                        sample_rate: engine.sample_rate(),
                        samples,
                        synth_latency_ms: started.elapsed().as_millis() as u64,
                        degraded: false,
                    },
                    error: None,
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    Synthesized {
        chunk: AudioChunk {
            index: segment.index,
            generation,
            sample_rate: engine.sample_rate(),
            samples: silence(estimated_duration_ms(segment.word_count), engine.sample_rate()),
            synth_latency_ms: started.elapsed().as_millis() as u64,
            degraded: true,
        },
        error: last_err,
    }
}

impl Synthesizer {
    pub fn new(engine: Arc<dyn TtsEngine>, config: SynthConfig) -> Self {
        Self { engine, pool: Arc::new(Semaphore::new(config.workers.max(1))), config }
    }

    pub fn engine(&self) -> &Arc<dyn TtsEngine> {
        &self.engine
    }

    pub fn config(&self) -> SynthConfig {
        self.config
    }

    /// Dispatches every segment to the pool at once and releases chunks in
    /// index order as soon as each prefix is complete.
    pub fn synthesize_parallel(&self, segments: Vec<Segment>, queue: &TtsQueue) -> TtsStream {
        let (generation, token) = queue.begin(segments.len());
        let (tx, rx) = mpsc::unbounded_channel();
        let this = self.clone();
        let q = queue.clone();
        let t = token.clone();
        tokio::spawn(async move { this.run_parallel(segments, generation, t, tx, q).await });
        TtsStream { generation, queue: queue.clone(), rx, token, done: false }
    }

    /// One segment at a time, in order.
    pub fn synthesize_sequential(&self, segments: Vec<Segment>, queue: &TtsQueue) -> TtsStream {
        let (generation, token) = queue.begin(segments.len());
        let (tx, rx) = mpsc::unbounded_channel();
        let this = self.clone();
        let q = queue.clone();
        let stream_token = token.clone();
        tokio::spawn(async move {
            for (i, seg) in segments.iter().enumerate() {
                let work = async {
                    let _permit = this.pool.acquire().await.expect("pool closed");
                    synthesize_one(this.engine.as_ref(), seg, generation, this.config.attempts).await
                };
                let done = tokio::select! {
                    biased;
                    _ = token.cancelled() => {
                        let _ = tx.send(TtsEvent::Interrupted { generation });
                        return;
                    }
                    done = work => done,
                };
                if let Some(e) = done.error {
                    let _ = tx.send(TtsEvent::Degraded { generation, index: seg.index, reason: e.to_string() });
                }
                q.update(generation, |s| {
                    s.pending = s.pending.saturating_sub(1);
                    if i == 0 {
                        s.state = QueueState::Playing;
                    }
                });
                let _ = tx.send(TtsEvent::Chunk(done.chunk));
            }
            let _ = tx.send(TtsEvent::Finished { generation });
        });
        TtsStream { generation, queue: queue.clone(), rx, token: stream_token, done: false }
    }

    async fn run_parallel(
        self,
        segments: Vec<Segment>,
        generation: u64,
        token: CancellationToken,
        tx: mpsc::UnboundedSender<TtsEvent>,
        queue: TtsQueue,
    ) {
        let mut set = JoinSet::new();
        let mut ids = HashMap::new();
        for seg in &segments {
            let engine = self.engine.clone();
            let pool = self.pool.clone();
            let owned = seg.clone();
            let attempts = self.config.attempts;
            let handle = set.spawn(async move {
                let _permit = pool.acquire_owned().await.expect("pool closed");
                synthesize_one(engine.as_ref(), &owned, generation, attempts).await
            });
            ids.insert(handle.id(), seg.clone());
        }

        let mut buffer: BTreeMap<usize, AudioChunk> = BTreeMap::new();
        let mut next = segments.first().map_or(1, |s| s.index);
        let mut released = 0;
        loop {
            let joined = tokio::select! {
                biased;
                _ = token.cancelled() => {
                    set.abort_all();
                    let _ = tx.send(TtsEvent::Interrupted { generation });
                    return;
                }
                joined = set.join_next_with_id() => joined,
            };
            let Some(joined) = joined else { break };
            let done = match joined {
                Ok((_, done)) => done,
                Err(e) => {
                    let seg = &ids[&e.id()];
                    Synthesized {
                        chunk: AudioChunk {
                            index: seg.index,
                            generation,
                            sample_rate: self.engine.sample_rate(),
                            samples: silence(estimated_duration_ms(seg.word_count), self.engine.sample_rate()),
                            synth_latency_ms: 0,
                            degraded: true,
                        },
                        error: Some(EngineError::Failure(e.to_string())),
                    }
                }
            };
            if let Some(e) = &done.error {
                let _ = tx.send(TtsEvent::Degraded { generation, index: done.chunk.index, reason: e.to_string() });
            }
            buffer.insert(done.chunk.index, done.chunk);
            while let Some(chunk) = buffer.remove(&next) {
                next += 1;
                released += 1;
                let _ = tx.send(TtsEvent::Chunk(chunk));
            }
            let (pending, buffered) = (segments.len() - released - buffer.len(), buffer.len());
            queue.update(generation, |s| {
                s.pending = pending;
                s.buffered = buffered;
                if released > 0 {
                    s.state = QueueState::Playing;
                }
            });
        }
        let _ = tx.send(TtsEvent::Finished { generation });
    }
}
