//! Scripted scenarios: timed user actions plus expectations, replayed
//! against an in-process runtime on a virtual clock.
//!
//! ```toml
//! name = "garden"
//! seed = 42
//!
//! [runtime.experts.vision]      # optional runtime overrides
//! latency_ms = 120
//!
//! [[steps]]
//! at_ms = 0
//! action = "attach_media"
//! modality = "vision"
//! media_type = "image/png"
//! text = "synthetic garden photograph"
//! tags = ["garden", "roses"]
//!
//! [[steps]]
//! id = "look"
//! at_ms = 0
//! action = "say"
//! audio = "What flowers are blooming in this image?"
//!
//! [[steps]]
//! at_ms = 0
//! action = "expect"
//! step = "look"
//! expert_calls = { vision = 1 }
//! ```

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use base64::Engine as _;
use maestro_core::experts::AudioPayload;
use maestro_core::orchestrator::{
    Branch, EventEnvelope, EventKind, Session, SessionState, TurnInput, TurnResult,
};
use maestro_core::experts::CallOutcome;
use maestro_gateway::{ConfigError, RuntimeSettings};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;
use tokio::time::Instant;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read scenario {path}: {reason}")]
    Io { path: String, reason: String },
    #[error("scenario parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Expectation {
    /// Id of the `say` step this expectation inspects.
    pub step: String,
    pub branch: Option<Branch>,
    /// Backend calls made by the turn, per modality (cached reuse excluded).
    pub expert_calls: Option<BTreeMap<String, usize>>,
    /// Cumulative backend calls since the scenario started.
    pub backend_calls: Option<BTreeMap<String, usize>>,
    pub expert_trace_len: Option<usize>,
    /// Modalities answered from memory.
    pub cached: Option<Vec<String>>,
    pub controls: Option<Vec<String>>,
    pub query: Option<String>,
    pub final_text_contains: Option<String>,
    pub final_text_starts_with: Option<String>,
    /// Tags that must appear on some memory item.
    pub memory_tags: Option<Vec<String>>,
    /// Session state right after the turn returned.
    pub state: Option<SessionState>,
    /// Kind of the turn's terminal event; waits for it.
    pub terminal: Option<EventKind>,
    /// The utterance playing before this turn was cut, and none of its
    /// audio was announced after this turn's controller pass.
    pub queue_cleared: Option<bool>,
    /// Exact event kinds of the turn, in order; waits for the terminal event.
    pub events: Option<Vec<EventKind>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum Action {
    Say {
        #[serde(default)]
        text: Option<String>,
        /// Spoken input, routed through the recognizer as a synthetic clip.
        #[serde(default)]
        audio: Option<String>,
    },
    Interrupt,
    AttachMedia {
        modality: String,
        media_type: String,
        #[serde(default)]
        text: Option<String>,
        #[serde(default)]
        base64: Option<String>,
        #[serde(default)]
        file: Option<PathBuf>,
        #[serde(default)]
        tags: Vec<String>,
    },
    Expect(Expectation),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    #[serde(default)]
    pub id: Option<String>,
    #[serde(default)]
    pub at_ms: u64,
    #[serde(flatten)]
    pub action: Action,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub runtime: Option<toml::Table>,
    #[serde(default)]
    pub steps: Vec<Step>,
}

fn default_seed() -> u64 {
    42
}

impl Scenario {
    pub fn from_toml_str(text: &str) -> Result<Self, ScenarioError> {
        let s: Scenario = toml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        s.check()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ScenarioError::Io { path: path.display().to_string(), reason: e.to_string() })?;
        Self::from_toml_str(&text)
    }

    fn check(&self) -> Result<(), ScenarioError> {
        let bad = |m: String| Err(ScenarioError::Parse(m));
        let mut last = 0;
        let mut turns: Vec<&str> = Vec::new();
        for (n, step) in self.steps.iter().enumerate() {
            let at = format!("step {}", n + 1);
            if step.at_ms < last {
                return bad(format!("{at}: at_ms {} goes back in time (previous {last})", step.at_ms));
            }
            last = step.at_ms;
            match &step.action {
                Action::Say { text, audio } => {
                    if text.is_some() == audio.is_some() {
                        return bad(format!("{at}: say needs exactly one of `text` or `audio`"));
                    }
                    if let Some(id) = &step.id {
                        if turns.contains(&id.as_str()) {
                            return bad(format!("{at}: duplicate step id `{id}`"));
                        }
                        turns.push(id);
                    }
                }
                Action::AttachMedia { text, base64, file, .. } => {
                    if [text.is_some(), base64.is_some(), file.is_some()].iter().filter(|b| **b).count() != 1 {
                        return bad(format!("{at}: attach_media needs exactly one of `text`, `base64` or `file`"));
                    }
                }
                Action::Expect(e) => {
                    if !turns.contains(&e.step.as_str()) {
                        return bad(format!("{at}: expect references undefined say step `{}`", e.step));
                    }
                }
                Action::Interrupt => {}
            }
        }
        Ok(())
    }

    /// Runtime settings: defaults, overlaid with the scenario's `[runtime]`.
    pub fn settings(&self) -> Result<RuntimeSettings, ScenarioError> {
        let mut base = toml::Table::try_from(RuntimeSettings::default())
            .map_err(|e| ScenarioError::Parse(e.to_string()))?;
        if let Some(over) = &self.runtime {
            merge(&mut base, over);
        }
        let mut settings: RuntimeSettings =
            base.try_into().map_err(|e: toml::de::Error| ScenarioError::Parse(format!("runtime: {e}")))?;
        settings.seed = self.seed;
        settings.tts.mock.seed = self.seed;
        settings.persist_dir = None;
        Ok(settings)
    }
}

fn merge(base: &mut toml::Table, over: &toml::Table) {
    for (k, v) in over {
        match (base.get_mut(k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assertion {
    pub step: String,
    pub check: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub name: String,
    pub passed: bool,
    pub assertions: Vec<Assertion>,
    pub warnings: Vec<String>,
    /// Recorded turns without wall-clock fields.
    pub turns: Vec<Value>,
    pub event_count: usize,
    /// Virtual time at the end of the run.
    pub virtual_ms: u64,
}

impl ScenarioReport {
    pub fn failures(&self) -> impl Iterator<Item = &Assertion> {
        self.assertions.iter().filter(|a| !a.passed)
    }
}

/// Runs `scenario` on a fresh paused-clock runtime. `base` anchors relative
/// paths (mock tables, media files).
pub fn run_scenario(scenario: &Scenario, base: &Path) -> Result<ScenarioReport, ScenarioError> {
    let settings = scenario.settings()?;
    let runtime = settings.build(base)?;
    let rt = tokio::runtime::Builder::new_current_thread()
        .enable_time()
        .start_paused(true)
        .build()
        .map_err(|e| ScenarioError::Io { path: "runtime".into(), reason: e.to_string() })?;
    rt.block_on(async move {
        let session = Session::new(format!("scenario-{}", scenario.name), Arc::new(runtime));
        Runner { scenario, base, session, turns: HashMap::new(), order: Vec::new() }.run().await
    })
}

struct Runner<'a> {
    scenario: &'a Scenario,
    base: &'a Path,
    session: Arc<Session>,
    turns: HashMap<String, (u64, SessionState)>,
    order: Vec<u64>,
}

const SETTLE: Duration = Duration::from_secs(120);

impl Runner<'_> {
    async fn run(mut self) -> Result<ScenarioReport, ScenarioError> {
        let start = Instant::now();
        let mut assertions = Vec::new();
        let mut warnings = Vec::new();
        for (n, step) in self.scenario.steps.iter().enumerate() {
            tokio::time::sleep_until(start + Duration::from_millis(step.at_ms)).await;
            match &step.action {
                Action::Say { text, audio } => {
                    let input = match (text, audio) {
                        (Some(t), _) => TurnInput::Text(t.clone()),
                        (_, Some(a)) => TurnInput::Audio(AudioPayload::synthetic(a)),
                        _ => unreachable!("checked at parse time"),
                    };
                    let result = match self.session.handle_turn(input).await {
                        Ok(r) => r,
                        Err(e) => {
                            warnings.push(format!("step {}: {e}", n + 1));
                            continue;
                        }
                    };
                    let id = step.id.clone().unwrap_or_else(|| format!("step{}", n + 1));
                    self.turns.insert(id, (result.turn_id, self.session.state()));
                    self.order.push(result.turn_id);
                }
                Action::Interrupt => {
                    self.session.interrupt().await;
                }
                Action::AttachMedia { modality, media_type, text, base64: b64, file, tags } => {
                    let bytes = if let Some(t) = text {
                        t.as_bytes().to_vec()
                    } else if let Some(b) = b64 {
                        base64::engine::general_purpose::STANDARD
                            .decode(b)
                            .map_err(|e| ScenarioError::Parse(format!("step {}: {e}", n + 1)))?
                    } else {
                        let path = self.base.join(file.as_ref().expect("checked at parse time"));
                        std::fs::read(&path).map_err(|e| ScenarioError::Io {
                            path: path.display().to_string(),
                            reason: e.to_string(),
                        })?
                    };
                    self.session.attach_media(modality, media_type, bytes, tags.clone());
                }
                Action::Expect(e) => assertions.extend(self.evaluate(e).await),
            }
        }
        for &turn in &self.order {
            self.wait_terminal(turn).await;
        }
        if assertions.is_empty() {
            warnings.push("scenario has no assertions".to_string());
        }
        let turns = self.session.traces().iter().map(TurnResult::stable_view).collect();
        Ok(ScenarioReport {
            name: self.scenario.name.clone(),
            passed: assertions.iter().all(|a| a.passed),
            assertions,
            warnings,
            turns,
            event_count: self.session.events().since(0).len(),
            virtual_ms: start.elapsed().as_millis() as u64,
        })
    }

    async fn wait_terminal(&self, turn: u64) -> Option<EventEnvelope> {
        let deadline = Instant::now() + SETTLE;
        loop {
            if let Some(e) = self.session.events().for_turn(turn).into_iter().find(|e| e.kind.is_terminal()) {
                return Some(e);
            }
            if Instant::now() >= deadline {
                return None;
            }
            tokio::time::sleep(Duration::from_millis(10)).await;
        }
    }

    async fn evaluate(&self, e: &Expectation) -> Vec<Assertion> {
        let (turn, state_after) = self.turns[&e.step];
        let mut out = Vec::new();
        let mut check = |name: &str, passed: bool, detail: String| {
            out.push(Assertion { step: e.step.clone(), check: name.to_string(), passed, detail });
        };
        let tr = self.session.snapshot_trace(turn).expect("recorded turn");

        if let Some(b) = e.branch {
            check("branch", tr.branch == b, format!("expected {b:?}, got {:?}", tr.branch));
        }
        if let Some(calls) = &e.expert_calls {
            for (m, want) in calls {
                let got = tr.calls_to(m);
                check(&format!("expert_calls.{m}"), got == *want, format!("expected {want}, got {got}"));
            }
        }
        if let Some(calls) = &e.backend_calls {
            let traces = self.session.traces();
            for (m, want) in calls {
                let got: usize = traces.iter().filter(|t| t.turn_id <= turn).map(|t| t.calls_to(m)).sum();
                check(&format!("backend_calls.{m}"), got == *want, format!("expected {want} in total, got {got}"));
            }
        }
        if let Some(n) = e.expert_trace_len {
            let got = tr.expert_trace.len();
            check("expert_trace_len", got == n, format!("expected {n}, got {got}"));
        }
        if let Some(mods) = &e.cached {
            for m in mods {
                let hit = tr.expert_trace.iter().any(|r| &r.modality == m && r.outcome == CallOutcome::SkippedCached);
                check(&format!("cached.{m}"), hit, format!("{m} reused from memory: {hit}"));
            }
        }
        if let Some(want) = &e.controls {
            let got: Vec<String> = tr.controls.iter().map(|c| c.raw.clone()).collect();
            check("controls", &got == want, format!("expected {want:?}, got {got:?}"));
        }
        if let Some(q) = &e.query {
            check("query", &tr.query == q, format!("expected {q:?}, got {:?}", tr.query));
        }
        let text = tr.final_text.clone().unwrap_or_default();
        if let Some(s) = &e.final_text_contains {
            check("final_text_contains", text.contains(s.as_str()), format!("{s:?} in {text:?}"));
        }
        if let Some(s) = &e.final_text_starts_with {
            check("final_text_starts_with", text.starts_with(s.as_str()), format!("{text:?} starts with {s:?}"));
        }
        if let Some(tags) = &e.memory_tags {
            let items = self.session.memory_items().await;
            for t in tags {
                let found = items.iter().any(|i| i.content.metadata.context.contains(t));
                check(&format!("memory_tags.{t}"), found, format!("tag {t} present: {found}"));
            }
        }
        if let Some(s) = e.state {
            check("state", state_after == s, format!("expected {s:?}, got {state_after:?}"));
        }
        if let Some(k) = e.terminal {
            let got = self.wait_terminal(turn).await.map(|e| e.kind);
            check("terminal", got == Some(k), format!("expected {k:?}, got {got:?}"));
        }
        if let Some(true) = e.queue_cleared {
            let (passed, detail) = self.queue_cleared(turn).await;
            check("queue_cleared", passed, detail);
        }
        if let Some(want) = &e.events {
            self.wait_terminal(turn).await;
            let got: Vec<EventKind> = self.session.events().for_turn(turn).iter().map(|e| e.kind).collect();
            check("events", &got == want, format!("expected {want:?}, got {got:?}"));
        }
        out
    }

    async fn queue_cleared(&self, turn: u64) -> (bool, String) {
        let Some(prev) = self.order.iter().copied().filter(|t| *t < turn).max() else {
            return (false, "no earlier turn to clear".to_string());
        };
        let end = self.wait_terminal(prev).await.map(|e| e.kind);
        if end != Some(EventKind::Interrupted) {
            return (false, format!("turn {prev} ended with {end:?}"));
        }
        let events = self.session.events().since(0);
        let Some(cut) = events.iter().find(|e| e.turn_id == turn && e.kind == EventKind::Controls).map(|e| e.seq) else {
            return (false, format!("turn {turn} has no controls event"));
        };
        let late = events
            .iter()
            .filter(|e| e.turn_id == prev && e.kind == EventKind::AudioChunkMeta && e.seq > cut)
            .count();
        (late == 0, format!("turn {prev} interrupted; {late} chunk(s) announced after the cut"))
    }
}
