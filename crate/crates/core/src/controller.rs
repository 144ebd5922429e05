//! Prompt composition, controller invocation and evidence fusion.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use tokio::time::Instant;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chat::{ChatClient, ChatError, ChatMessage};
use crate::mock::MockTable;
use crate::protocol::{split_tokens, ControllerOutput, InstructionRegistry, TokenKind};

/// Format every controller reply must follow; checked at runtime.
pub const FORMAT_MANDATE: &str = "Special Control Token + Response Content";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pass {
    /// First pass: decide controls and draft the answer.
    Controller,
    /// Second pass: rewrite the draft with expert evidence.
    Fusion,
}

impl Pass {
    pub fn as_str(self) -> &'static str {
        match self {
            Pass::Controller => "controller",
            Pass::Fusion => "fusion",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub pass: Pass,
    pub system: String,
    pub context: String,
    pub query: String,
}

impl PromptBundle {
    pub fn total_chars(&self) -> usize {
        self.system.chars().count() + self.context.chars().count() + self.query.chars().count()
    }

    /// The user message sent to chat endpoints: context then query.
    pub fn user_message(&self) -> String {
        if self.context.is_empty() {
            self.query.clone()
        } else {
            format!("Conversation memory:\n{}\n\n{}", self.context, self.query)
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BackendError {
    #[error("timed out after {0} ms")]
    Timeout(u64),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("no scripted response for `{0}`")]
    NoMatch(String),
}

impl From<ChatError> for BackendError {
    fn from(e: ChatError) -> Self {
        match e {
            ChatError::Timeout(ms) => BackendError::Timeout(ms),
            ChatError::Transport(m) => BackendError::Transport(m),
            ChatError::Status { status, body } => BackendError::Status { status, body },
            ChatError::Malformed(m) => BackendError::Malformed(m),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ControllerError {
    #[error("prompt needs {needed} chars but the budget is {budget}")]
    BudgetExceeded { needed: usize, budget: usize },
    #[error("controller `{backend}` exceeded its {deadline_ms} ms deadline")]
    BackendTimeout { backend: String, deadline_ms: u64 },
    #[error("controller `{backend}` failed: {source}")]
    BackendError { backend: String, source: BackendError },
    #[error("fused text still carries control tokens: {0}")]
    ControlTokenLeak(String),
    #[error("invalid fusion input: {0}")]
    InvalidFusion(String),
}

/// The model that reads the prompt and emits content plus control tokens.
#[async_trait]
pub trait ControllerBackend: Send + Sync {
    fn name(&self) -> &str;
    async fn generate(&self, bundle: &PromptBundle) -> Result<String, BackendError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControllerConfig {
    /// Per-call deadline in milliseconds.
    pub deadline_ms: u64,
    /// Character budget for system + context + query.
    pub prompt_budget: usize,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self { deadline_ms: 30_000, prompt_budget: 16_000 }
    }
}

impl ControllerConfig {
    pub fn deadline(&self) -> Duration {
        Duration::from_millis(self.deadline_ms)
    }
}

fn system_prompt(registry: &InstructionRegistry) -> String {
    let mut s = String::from(
        "You are the controller of an assistant that coordinates specialized expert models.\n\
         Read the user's request and the conversation memory, decide what should happen next, \
         and signal it with control tokens.\n\nControl tokens:\n",
    );
    for (raw, entry) in registry.entries() {
        s.push_str(&format!("- {raw}: {}\n", entry.description));
    }
    s.push_str(&format!(
        "\nReply format: \"{FORMAT_MANDATE}\". Put every control token first, then the answer \
         text. Replies in any other format are rejected.\n"
    ));
    s
}

/// Builds the first-pass prompt. Memory lines are dropped oldest-first until
/// the whole bundle fits `budget` characters.
pub fn compose_prompt(
    query: &str,
    memory_view: &str,
    registry: &InstructionRegistry,
    budget: usize,
) -> Result<PromptBundle, ControllerError> {
    let system = system_prompt(registry);
    let fixed = system.chars().count() + query.chars().count();
    if fixed > budget {
        return Err(ControllerError::BudgetExceeded { needed: fixed, budget });
    }
    let context = fit_oldest_first(memory_view, budget - fixed);
    Ok(PromptBundle { pass: Pass::Controller, system, context, query: query.to_string() })
}

fn fit_oldest_first(view: &str, room: usize) -> String {
    let lines: Vec<&str> = view.lines().collect();
    let mut start = 0;
    let size = |from: usize| {
        let body: usize = lines[from..].iter().map(|l| l.chars().count()).sum();
        body + lines.len().saturating_sub(from).saturating_sub(1)
    };
    while start < lines.len() && size(start) > room {
        start += 1;
    }
    lines[start..].join("\n")
}

/// Outcome of one controller call, kept in the turn trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerCall {
    pub output: ControllerOutput,
    pub latency_ms: f64,
}

async fn call_with_deadline(
    backend: &dyn ControllerBackend,
    bundle: &PromptBundle,
    deadline: Duration,
) -> Result<(String, f64), ControllerError> {
    let started = Instant::now();
    let timeout = || ControllerError::BackendTimeout {
        backend: backend.name().to_string(),
        deadline_ms: deadline.as_millis() as u64,
    };
    let raw = match tokio::time::timeout(deadline, backend.generate(bundle)).await {
        Err(_) => return Err(timeout()),
        Ok(Err(BackendError::Timeout(_))) => return Err(timeout()),
        Ok(Err(source)) => {
            return Err(ControllerError::BackendError { backend: backend.name().to_string(), source })
        }
        Ok(Ok(raw)) => raw,
    };
    Ok((raw, started.elapsed().as_secs_f64() * 1000.0))
}

pub async fn run_controller(
    backend: &dyn ControllerBackend,
    bundle: &PromptBundle,
    registry: &InstructionRegistry,
    deadline: Duration,
) -> Result<ControllerCall, ControllerError> {
    let (raw, latency_ms) = call_with_deadline(backend, bundle, deadline).await?;
    Ok(ControllerCall { output: split_tokens(&raw, registry), latency_ms })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evidence {
    pub modality: String,
    pub data: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionInput {
    pub query: String,
    pub original: ControllerOutput,
    pub expert_data: Vec<Evidence>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionOutcome {
    pub text: String,
    /// Second-pass prompt; `None` for identity fusion.
    pub prompt: Option<PromptBundle>,
    pub attempts: u32,
}

/// Builds the second-pass prompt embedding each evidence item as a labeled
/// block, in modality registration order.
pub fn compose_fusion_prompt(
    fusion: &FusionInput,
    memory_view: &str,
    registry: &InstructionRegistry,
) -> PromptBundle {
    let mut evidence = fusion.expert_data.clone();
    registry.sort_by_registration(&mut evidence, |e| e.modality.as_str());
    let mut query = format!(
        "User request: {}\nDraft answer: {}\n",
        fusion.query.trim(),
        fusion.original.content.trim()
    );
    for e in &evidence {
        query.push_str(&format!("\n[evidence: {}]\n{}\n", e.modality, e.data.trim()));
    }
    let system = "You are finishing an assistant reply. Rewrite the draft answer so it is \
                  grounded in the expert evidence below. Answer in plain conversational text \
                  and do not output any control tokens."
        .to_string();
    PromptBundle { pass: Pass::Fusion, system, context: memory_view.to_string(), query }
}

/// Fuses expert evidence into the final response text.
///
/// With no evidence the draft content is returned unchanged and no backend
/// call is made. Otherwise a second controller pass rewrites the draft; a
/// reply that still carries control tokens is retried once.
pub async fn integrate(
    backend: &dyn ControllerBackend,
    fusion: &FusionInput,
    memory_view: &str,
    registry: &InstructionRegistry,
    deadline: Duration,
) -> Result<FusionOutcome, ControllerError> {
    let needs: Vec<&str> = fusion
        .original
        .controls
        .iter()
        .filter(|c| c.kind == TokenKind::Need)
        .filter_map(|c| c.modality.as_deref())
        .collect();
    if let Some(stray) = fusion.expert_data.iter().find(|e| !needs.contains(&e.modality.as_str()))
    {
        return Err(ControllerError::InvalidFusion(format!(
            "evidence for `{}` was not requested by the controller",
            stray.modality
        )));
    }
    if fusion.expert_data.is_empty() {
        return Ok(FusionOutcome { text: fusion.original.content.clone(), prompt: None, attempts: 0 });
    }

    let bundle = compose_fusion_prompt(fusion, memory_view, registry);
    let mut last = String::new();
    for attempt in 1..=2 {
        let (raw, _) = call_with_deadline(backend, &bundle, deadline).await?;
        let split = split_tokens(&raw, registry);
        if split.controls.is_empty() {
            return Ok(FusionOutcome { text: raw, prompt: Some(bundle), attempts: attempt });
        }
        last = raw;
    }
    Err(ControllerError::ControlTokenLeak(last))
}

/// Deterministic controller driven by a [`MockTable`]. Patterns match the
/// bundle's query; entries may be restricted to one pass.
#[derive(Debug)]
pub struct ScriptedController {
    name: String,
    table: MockTable,
    latency: Duration,
    calls: AtomicUsize,
}

impl ScriptedController {
    pub fn new(table: MockTable) -> Self {
        Self {
            name: "scripted".into(),
            table,
            latency: Duration::ZERO,
            calls: AtomicUsize::new(0),
        }
    }

    /// Simulated think time before answering.
    pub fn with_latency(mut self, latency: Duration) -> Self {
        self.latency = latency;
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

#[async_trait]
impl ControllerBackend for ScriptedController {
    fn name(&self) -> &str {
        &self.name
    }

    async fn generate(&self, bundle: &PromptBundle) -> Result<String, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        if !self.latency.is_zero() {
            tokio::time::sleep(self.latency).await;
        }
        self.table
            .lookup(&bundle.query, Some(bundle.pass.as_str()))
            .map(str::to_string)
            .ok_or_else(|| BackendError::NoMatch(bundle.query.clone()))
    }
}

/// Controller behind a chat-completion endpoint.
#[derive(Debug, Clone)]
pub struct RemoteController {
    name: String,
    client: ChatClient,
    timeout: Duration,
}

impl RemoteController {
    pub fn new(client: ChatClient, timeout: Duration) -> Self {
        Self { name: format!("remote:{}", client.config().model), client, timeout }
    }
}

#[async_trait]
impl ControllerBackend for RemoteController {
    fn name(&self) -> &str {
        &self.name
    }

    async fn generate(&self, bundle: &PromptBundle) -> Result<String, BackendError> {
        let messages =
            [ChatMessage::system(bundle.system.clone()), ChatMessage::user(bundle.user_message())];
        Ok(self.client.complete(&messages, self.timeout).await?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::ControlToken;

    fn table(toml: &str) -> MockTable {
        MockTable::from_toml_str(toml).unwrap()
    }

    fn garden_controller() -> ScriptedController {
        ScriptedController::new(table(
            r#"
            [[entries]]
            match = "how many roses are there"
            respond = "[S.need_vision] Let me count them."
            pass = "controller"
            [[entries]]
            match = "how many roses"
            respond = "[S.stop][S.listen]"
            pass = "controller"
            [[entries]]
            match = "what flowers"
            respond = "[S.need_vision] I can see several roses"
            pass = "controller"
            [[entries]]
            match = "evidence: vision.*3 red roses"
            respond = "There are 3 red roses in the image."
            pass = "fusion"
            [[entries]]
            match = "leak"
            respond = "[S.speak] still leaking"
            pass = "fusion"
            [[entries]]
            match = ".*"
            respond = "[S.speak] Hello!"
            "#,
        ))
    }

    #[test]
    fn default_prompt_lists_default_tokens() {
        let b = compose_prompt("hi", "", &InstructionRegistry::default(), 16_000).unwrap();
        for tok in ["[S.stop]", "[S.listen]", "[S.speak]", "[S.need_vision]", "[S.need_reasoning]"] {
            assert!(b.system.contains(tok), "{tok}");
        }
        assert!(b.system.contains(FORMAT_MANDATE));
        assert_eq!(b.pass, Pass::Controller);
    }

    #[test]
    fn empty_query_and_memory() {
        let b = compose_prompt("", "", &InstructionRegistry::default(), 16_000).unwrap();
        assert_eq!(b.query, "");
        assert_eq!(b.context, "");
    }

    #[test]
    fn custom_token_appears_in_prompt() {
        let mut r = InstructionRegistry::default();
        r.register_instruction("[S.need_audio]", "Use for questions about sounds.", None).unwrap();
        let b = compose_prompt("q", "", &r, 16_000).unwrap();
        assert!(b.system.contains("- [S.need_audio]: Use for questions about sounds."));
    }

    #[test]
    fn prompt_is_deterministic_and_truncates_oldest_first() {
        let r = InstructionRegistry::default();
        let view = "[text @ turn 1] oldest\n[text @ turn 2] middle\n[text @ turn 3] newest";
        let a = compose_prompt("q", view, &r, 16_000).unwrap();
        assert_eq!(a, compose_prompt("q", view, &r, 16_000).unwrap());
        assert_eq!(a.context, view);
        let sys = a.system.chars().count();
        let tight = compose_prompt("q", view, &r, sys + 1 + 22 + 1 + 22).unwrap();
        assert_eq!(tight.context, "[text @ turn 2] middle\n[text @ turn 3] newest");
        assert!(tight.total_chars() <= sys + 46);
    }

    #[test]
    fn oversized_query_is_rejected() {
        let err = compose_prompt(&"x".repeat(50), "", &InstructionRegistry::default(), 40);
        assert!(matches!(err, Err(ControllerError::BudgetExceeded { budget: 40, .. })));
    }

    #[tokio::test]
    async fn scripted_controller_routes_garden_queries() {
        let r = InstructionRegistry::default();
        let backend = garden_controller();
        let b = compose_prompt("What flowers are blooming in this image?", "", &r, 16_000).unwrap();
        let call = run_controller(&backend, &b, &r, Duration::from_secs(1)).await.unwrap();
        assert_eq!(call.output.controls, vec![ControlToken::need("vision")]);

        let b = compose_prompt("How many roses...", "", &r, 16_000).unwrap();
        let call = run_controller(&backend, &b, &r, Duration::from_secs(1)).await.unwrap();
        assert_eq!(call.output.controls, vec![ControlToken::stop(), ControlToken::listen()]);
    }

    #[tokio::test(start_paused = true)]
    async fn slow_backend_times_out() {
        let r = InstructionRegistry::default();
        let backend = garden_controller().with_latency(Duration::from_secs(5));
        let b = compose_prompt("hi", "", &r, 16_000).unwrap();
        let err = run_controller(&backend, &b, &r, Duration::from_millis(100)).await.unwrap_err();
        assert!(matches!(err, ControllerError::BackendTimeout { deadline_ms: 100, .. }));
    }

    #[tokio::test]
    async fn identity_fusion_skips_backend() {
        let r = InstructionRegistry::default();
        let backend = garden_controller();
        let original = split_tokens("[S.speak]Hello!", &r);
        let fusion = FusionInput { query: "hi".into(), original, expert_data: vec![] };
        let out = integrate(&backend, &fusion, "", &r, Duration::from_secs(1)).await.unwrap();
        assert_eq!(out.text, "Hello!");
        assert_eq!(out.attempts, 0);
        assert_eq!(backend.calls(), 0);
    }

    #[tokio::test]
    async fn fusion_uses_evidence() {
        let r = InstructionRegistry::default();
        let backend = garden_controller();
        let original = split_tokens("[S.need_vision] Let me count them.", &r);
        let fusion = FusionInput {
            query: "how many roses".into(),
            original,
            expert_data: vec![Evidence { modality: "vision".into(), data: "3 red roses, 2 tulips".into() }],
        };
        let out = integrate(&backend, &fusion, "", &r, Duration::from_secs(1)).await.unwrap();
        assert!(out.text.contains('3'));
        assert!(split_tokens(&out.text, &r).controls.is_empty());
    }

    #[test]
    fn fusion_prompt_orders_evidence_by_registration() {
        let r = InstructionRegistry::default();
        let original = split_tokens("[S.need_reasoning][S.need_vision] draft", &r);
        let fusion = FusionInput {
            query: "q".into(),
            original,
            expert_data: vec![
                Evidence { modality: "reasoning".into(), data: "R".into() },
                Evidence { modality: "vision".into(), data: "V".into() },
            ],
        };
        let b = compose_fusion_prompt(&fusion, "", &r);
        let v = b.query.find("[evidence: vision]").unwrap();
        let rs = b.query.find("[evidence: reasoning]").unwrap();
        assert!(v < rs);
        assert_eq!(b.pass, Pass::Fusion);
    }

    #[tokio::test]
    async fn persistent_leak_fails_after_retry() {
        let r = InstructionRegistry::default();
        let backend = garden_controller();
        let original = split_tokens("[S.need_vision] leak", &r);
        let fusion = FusionInput {
            query: "leak".into(),
            original,
            expert_data: vec![Evidence { modality: "vision".into(), data: "x".into() }],
        };
        let err = integrate(&backend, &fusion, "", &r, Duration::from_secs(1)).await.unwrap_err();
        assert!(matches!(err, ControllerError::ControlTokenLeak(_)));
        assert_eq!(backend.calls(), 2);
    }

    #[tokio::test]
    async fn evidence_must_be_requested() {
        let r = InstructionRegistry::default();
        let backend = garden_controller();
        let fusion = FusionInput {
            query: "q".into(),
            original: split_tokens("[S.speak] hi", &r),
            expert_data: vec![Evidence { modality: "vision".into(), data: "x".into() }],
        };
        let err = integrate(&backend, &fusion, "", &r, Duration::from_secs(1)).await.unwrap_err();
        assert!(matches!(err, ControllerError::InvalidFusion(_)));
    }
}
