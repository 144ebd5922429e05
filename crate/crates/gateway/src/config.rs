//! Runtime and server configuration.
//!
//! ```toml
//! listen = "127.0.0.1:8080"
//! max_sessions = 64
//!
//! [controller]
//! kind = "remote"
//! base_url = "http://localhost:8000/v1"
//! model = "qwen2.5-7b-instruct"
//! api_key_env = "CONTROLLER_API_KEY"
//!
//! [experts.vision]
//! kind = "mock"
//! table = "mocks/vision.toml"
//!
//! [tts]
//! kind = "mock"
//! base_ms = 50
//! jitter_ms = 20
//! ```
//!
//! Relative paths resolve against the directory of the config file. A mock
//! backend without a `table` uses the bundled garden demo table.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use maestro_core::chat::{ChatClient, EndpointConfig};
use maestro_core::controller::{ControllerBackend, ControllerConfig, RemoteController, ScriptedController};
use maestro_core::experts::{AsrAdapter, ExpertConfig, ExpertRegistry, MockAsr, MockExpert, RemoteAsr, RemoteExpert};
use maestro_core::memory::MemoryConfig;
use maestro_core::mock::{MockTable, MockTableError};
use maestro_core::orchestrator::{OrchestratorConfig, Runtime};
use maestro_core::protocol::{is_valid_modality, InstructionRegistry, SharedRegistry};
use maestro_core::tts::{
    ConcatConfig, MockEngine, MockEngineConfig, RemoteTtsEngine, SynthConfig, Synthesizer, TtsEngine,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const BUILTIN_CONTROLLER_TABLE: &str = include_str!("../data/mocks/controller.toml");
pub const BUILTIN_VISION_TABLE: &str = include_str!("../data/mocks/vision.toml");

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Table(#[from] MockTableError),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Mock,
    Remote,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub kind: BackendKind,
    /// Mock response table.
    pub table: Option<PathBuf>,
    /// Simulated latency of mock backends.
    pub latency_ms: u64,
    pub base_url: Option<String>,
    pub model: Option<String>,
    /// Name of the environment variable holding the API key.
    pub api_key_env: Option<String>,
    pub timeout_ms: Option<u64>,
}

impl BackendConfig {
    pub fn mock() -> Self {
        Self::default()
    }

    fn api_key(&self) -> Option<String> {
        self.api_key_env.as_deref().and_then(|k| std::env::var(k).ok())
    }

    fn endpoint(&self, what: &str) -> Result<(String, String), ConfigError> {
        let url = self.base_url.clone().ok_or_else(|| ConfigError::Invalid(format!("{what}: base_url is required")))?;
        let model = self.model.clone().ok_or_else(|| ConfigError::Invalid(format!("{what}: model is required")))?;
        Ok((url, model))
    }

    fn timeout(&self, fallback_ms: u64) -> Duration {
        Duration::from_millis(self.timeout_ms.unwrap_or(fallback_ms))
    }

    fn chat_client(&self, what: &str) -> Result<ChatClient, ConfigError> {
        let (base_url, model) = self.endpoint(what)?;
        Ok(ChatClient::new(EndpointConfig { base_url, model, api_key: self.api_key(), temperature: 0.0 }))
    }

    fn table(&self, base: &Path, builtin: Option<&str>, what: &str) -> Result<MockTable, ConfigError> {
        match (&self.table, builtin) {
            (Some(p), _) => Ok(MockTable::load(&resolve(base, p))?),
            (None, Some(text)) => Ok(MockTable::from_toml_str(text)?),
            (None, None) => Err(ConfigError::Invalid(format!("{what}: mock backend needs a table"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TtsSettings {
    #[serde(flatten)]
    pub backend: BackendConfig,
    pub voice: Option<String>,
    #[serde(flatten)]
    pub mock: MockEngineConfig,
    pub workers: usize,
    pub attempts: u32,
    #[serde(flatten)]
    pub concat: ConcatConfig,
}

impl Default for TtsSettings {
    fn default() -> Self {
        let synth = SynthConfig::default();
        Self {
            backend: BackendConfig::mock(),
            voice: None,
            mock: MockEngineConfig::default(),
            workers: synth.workers,
            attempts: synth.attempts,
            concat: ConcatConfig::default(),
        }
    }
}

/// Everything needed to build a [`Runtime`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RuntimeSettings {
    pub seed: u64,
    pub realtime_playback: bool,
    pub controller: BackendConfig,
    pub controller_policy: ControllerConfig,
    pub experts: BTreeMap<String, BackendConfig>,
    pub expert_policy: ExpertConfig,
    pub asr: BackendConfig,
    pub tts: TtsSettings,
    pub memory: MemoryConfig,
    pub persist_dir: Option<PathBuf>,
    pub wav_dir: Option<PathBuf>,
}

impl Default for RuntimeSettings {
    fn default() -> Self {
        Self {
            seed: 42,
            realtime_playback: true,
            controller: BackendConfig::mock(),
            controller_policy: ControllerConfig::default(),
            experts: BTreeMap::from([("vision".to_string(), BackendConfig { latency_ms: 120, ..BackendConfig::mock() })]),
            expert_policy: ExpertConfig::default(),
            asr: BackendConfig::mock(),
            tts: TtsSettings::default(),
            memory: MemoryConfig::default(),
            persist_dir: None,
            wav_dir: None,
        }
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl RuntimeSettings {
    pub fn validate(&self) -> Result<(), ConfigError> {
        for (m, b) in &self.experts {
            if !is_valid_modality(m) {
                return Err(ConfigError::Invalid(format!("`{m}` is not a valid modality name")));
            }
            if b.kind == BackendKind::Remote {
                b.endpoint(&format!("experts.{m}"))?;
            }
        }
        if self.controller.kind == BackendKind::Remote {
            self.controller.endpoint("controller")?;
        }
        if self.tts.workers == 0 {
            return Err(ConfigError::Invalid("tts.workers must be at least 1".into()));
        }
        if self.memory.budget == 0 {
            return Err(ConfigError::Invalid("memory.budget must be positive".into()));
        }
        Ok(())
    }

    /// Builds the shared runtime. `base` anchors relative paths.
    pub fn build(&self, base: &Path) -> Result<Runtime, ConfigError> {
        self.validate()?;
        let controller: Arc<dyn ControllerBackend> = match self.controller.kind {
            BackendKind::Mock => Arc::new(
                ScriptedController::new(self.controller.table(base, Some(BUILTIN_CONTROLLER_TABLE), "controller")?)
                    .with_latency(Duration::from_millis(self.controller.latency_ms)),
            ),
            BackendKind::Remote => Arc::new(RemoteController::new(
                self.controller.chat_client("controller")?,
                self.controller.timeout(self.controller_policy.deadline_ms),
            )),
        };

        let experts = ExpertRegistry::new(SharedRegistry::new(InstructionRegistry::builtins_only()));
        for (m, b) in &self.experts {
            let what = format!("experts.{m}");
            let builtin = (m == "vision").then_some(BUILTIN_VISION_TABLE);
            let backend: Arc<dyn maestro_core::experts::ExpertBackend> = match b.kind {
                BackendKind::Mock => Arc::new(
                    MockExpert::new(m, b.table(base, builtin, &what)?)
                        .with_latency(Duration::from_millis(b.latency_ms)),
                ),
                BackendKind::Remote => Arc::new(RemoteExpert::new(
                    m,
                    b.chat_client(&what)?,
                    b.timeout(self.expert_policy.deadline_ms),
                )),
            };
            experts.register_expert(m, backend).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }

        let asr: Arc<dyn AsrAdapter> = match self.asr.kind {
            BackendKind::Mock => Arc::new(MockAsr),
            BackendKind::Remote => {
                let (url, model) = self.asr.endpoint("asr")?;
                Arc::new(RemoteAsr::new(&url, &model, self.asr.api_key(), self.asr.timeout(30_000)))
            }
        };

        let engine: Arc<dyn TtsEngine> = match self.tts.backend.kind {
            BackendKind::Mock => Arc::new(MockEngine::new(self.tts.mock)),
            BackendKind::Remote => {
                let (url, model) = self.tts.backend.endpoint("tts")?;
                let voice = self.tts.voice.clone().unwrap_or_else(|| "default".to_string());
                Arc::new(
                    RemoteTtsEngine::new(&url, &model, &voice, self.tts.backend.api_key(), self.tts.backend.timeout(30_000))
                        .with_sample_rate(self.tts.mock.sample_rate),
                )
            }
        };
        let synth = Synthesizer::new(engine, SynthConfig { workers: self.tts.workers, attempts: self.tts.attempts.max(1) });

        Ok(Runtime {
            controller,
            experts,
            asr,
            synth,
            config: OrchestratorConfig {
                controller: self.controller_policy.clone(),
                experts: self.expert_policy.clone(),
                memory: self.memory.clone(),
                concat: self.tts.concat,
                seed: self.seed,
                realtime_playback: self.realtime_playback,
                persist_dir: self.persist_dir.as_ref().map(|p| resolve(base, p)),
                wav_dir: self.wav_dir.as_ref().map(|p| resolve(base, p)),
            },
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GatewayConfig {
    pub listen: SocketAddr,
    /// Static bearer token; unauthenticated when unset.
    pub auth_token: Option<String>,
    pub max_sessions: usize,
    /// Largest accepted request body, in bytes.
    pub max_payload_bytes: usize,
    #[serde(flatten)]
    pub runtime: RuntimeSettings,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            listen: SocketAddr::from(([127, 0, 0, 1], 8080)),
            auth_token: None,
            max_sessions: 64,
            max_payload_bytes: 8 * 1024 * 1024,
            runtime: RuntimeSettings::default(),
        }
    }
}

impl GatewayConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::from_toml_str(&text)
    }

    /// Applies `MAESTRO_*` overrides from `vars`.
    pub fn apply_env(&mut self, vars: impl IntoIterator<Item = (String, String)>) -> Result<(), ConfigError> {
        fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T, ConfigError> {
            v.parse().map_err(|_| ConfigError::Invalid(format!("{k}: cannot parse `{v}`")))
        }
        for (k, v) in vars {
            match k.as_str() {
                "MAESTRO_LISTEN" => self.listen = num(&k, &v)?,
                "MAESTRO_AUTH_TOKEN" => self.auth_token = Some(v).filter(|s| !s.is_empty()),
                "MAESTRO_MAX_SESSIONS" => self.max_sessions = num(&k, &v)?,
                "MAESTRO_MAX_PAYLOAD_BYTES" => self.max_payload_bytes = num(&k, &v)?,
                "MAESTRO_MEMORY_BUDGET" => self.runtime.memory.budget = num(&k, &v)?,
                "MAESTRO_SEED" => self.runtime.seed = num(&k, &v)?,
                "MAESTRO_TTS_WORKERS" => self.runtime.tts.workers = num(&k, &v)?,
                "MAESTRO_CONTROLLER_URL" => {
                    self.runtime.controller.kind = BackendKind::Remote;
                    self.runtime.controller.base_url = Some(v);
                }
                "MAESTRO_CONTROLLER_MODEL" => self.runtime.controller.model = Some(v),
                _ => {}
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.max_sessions == 0 {
            return Err(ConfigError::Invalid("max_sessions must be at least 1".into()));
        }
        self.runtime.validate()
    }
}
