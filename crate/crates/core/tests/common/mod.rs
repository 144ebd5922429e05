#![allow(dead_code)]

use std::sync::Arc;
use std::time::Duration;

use maestro_core::controller::ScriptedController;
use maestro_core::experts::{ExpertRegistry, MockAsr, MockExpert};
use maestro_core::memory::MemoryConfig;
use maestro_core::mock::MockTable;
use maestro_core::orchestrator::{EventKind, OrchestratorConfig, Runtime, Session, TurnInput};
use maestro_core::protocol::{InstructionRegistry, SharedRegistry};
use maestro_core::tts::{MockEngine, MockEngineConfig, SynthConfig, Synthesizer};

pub const CONTROLLER: &str = r#"
[[entries]]
match = "(?i)^what flowers"
pass = "controller"
respond = "[S.need_vision] Let me look at the picture."

[[entries]]
match = "(?i)request: what flowers"
pass = "fusion"
respond = "I can see several roses and tulips in full bloom, and the garden looks lovely in the afternoon sun."

[[entries]]
match = "(?i)^how many roses\\W*$"
pass = "controller"
respond = "[S.stop][S.listen]"

[[entries]]
match = "(?i)^how many roses"
pass = "controller"
respond = "[S.need_vision] Let me count them."

[[entries]]
match = "(?i)request: how many roses"
pass = "fusion"
respond = "There are 3 red roses in the image."

[[entries]]
match = "(?i)^broken"
pass = "controller"
respond = "[S.need_vision] One moment."

[[entries]]
match = "(?i)request: broken"
pass = "fusion"
respond = "[S.need_vision]"

[[entries]]
match = "(?i)^wait for me"
pass = "controller"
respond = "[S.listen]"

[[entries]]
match = "(?i)^be quiet"
pass = "controller"
respond = "[S.stop]"

[[entries]]
match = ".*"
respond = "[S.speak] Sorry, could you say that again?"
"#;

pub struct Fixture {
    pub session: Arc<Session>,
    pub vision: Arc<MockExpert>,
}

pub fn fixture(realtime: bool, expert_latency_ms: u64) -> Fixture {
    fixture_with(realtime, expert_latency_ms, MemoryConfig::default())
}

pub fn fixture_with(realtime: bool, expert_latency_ms: u64, memory: MemoryConfig) -> Fixture {
    let controller = ScriptedController::new(MockTable::from_toml_str(CONTROLLER).unwrap());
    let experts = ExpertRegistry::new(SharedRegistry::new(InstructionRegistry::builtins_only()));
    let vision = Arc::new(
        MockExpert::constant(
            "vision",
            "A sunny garden with three red roses, yellow tulips and green shrubs.",
        )
        .with_latency(Duration::from_millis(expert_latency_ms)),
    );
    experts.register_expert("vision", vision.clone()).unwrap();
    let engine = MockEngine::new(MockEngineConfig::default());
    let config = OrchestratorConfig { realtime_playback: realtime, ..OrchestratorConfig::default() };
    let runtime = Arc::new(Runtime {
        controller: Arc::new(controller),
        experts,
        asr: Arc::new(MockAsr),
        synth: Synthesizer::new(Arc::new(engine), SynthConfig::default()),
        config,
    });
    Fixture { session: Session::with_memory("garden", runtime, memory), vision }
}

pub fn attach_garden(session: &Session) {
    let tags = ["garden", "flowers", "roses", "tulips", "image"].map(String::from).to_vec();
    session.attach_media("vision", "image/png", b"\x89PNG garden".to_vec(), tags);
}

pub async fn wait_terminal(session: &Session, turn: u64) -> EventKind {
    loop {
        if let Some(e) = session.events().for_turn(turn).into_iter().find(|e| e.kind.is_terminal()) {
            return e.kind;
        }
        tokio::time::sleep(Duration::from_millis(5)).await;
    }
}

pub fn text(s: &str) -> TurnInput {
    TurnInput::Text(s.to_string())
}
