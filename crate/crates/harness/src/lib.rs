//! Scenario replay, TTS benchmarking and memory-file tooling behind the
//! `maestro` command.

pub mod bench;
pub mod memtool;
pub mod scenario;

pub use scenario::{run_scenario, Assertion, Scenario, ScenarioError, ScenarioReport};

/// Bundled three-turn garden scenario.
pub const GARDEN_SCENARIO: &str = include_str!("../scenarios/garden.scenario");
pub const INTERRUPT_SCENARIO: &str = include_str!("../scenarios/interrupt.scenario");

/// Every bundled scenario by name.
pub const BUNDLED: &[(&str, &str)] = &[("garden", GARDEN_SCENARIO), ("interrupt", INTERRUPT_SCENARIO)];

pub fn bundled(name: &str) -> Option<&'static str> {
    BUNDLED.iter().find(|(n, _)| *n == name).map(|(_, text)| *text)
}
