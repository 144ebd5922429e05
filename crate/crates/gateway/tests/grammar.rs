use maestro_core::mock::MockTable;
use maestro_core::protocol::{split_tokens, InstructionRegistry};
use maestro_gateway::config::{BUILTIN_CONTROLLER_TABLE, BUILTIN_VISION_TABLE};

#[test]
fn builtin_controller_emits_only_known_tokens() {
    let table = MockTable::from_toml_str(BUILTIN_CONTROLLER_TABLE).unwrap();
    let registry = InstructionRegistry::default();
    assert!(table.len() > 3);
    for entry in table.entries() {
        let out = split_tokens(&entry.respond, &registry);
        assert!(out.diagnostics.unknown_tokens.is_empty(), "{}: {:?}", entry.pattern, out.diagnostics);
        assert!(out.is_prefix_conformant(), "{}: controls after content", entry.pattern);
        if entry.pass.as_deref() == Some("fusion") {
            assert!(out.controls.is_empty(), "fusion reply {} leaks controls", entry.pattern);
        }
    }
}

#[test]
fn builtin_vision_table_is_plain_text() {
    let table = MockTable::from_toml_str(BUILTIN_VISION_TABLE).unwrap();
    let registry = InstructionRegistry::default();
    for entry in table.entries() {
        let out = split_tokens(&entry.respond, &registry);
        assert!(out.controls.is_empty() && out.diagnostics.unknown_tokens.is_empty());
    }
}
