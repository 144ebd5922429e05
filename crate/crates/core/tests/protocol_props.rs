use maestro_core::protocol::{select_modalities, split_tokens, ControlToken, InstructionRegistry};
use proptest::prelude::*;

const ALPHABET: &[&str] = &[
    "[S.stop]", "[S.listen]", "[S.speak]", "[S.need_vision]", "[S.need_reasoning]", "[S.need_audio]",
    "[S.dance]", "[S.Need_vision]", "[S.need_]", "[S.", "[S", "[", "]", "S.", ".", "need_", "vision",
    "stop", " ", "\n", "hello", "roses", "é", "🌷", "[[S.stop]]", "[S.[S.speak]]",
];

fn text() -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select(ALPHABET), 0..24).prop_map(|parts| parts.concat())
}

fn free_text() -> impl Strategy<Value = String> {
    prop_oneof![text(), "\\PC{0,40}", "[\\[\\]S.a-z_ ]{0,40}"]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn split_is_lossless(raw in free_text()) {
        let registry = InstructionRegistry::default();
        let out = split_tokens(&raw, &registry);
        prop_assert_eq!(out.reassemble(), raw.clone());
        prop_assert_eq!(out.raw, raw);
    }

    #[test]
    fn content_reparses_without_controls(raw in free_text()) {
        let registry = InstructionRegistry::default();
        let out = split_tokens(&raw, &registry);
        let again = split_tokens(&out.content, &registry);
        prop_assert!(again.controls.is_empty(), "{:?} -> {:?}", out.content, again.controls);
        prop_assert_eq!(again.content, out.content);
    }

    #[test]
    fn controls_are_distinct(raw in text()) {
        let out = split_tokens(&raw, &InstructionRegistry::default());
        let mut seen = std::collections::HashSet::new();
        for c in &out.controls {
            prop_assert!(seen.insert(c.clone()), "duplicate {:?}", c);
        }
    }

    #[test]
    fn selection_is_monotone(raw in text(), extra in prop::sample::select(&["vision", "reasoning"][..])) {
        let registry = InstructionRegistry::default();
        let controls = split_tokens(&raw, &registry).controls;
        let Ok(before) = select_modalities(&controls, &registry) else {
            return Ok(());
        };
        let mut grown = controls.clone();
        grown.push(ControlToken::need(extra));
        let after = select_modalities(&grown, &registry).unwrap();
        for m in &before {
            prop_assert!(after.contains(m), "{m} lost after adding {extra}");
        }
        prop_assert!(after.iter().any(|m| m == extra));
    }
}
