use std::collections::BTreeSet;
use std::sync::Arc;
use std::time::Duration;

use maestro_core::controller::BackendError;
use maestro_core::experts::{
    invoke_all, invoke_modality, CallOutcome, ExpertConfig, ExpertRegistry, MockExpert,
};
use maestro_core::memory::{MemoryConfig, MemoryItem, MemoryStore};
use maestro_core::protocol::{InstructionRegistry, SharedRegistry};
use proptest::prelude::*;

const WORDS: &[&str] = &["rose", "tulip", "fence", "garden", "lamp", "river", "cloud", "bench"];
const MODALITIES: &[&str] = &["vision", "reasoning", "audio", "chart", "sketch"];

fn words(max: usize) -> impl Strategy<Value = Vec<&'static str>> {
    prop::collection::vec(prop::sample::select(WORDS), 0..max)
}

fn rt() -> tokio::runtime::Runtime {
    tokio::runtime::Builder::new_current_thread().enable_time().start_paused(true).build().unwrap()
}

fn registry() -> ExpertRegistry {
    ExpertRegistry::new(SharedRegistry::new(InstructionRegistry::builtins_only()))
}

fn jaccard(a: &[&str], b: &[&str]) -> f64 {
    let a: BTreeSet<_> = a.iter().collect();
    let b: BTreeSet<_> = b.iter().collect();
    let union = a.union(&b).count();
    if union == 0 {
        0.0
    } else {
        a.intersection(&b).count() as f64 / union as f64
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn cached_calls_never_reach_the_backend(tags in words(5), query in words(6)) {
        let experts = registry();
        let vision = Arc::new(MockExpert::constant("vision", "fresh description"));
        experts.register_expert("vision", vision.clone()).unwrap();
        let mut store = MemoryStore::new("c", MemoryConfig::default(), 1);
        let tags: Vec<String> = tags.iter().map(|t| t.to_string()).collect();
        store.append(MemoryItem::text(store.next_id(), "vision", 1, "cached description", tags.clone())).unwrap();
        let q = query.join(" ");
        let inv = rt().block_on(invoke_modality(&experts, "vision", &q, &store, &ExpertConfig::default())).unwrap();

        let tag_refs: Vec<&str> = tags.iter().map(String::as_str).collect();
        let expect_cached = jaccard(&query, &tag_refs) >= 0.3;
        prop_assert_eq!(inv.record.outcome == CallOutcome::SkippedCached, expect_cached);
        if expect_cached {
            prop_assert_eq!(vision.calls(), 0);
            prop_assert_eq!(inv.data, "cached description");
            prop_assert_eq!(inv.record.cached_item.as_deref(), Some(store.items()[0].id.as_str()));
        } else {
            prop_assert_eq!(vision.calls(), 1);
            prop_assert_eq!(inv.data, "fresh description");
        }
        prop_assert!(inv.record.latency_ms >= 0.0);
    }

    #[test]
    fn one_failure_never_aborts_the_rest(
        failing in prop::collection::vec(any::<bool>(), MODALITIES.len()),
        latencies in prop::collection::vec(0u64..50, MODALITIES.len()),
        parallelism in prop::option::of(1usize..4),
    ) {
        let experts = registry();
        let mut mocks = Vec::new();
        for (i, m) in MODALITIES.iter().enumerate() {
            let mut mock = MockExpert::constant(m, &format!("{m} says hi"))
                .with_latency(Duration::from_millis(latencies[i]));
            if failing[i] {
                mock = mock.failing(BackendError::Transport("down".into()));
            }
            let mock = Arc::new(mock);
            experts.register_expert(m, mock.clone()).unwrap();
            mocks.push(mock);
        }
        let store = MemoryStore::new("d", MemoryConfig::default(), 1);
        let selected: Vec<String> = MODALITIES.iter().map(|m| m.to_string()).collect();
        let config = ExpertConfig { parallelism, ..ExpertConfig::default() };
        let results = rt().block_on(invoke_all(&experts, &selected, "q", &store, &config));
        prop_assert_eq!(results.len(), MODALITIES.len());
        for (i, r) in results.iter().enumerate() {
            prop_assert_eq!(mocks[i].calls(), 1);
            match r {
                Ok(inv) => {
                    prop_assert!(!failing[i]);
                    prop_assert_eq!(&inv.record.modality, MODALITIES[i]);
                }
                Err(f) => {
                    prop_assert!(failing[i]);
                    prop_assert_eq!(f.record.as_ref().unwrap().outcome, CallOutcome::Error);
                }
            }
        }
    }

    #[test]
    fn mock_invocations_are_deterministic(query in "[a-z ]{0,30}", media in prop::collection::vec(any::<u8>(), 0..32)) {
        let run = || {
            let experts = registry();
            experts.register_expert("vision", Arc::new(MockExpert::constant("vision", "a garden"))).unwrap();
            experts.register_expert("reasoning", Arc::new(MockExpert::constant("reasoning", "because"))).unwrap();
            let mut store = MemoryStore::new("m", MemoryConfig::default(), 4);
            store.append(MemoryItem::binary(store.next_id(), "vision", 1, "image/png", &media, vec![])).unwrap();
            let selected = vec!["vision".to_string(), "reasoning".to_string()];
            rt().block_on(invoke_all(&experts, &selected, &query, &store, &ExpertConfig::default()))
                .into_iter()
                .map(|r| {
                    let mut inv = r.unwrap();
                    inv.record.latency_ms = 0.0;
                    inv
                })
                .collect::<Vec<_>>()
        };
        prop_assert_eq!(run(), run());
    }
}
