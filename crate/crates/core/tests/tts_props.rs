use std::sync::Arc;
use std::time::Duration;

use maestro_core::tts::{
    join, normalize, segment, Boundary, MockEngine, MockEngineConfig, Segment, SegmentError, SynthConfig,
    Synthesizer, TtsEvent, TtsQueue, MAX_WORDS, MIN_WORDS,
};
use proptest::prelude::*;
use tokio::time::Instant;

const VOCAB: &[&str] = &[
    "the", "cat", "sat", "on", "mat", "garden", "roses", "bloom", "quietly", "river", "light", "we", "see",
    "however", "and", "but", "while", "because", "so", "then", "in", "addition", "for", "example", "on",
    "the", "other", "hand", "which", "who", "that", "where", "when", "if", "unless", "since", "as",
    "even", "though", "order", "to", "mat,", "sky.", "done!", "why?", "note:", "list;", "—", "-", "3.5",
    "état", "it's", "...", ",", "x",
];
const SPACES: &[&str] = &[" ", " ", " ", "  ", "\n", "\t "];

fn prose() -> impl Strategy<Value = String> {
    prop::collection::vec((prop::sample::select(VOCAB), prop::sample::select(SPACES)), 0..70).prop_map(|ws| {
        ws.into_iter().map(|(w, s)| format!("{w}{s}")).collect()
    })
}

fn counted_words(s: &str) -> usize {
    s.split_whitespace().filter(|w| w.chars().any(char::is_alphanumeric)).count()
}

fn fixed_segments(n: usize) -> Vec<Segment> {
    (1..=n)
        .map(|i| Segment {
            index: i,
            text: format!("segment number {i} of the test utterance here"),
            punct: ".".into(),
            word_count: 8,
            boundary: (i < n).then_some(Boundary::Punctuation),
        })
        .collect()
}

fn paused() -> tokio::runtime::Runtime {
    tokio::runtime::Builder::new_current_thread().enable_time().start_paused(true).build().unwrap()
}

fn engine(latencies: &[u64]) -> Arc<MockEngine> {
    let config = MockEngineConfig { base_ms: 0, jitter_ms: 0, ..MockEngineConfig::default() };
    let mut e = MockEngine::new(config);
    for (i, ms) in latencies.iter().enumerate() {
        e = e.with_fixed_latency(i + 1, *ms);
    }
    Arc::new(e)
}

async fn drain(mut stream: maestro_core::tts::TtsStream) -> (Vec<usize>, Vec<u64>) {
    let mut indices = Vec::new();
    let mut generations = Vec::new();
    while let Some(ev) = stream.next().await {
        if let TtsEvent::Chunk(c) = ev {
            indices.push(c.index);
            generations.push(c.generation);
        }
    }
    (indices, generations)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn join_restores_normalized_text(text in prose()) {
        match segment(&text) {
            Ok(segs) => prop_assert_eq!(join(&segs), normalize(&text)),
            Err(SegmentError::EmptyText) => prop_assert!(normalize(&text).is_empty()),
        }
    }

    #[test]
    fn segments_respect_word_window(text in prose()) {
        let Ok(segs) = segment(&text) else { return Ok(()) };
        for (i, s) in segs.iter().enumerate() {
            prop_assert_eq!(s.index, i + 1);
            prop_assert_eq!(s.word_count, counted_words(&s.source_text()));
            prop_assert!(s.word_count <= MAX_WORDS, "{:?}", s);
            prop_assert_eq!(s.boundary.is_none(), i + 1 == segs.len());
            if s.word_count < MIN_WORDS && !s.is_punctuation_terminal() {
                let last = i + 1 == segs.len();
                let prev_closed = i == 0 || segs[i - 1].is_punctuation_terminal();
                prop_assert!(last && prev_closed, "mergeable short segment {:?} in {:?}", s, segs);
            }
        }
    }

    #[test]
    fn parallel_release_is_ordered(latencies in prop::collection::vec(0u64..200, 1..10), workers in 1usize..6) {
        let n = latencies.len();
        let (indices, generations) = paused().block_on(async {
            let synth = Synthesizer::new(engine(&latencies), SynthConfig { workers, attempts: 2 });
            let queue = TtsQueue::new("p");
            drain(synth.synthesize_parallel(fixed_segments(n), &queue)).await
        });
        prop_assert_eq!(indices, (1..=n).collect::<Vec<_>>());
        prop_assert!(generations.iter().all(|g| *g == generations[0]));
    }

    #[test]
    fn parallel_never_slower_than_sequential(latencies in prop::collection::vec(1u64..200, 1..9)) {
        let n = latencies.len();
        let (par, seq) = paused().block_on(async {
            let synth = Synthesizer::new(engine(&latencies), SynthConfig { workers: n, attempts: 1 });
            let queue = TtsQueue::new("p");
            let t = Instant::now();
            drain(synth.synthesize_parallel(fixed_segments(n), &queue)).await;
            let par = t.elapsed();
            let t = Instant::now();
            drain(synth.synthesize_sequential(fixed_segments(n), &queue)).await;
            (par, t.elapsed())
        });
        let max = Duration::from_millis(*latencies.iter().max().unwrap());
        let sum = Duration::from_millis(latencies.iter().sum());
        prop_assert!(par <= seq);
        prop_assert!(par >= max && par < max + Duration::from_millis(1), "{par:?} vs {max:?}");
        prop_assert!(seq >= sum && seq < sum + Duration::from_millis(1), "{seq:?} vs {sum:?}");
    }

    #[test]
    fn nothing_old_after_clear(latencies in prop::collection::vec(1u64..120, 2..9), at in 0u64..600, parallel in any::<bool>()) {
        let n = latencies.len();
        let late = paused().block_on(async {
            let synth = Synthesizer::new(engine(&latencies), SynthConfig { workers: 4, attempts: 1 });
            let queue = TtsQueue::new("p");
            let mut stream = if parallel {
                synth.synthesize_parallel(fixed_segments(n), &queue)
            } else {
                synth.synthesize_sequential(fixed_segments(n), &queue)
            };
            let q = queue.clone();
            let clearer = tokio::spawn(async move {
                tokio::time::sleep(Duration::from_millis(at)).await;
                q.clear();
                Instant::now()
            });
            let mut seen = Vec::new();
            while let Some(ev) = stream.next().await {
                seen.push((Instant::now(), matches!(ev, TtsEvent::Chunk(_))));
            }
            let cleared_at = clearer.await.unwrap();
            seen.into_iter().filter(|(t, chunk)| *chunk && *t > cleared_at).count()
        });
        prop_assert_eq!(late, 0);
    }
}
