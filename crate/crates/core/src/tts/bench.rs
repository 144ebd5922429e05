use std::sync::Arc;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::time::Instant;

use super::{segment, MockEngine, MockEngineConfig, SynthConfig, Synthesizer, TtsEngine, TtsEvent, TtsQueue};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Sequential,
    ParallelBatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub mode: Mode,
    pub n: usize,
    /// Mean time until the utterance's audio is complete.
    pub mean_ms: f64,
    /// Population variance of the completion time.
    pub variance_ms2: f64,
    /// Mean time to first audio.
    pub ttfa_mean_ms: f64,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BenchError {
    #[error("benchmark corpus is empty")]
    CorpusEmpty,
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var)
}

/// Synthesizes every corpus utterance `runs` times in `mode`.
///
/// Timings come from the tokio clock, so under a paused runtime they are the
/// engine's simulated latencies with no scheduling noise.
pub async fn benchmark(
    engine: Arc<dyn TtsEngine>,
    corpus: &[String],
    mode: Mode,
    runs: usize,
    workers: usize,
) -> Result<LatencyReport, BenchError> {
    let utterances: Vec<_> = corpus.iter().filter_map(|t| segment(t).ok()).collect();
    if utterances.is_empty() || runs == 0 {
        return Err(BenchError::CorpusEmpty);
    }
    let synth = Synthesizer::new(engine, SynthConfig { workers, ..SynthConfig::default() });
    let queue = TtsQueue::new("bench");
    let mut totals = Vec::new();
    let mut ttfas = Vec::new();
    for _ in 0..runs {
        for segments in &utterances {
            let started = Instant::now();
            let mut stream = match mode {
                Mode::Sequential => synth.synthesize_sequential(segments.clone(), &queue),
                Mode::ParallelBatch => synth.synthesize_parallel(segments.clone(), &queue),
            };
            let mut first = None;
            while let Some(ev) = stream.next().await {
                if let TtsEvent::Chunk(_) = ev {
                    first.get_or_insert_with(|| started.elapsed());
                }
            }
            queue.complete(stream.generation());
            totals.push(started.elapsed().as_secs_f64() * 1000.0);
            ttfas.push(first.unwrap_or_default().as_secs_f64() * 1000.0);
        }
    }
    let (mean_ms, variance_ms2) = mean_var(&totals);
    Ok(LatencyReport { mode, n: totals.len(), mean_ms, variance_ms2, ttfa_mean_ms: mean_var(&ttfas).0 })
}

/// Runs [`benchmark`] with a fresh seeded mock engine on a paused clock.
pub fn benchmark_virtual(
    engine: MockEngineConfig,
    corpus: &[String],
    mode: Mode,
    runs: usize,
    workers: usize,
) -> Result<LatencyReport, BenchError> {
    let rt = tokio::runtime::Builder::new_current_thread()
        .enable_time()
        .start_paused(true)
        .build()
        .expect("build benchmark runtime");
    rt.block_on(benchmark(Arc::new(MockEngine::new(engine)), corpus, mode, runs, workers))
}

const VOCAB: &[&str] = &[
    "garden", "morning", "light", "river", "stone", "quiet", "bright", "path", "window", "sky",
    "evening", "warm", "blue", "field", "tree", "leaf", "bird", "small", "old", "road", "hill",
    "cloud", "rain", "wind", "green", "golden", "meadow", "bridge", "lamp", "harbor", "boat",
    "village", "market", "bread", "music", "song", "letter", "table", "chair", "door", "wall",
];
const VERBS: &[&str] = &["holds", "crosses", "touches", "follows", "finds", "watches", "carries", "greets"];

/// Utterances of `min_segments..=max_segments` sentences, each 7 to 12
/// words and free of lexicon cues, so each sentence is exactly one segment.
pub fn synthetic_corpus(seed: u64, n: usize, min_segments: usize, max_segments: usize) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let k = rng.random_range(min_segments..=max_segments);
            (0..k)
                .map(|_| {
                    let len = rng.random_range(7..=12);
                    let mut words: Vec<&str> = Vec::with_capacity(len);
                    words.push("the");
                    while words.len() < len {
                        let pool = if words.len() == 3 { VERBS } else { VOCAB };
                        words.push(pool.choose(&mut rng).expect("vocabulary"));
                    }
                    let mut s = words.join(" ");
                    s[..1].make_ascii_uppercase();
                    s.push('.');
                    s
                })
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect()
}
