//! Speech output: segmentation, parallel synthesis with in-order release,
//! boundary-aware concatenation and the interruptible per-session queue.

mod bench;
mod concat;
mod queue;
mod segment;

use std::collections::HashMap;
use std::io::Cursor;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use async_trait::async_trait;
use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use bench::{benchmark, benchmark_virtual, BenchError, synthetic_corpus, LatencyReport, Mode};
pub use concat::{stream_concat, ConcatConfig, ConcatError, StreamConcat};
pub use queue::{QueueSnapshot, QueueState, Synthesizer, SynthConfig, TtsEvent, TtsQueue, TtsStream};
pub use segment::{join, normalize, segment, Boundary, Lexicon, Segment, SegmentError, Segmenter};
pub use segment::{MAX_WORDS, MIN_WORDS};

pub const DEFAULT_SAMPLE_RATE: u32 = 22_050;
/// Duration estimate used for silence substitution and the mock engine.
pub const MS_PER_WORD: u64 = 250;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AudioChunk {
    /// Segment index (1-based).
    pub index: usize,
    pub generation: u64,
    pub sample_rate: u32,
    #[serde(skip)]
    pub samples: Vec<i16>,
    pub synth_latency_ms: u64,
    /// Silence substituted for a segment the engine failed on.
    #[serde(default)]
    pub degraded: bool,
}

impl AudioChunk {
    pub fn frames(&self) -> usize {
        self.samples.len()
    }

    pub fn duration_ms(&self) -> f64 {
        self.samples.len() as f64 * 1000.0 / self.sample_rate as f64
    }
}

pub fn estimated_duration_ms(word_count: usize) -> u64 {
    word_count.max(1) as u64 * MS_PER_WORD
}

pub fn silence(duration_ms: u64, sample_rate: u32) -> Vec<i16> {
    vec![0; (duration_ms * sample_rate as u64 / 1000) as usize]
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EngineError {
    #[error("engine failure: {0}")]
    Failure(String),
}

#[async_trait]
pub trait TtsEngine: Send + Sync {
    fn name(&self) -> &str;
    fn sample_rate(&self) -> u32;
    async fn synthesize(&self, segment: &Segment) -> Result<Vec<i16>, EngineError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockEngineConfig {
    pub base_ms: u64,
    /// Upper bound of the uniform jitter added to every call.
    pub jitter_ms: u64,
    pub sample_rate: u32,
    pub seed: u64,
}

impl Default for MockEngineConfig {
    fn default() -> Self {
        Self { base_ms: 50, jitter_ms: 20, sample_rate: DEFAULT_SAMPLE_RATE, seed: 7 }
    }
}

/// Simulated engine: each call sleeps `base + U(0, jitter)` ms (seeded) and
/// returns a deterministic tone of 250 ms per word.
#[derive(Debug)]
pub struct MockEngine {
    config: MockEngineConfig,
    rng: Mutex<ChaCha8Rng>,
    fixed: Mutex<HashMap<usize, u64>>,
    failures: Mutex<HashMap<usize, u32>>,
    calls: AtomicUsize,
}

impl MockEngine {
    pub fn new(config: MockEngineConfig) -> Self {
        Self {
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(config.seed)),
            config,
            fixed: Mutex::default(),
            failures: Mutex::default(),
            calls: AtomicUsize::new(0),
        }
    }

    /// Pins the latency of segment `index`, bypassing the random draw.
    pub fn with_fixed_latency(self, index: usize, ms: u64) -> Self {
        self.fixed.lock().insert(index, ms);
        self
    }

    /// Makes the next `times` calls for segment `index` fail.
    pub fn fail_segment(self, index: usize, times: u32) -> Self {
        self.failures.lock().insert(index, times);
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn draw_latency(&self) -> u64 {
        let jitter = if self.config.jitter_ms == 0 {
            0
        } else {
            self.rng.lock().random_range(0..=self.config.jitter_ms)
        };
        self.config.base_ms + jitter
    }
}

/// Deterministic tone standing in for speech.
pub fn tone(index: usize, duration_ms: u64, sample_rate: u32) -> Vec<i16> {
    let freq = 180.0 + 30.0 * (index % 6) as f64;
    let n = (duration_ms * sample_rate as u64 / 1000) as usize;
    (0..n)
        .map(|i| {
            let t = i as f64 / sample_rate as f64;
            (6000.0 * (2.0 * std::f64::consts::PI * freq * t).sin()) as i16
        })
        .collect()
}

#[async_trait]
impl TtsEngine for MockEngine {
    fn name(&self) -> &str {
        "mock-tts"
    }

    fn sample_rate(&self) -> u32 {
        self.config.sample_rate
    }

    async fn synthesize(&self, segment: &Segment) -> Result<Vec<i16>, EngineError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let fixed = self.fixed.lock().get(&segment.index).copied();
        let latency = fixed.unwrap_or_else(|| self.draw_latency());
        tokio::time::sleep(Duration::from_millis(latency)).await;
        {
            let mut failures = self.failures.lock();
            if let Some(left) = failures.get_mut(&segment.index).filter(|n| **n > 0) {
                *left -= 1;
                return Err(EngineError::Failure(format!("injected failure on segment {}", segment.index)));
            }
        }
        Ok(tone(segment.index, estimated_duration_ms(segment.word_count), self.config.sample_rate))
    }
}

/// Engine behind an `/audio/speech` endpoint returning WAV.
#[derive(Debug, Clone)]
pub struct RemoteTtsEngine {
    http: reqwest::Client,
    base_url: String,
    model: String,
    voice: String,
    api_key: Option<String>,
    sample_rate: u32,
    timeout: Duration,
}

impl RemoteTtsEngine {
    pub fn new(base_url: &str, model: &str, voice: &str, api_key: Option<String>, timeout: Duration) -> Self {
        Self {
            http: reqwest::Client::new(),
            base_url: base_url.trim_end_matches('/').to_string(),
            model: model.to_string(),
            voice: voice.to_string(),
            api_key,
            sample_rate: DEFAULT_SAMPLE_RATE,
            timeout,
        }
    }

    pub fn with_sample_rate(mut self, rate: u32) -> Self {
        self.sample_rate = rate;
        self
    }
}

#[async_trait]
impl TtsEngine for RemoteTtsEngine {
    fn name(&self) -> &str {
        "remote-tts"
    }

    fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    async fn synthesize(&self, segment: &Segment) -> Result<Vec<i16>, EngineError> {
        let fail = |m: String| EngineError::Failure(m);
        let body = serde_json::json!({
            "model": self.model,
            "input": segment.source_text(),
            "voice": self.voice,
            "response_format": "wav",
        });
        let mut req = self
            .http
            .post(format!("{}/audio/speech", self.base_url))
            .json(&body)
            .timeout(self.timeout);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().await.map_err(|e| fail(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(fail(format!("status {}", resp.status())));
        }
        let bytes = resp.bytes().await.map_err(|e| fail(e.to_string()))?;
        let (samples, rate) = decode_wav(&bytes).map_err(|e| fail(e.to_string()))?;
        if rate != self.sample_rate {
            return Err(fail(format!("engine returned {rate} Hz, expected {}", self.sample_rate)));
        }
        Ok(samples)
    }
}

fn wav_spec(sample_rate: u32) -> hound::WavSpec {
    hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    }
}

pub fn encode_wav(samples: &[i16], sample_rate: u32) -> Result<Vec<u8>, hound::Error> {
    let mut cursor = Cursor::new(Vec::new());
    {
        let mut w = hound::WavWriter::new(&mut cursor, wav_spec(sample_rate))?;
        for s in samples {
            w.write_sample(*s)?;
        }
        w.finalize()?;
    }
    Ok(cursor.into_inner())
}

pub fn write_wav(path: &Path, samples: &[i16], sample_rate: u32) -> Result<(), hound::Error> {
    let mut w = hound::WavWriter::create(path, wav_spec(sample_rate))?;
    for s in samples {
        w.write_sample(*s)?;
    }
    w.finalize()
}

/// Decodes 16-bit mono WAV into samples and sample rate.
pub fn decode_wav(bytes: &[u8]) -> Result<(Vec<i16>, u32), hound::Error> {
    let mut r = hound::WavReader::new(Cursor::new(bytes))?;
    let spec = r.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(hound::Error::Unsupported);
    }
    let samples = r.samples::<i16>().collect::<Result<Vec<_>, _>>()?;
    Ok((samples, spec.sample_rate))
}
