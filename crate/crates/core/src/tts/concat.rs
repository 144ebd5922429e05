use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{AudioChunk, Boundary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConcatConfig {
    pub crossfade_ms: u64,
    pub punctuation_pause_ms: u64,
    /// Pause after discourse and syntactic boundaries.
    pub clause_pause_ms: u64,
}

impl Default for ConcatConfig {
    fn default() -> Self {
        Self { crossfade_ms: 20, punctuation_pause_ms: 120, clause_pause_ms: 60 }
    }
}

impl ConcatConfig {
    pub fn pause_ms(&self, boundary: Boundary) -> u64 {
        match boundary {
            Boundary::Punctuation => self.punctuation_pause_ms,
            Boundary::Discourse | Boundary::Syntactic => self.clause_pause_ms,
            Boundary::Forced => 0,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ConcatError {
    #[error("chunk {got} arrived while expecting chunk {expected}")]
    OrderViolation { expected: usize, got: usize },
    #[error("chunk at {got} Hz in a {expected} Hz stream")]
    RateMismatch { expected: u32, got: u32 },
}

/// Incremental concatenation. Each `push` returns the samples that are final;
/// the last crossfade window is held back until the next chunk or `finish`.
#[derive(Debug, Clone)]
pub struct StreamConcat {
    config: ConcatConfig,
    sample_rate: Option<u32>,
    next_index: Option<usize>,
    held: Vec<i16>,
    pause_ms: u64,
    emitted: usize,
    overlaps: usize,
}

impl StreamConcat {
    pub fn new(config: ConcatConfig) -> Self {
        Self { config, sample_rate: None, next_index: None, held: Vec::new(), pause_ms: 0, emitted: 0, overlaps: 0 }
    }

    /// Frames emitted so far, including `finish` output once called.
    pub fn emitted_frames(&self) -> usize {
        self.emitted
    }

    /// Total frames consumed by crossfades.
    pub fn overlap_frames(&self) -> usize {
        self.overlaps
    }

    /// `boundary` is the boundary after this chunk (`None` for the last one).
    pub fn push(&mut self, chunk: &AudioChunk, boundary: Option<Boundary>) -> Result<Vec<i16>, ConcatError> {
        let first = self.next_index.is_none();
        if let Some(expected) = self.next_index {
            if chunk.index != expected {
                return Err(ConcatError::OrderViolation { expected, got: chunk.index });
            }
        }
        let rate = *self.sample_rate.get_or_insert(chunk.sample_rate);
        if rate != chunk.sample_rate {
            return Err(ConcatError::RateMismatch { expected: rate, got: chunk.sample_rate });
        }
        self.next_index = Some(chunk.index + 1);

        let frames = |ms: u64| (ms * rate as u64 / 1000) as usize;
        let mut out;
        if !first {
            let mut incoming = vec![0i16; frames(self.pause_ms)];
            incoming.extend_from_slice(&chunk.samples);
            let overlap = self.held.len().min(incoming.len());
            out = self.held[..self.held.len() - overlap].to_vec();
            let tail = &self.held[self.held.len() - overlap..];
            for j in 0..overlap {
                let w = (j + 1) as f64 / (overlap + 1) as f64;
                let v = tail[j] as f64 * (1.0 - w) + incoming[j] as f64 * w;
                out.push(v.round() as i16);
            }
            out.extend_from_slice(&incoming[overlap..]);
            self.overlaps += overlap;
        } else {
            out = chunk.samples.clone();
        }

        self.held.clear();
        if let Some(b) = boundary {
            let keep = frames(self.config.crossfade_ms).min(out.len());
            self.held = out.split_off(out.len() - keep);
            self.pause_ms = self.config.pause_ms(b);
        }
        self.emitted += out.len();
        Ok(out)
    }

    pub fn finish(&mut self) -> Vec<i16> {
        let out = std::mem::take(&mut self.held);
        self.emitted += out.len();
        out
    }
}

/// Concatenates a complete, ordered list of chunks.
pub fn stream_concat(
    chunks: &[(AudioChunk, Option<Boundary>)],
    config: ConcatConfig,
) -> Result<Vec<i16>, ConcatError> {
    let mut c = StreamConcat::new(config);
    let mut out = Vec::new();
    for (chunk, boundary) in chunks {
        out.extend(c.push(chunk, *boundary)?);
    }
    out.extend(c.finish());
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tts::tone;

    fn chunk(index: usize, ms: u64) -> AudioChunk {
        AudioChunk {
            index,
            generation: 1,
            sample_rate: 22_050,
            samples: tone(index, ms, 22_050),
            synth_latency_ms: 0,
            degraded: false,
        }
    }

    #[test]
    fn single_chunk_passthrough() {
        let c = chunk(1, 700);
        assert_eq!(stream_concat(&[(c.clone(), None)], ConcatConfig::default()).unwrap(), c.samples);
        assert_eq!(
            stream_concat(&[(c.clone(), Some(Boundary::Punctuation))], ConcatConfig::default()).unwrap(),
            c.samples
        );
    }

    #[test]
    fn duration_formula() {
        let out = stream_concat(
            &[(chunk(1, 1000), Some(Boundary::Punctuation)), (chunk(2, 1000), None)],
            ConcatConfig::default(),
        )
        .unwrap();
        // 1 + 1 - 0.020 + 0.120 s
        assert_eq!(out.len(), 22_050 * 2 - 441 + 2646);
    }

    #[test]
    fn clause_and_forced_pauses() {
        let cfg = ConcatConfig::default();
        let out = stream_concat(
            &[
                (chunk(1, 500), Some(Boundary::Discourse)),
                (chunk(2, 500), Some(Boundary::Forced)),
                (chunk(3, 500), None),
            ],
            cfg,
        )
        .unwrap();
        let half = 11_025;
        assert_eq!(out.len(), 3 * half - 2 * 441 + 1323);
    }

    #[test]
    fn out_of_order_chunk() {
        let mut c = StreamConcat::new(ConcatConfig::default());
        c.push(&chunk(1, 100), Some(Boundary::Punctuation)).unwrap();
        assert_eq!(
            c.push(&chunk(3, 100), None),
            Err(ConcatError::OrderViolation { expected: 2, got: 3 })
        );
    }

    #[test]
    fn crossfade_is_linear_between_neighbors() {
        let cfg = ConcatConfig { crossfade_ms: 20, punctuation_pause_ms: 0, clause_pause_ms: 0 };
        let mk = |i, v| AudioChunk { index: i, generation: 0, sample_rate: 1000, samples: vec![v; 100], synth_latency_ms: 0, degraded: false };
        let out = stream_concat(&[(mk(1, 1000), Some(Boundary::Forced)), (mk(2, 0), None)], cfg).unwrap();
        assert_eq!(out.len(), 180);
        let fade = &out[80..100];
        assert!(fade.windows(2).all(|w| w[0] > w[1]));
        assert_eq!(out[79], 1000);
        assert_eq!(out[100], 0);
    }
}
