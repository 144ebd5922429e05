use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use tokio::sync::broadcast;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Transcript,
    Controls,
    ExpertStarted,
    ExpertDone,
    FusionDone,
    Segment,
    AudioChunkMeta,
    Interrupted,
    TurnFailed,
    TurnDone,
}

impl EventKind {
    pub fn is_terminal(self) -> bool {
        matches!(self, EventKind::Interrupted | EventKind::TurnFailed | EventKind::TurnDone)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventEnvelope {
    pub session_id: String,
    pub turn_id: u64,
    pub seq: u64,
    pub kind: EventKind,
    pub payload: Value,
}

/// A PCM frame of played-out audio, tagged with its utterance generation.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioFrame {
    pub turn_id: u64,
    pub generation: u64,
    pub index: u32,
    pub is_final: bool,
    pub sample_rate: u32,
    pub samples: Arc<Vec<i16>>,
}

impl AudioFrame {
    /// Wire form: generation (u64 LE), index (u32 LE), final flag (u8),
    /// then 16-bit little-endian samples.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(13 + self.samples.len() * 2);
        out.extend_from_slice(&self.generation.to_le_bytes());
        out.extend_from_slice(&self.index.to_le_bytes());
        out.push(u8::from(self.is_final));
        for s in self.samples.iter() {
            out.extend_from_slice(&s.to_le_bytes());
        }
        out
    }

    /// Parses the wire form back into `(generation, index, final, samples)`.
    pub fn decode(bytes: &[u8]) -> Option<(u64, u32, bool, Vec<i16>)> {
        if bytes.len() < 13 || !(bytes.len() - 13).is_multiple_of(2) {
            return None;
        }
        let generation = u64::from_le_bytes(bytes[0..8].try_into().ok()?);
        let index = u32::from_le_bytes(bytes[8..12].try_into().ok()?);
        let samples = bytes[13..].chunks_exact(2).map(|c| i16::from_le_bytes([c[0], c[1]])).collect();
        Some((generation, index, bytes[12] != 0, samples))
    }
}

/// Per-session event log with live fan-out. Sequence numbers are assigned
/// under the log lock, so the log and every subscriber see the same order.
#[derive(Debug)]
pub struct EventBus {
    session_id: String,
    log: Mutex<Vec<EventEnvelope>>,
    events: broadcast::Sender<EventEnvelope>,
    audio: broadcast::Sender<AudioFrame>,
}

impl EventBus {
    pub fn new(session_id: impl Into<String>) -> Self {
        Self {
            session_id: session_id.into(),
            log: Mutex::new(Vec::new()),
            events: broadcast::channel(1024).0,
            audio: broadcast::channel(256).0,
        }
    }

    pub fn emit(&self, turn_id: u64, kind: EventKind, payload: Value) -> EventEnvelope {
        let mut log = self.log.lock();
        let env = EventEnvelope {
            session_id: self.session_id.clone(),
            turn_id,
            seq: log.len() as u64 + 1,
            kind,
            payload,
        };
        log.push(env.clone());
        let _ = self.events.send(env.clone());
        env
    }

    pub fn send_audio(&self, frame: AudioFrame) {
        let _ = self.audio.send(frame);
    }

    pub fn subscribe(&self) -> broadcast::Receiver<EventEnvelope> {
        self.events.subscribe()
    }

    pub fn subscribe_audio(&self) -> broadcast::Receiver<AudioFrame> {
        self.audio.subscribe()
    }

    /// Events with `seq` greater than `after`.
    pub fn since(&self, after: u64) -> Vec<EventEnvelope> {
        self.log.lock().iter().filter(|e| e.seq > after).cloned().collect()
    }

    pub fn for_turn(&self, turn_id: u64) -> Vec<EventEnvelope> {
        self.log.lock().iter().filter(|e| e.turn_id == turn_id).cloned().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_round_trip() {
        let f = AudioFrame {
            turn_id: 1,
            generation: 7,
            index: 3,
            is_final: true,
            sample_rate: 22_050,
            samples: Arc::new(vec![1, -2, i16::MAX, i16::MIN]),
        };
        let bytes = f.encode();
        assert_eq!(bytes.len(), 13 + 8);
        assert_eq!(AudioFrame::decode(&bytes), Some((7, 3, true, vec![1, -2, i16::MAX, i16::MIN])));
        assert_eq!(AudioFrame::decode(&bytes[..14]), None);
    }

    #[test]
    fn seq_is_monotonic() {
        let bus = EventBus::new("s");
        let mut rx = bus.subscribe();
        for i in 0..5 {
            bus.emit(i, EventKind::Transcript, Value::Null);
        }
        let seqs: Vec<u64> = bus.since(0).iter().map(|e| e.seq).collect();
        assert_eq!(seqs, [1, 2, 3, 4, 5]);
        assert_eq!(rx.try_recv().unwrap().seq, 1);
        assert_eq!(bus.since(3).len(), 2);
    }
}
