//! Core of the maestro orchestration runtime.
//!
//! A controller model reads the user's turn plus rendered memory and emits
//! response text interleaved with `[S.*]` control tokens. The runtime splits
//! those tokens off, fans work out to registered expert backends, fuses their
//! evidence back into the answer, and speaks it through a parallel,
//! interruptible TTS queue, while keeping a compressed cross-modal memory.

pub mod memory;
pub mod protocol;
pub mod text;
pub mod chat;
pub mod controller;
pub mod mock;
pub mod experts;
pub mod tts;
pub mod orchestrator;
