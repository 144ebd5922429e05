//! HTTP and WebSocket front door for the orchestration runtime.
//!
//! | Method | Path | |
//! |---|---|---|
//! | GET | `/health` | liveness, session count |
//! | POST | `/sessions` | create a session (`{"memory_budget": 2000}` optional) |
//! | DELETE | `/sessions/{id}` | close a session |
//! | POST | `/sessions/{id}/turns` | submit a turn; NDJSON event stream |
//! | GET | `/sessions/{id}/turns/{turn}` | recorded turn result |
//! | POST | `/sessions/{id}/interrupt` | hard interrupt, `{"was_active": bool}` |
//! | GET | `/sessions/{id}/events?after=N` | event log replay |
//! | GET | `/sessions/{id}/memory` | memory pool dump |
//! | GET | `/sessions/{id}/ws` | live events (text) and PCM frames (binary) |

pub mod config;
mod server;

pub use config::{BackendConfig, BackendKind, ConfigError, GatewayConfig, RuntimeSettings, TtsSettings};
pub use server::{serve, ClientMessage, CreateSession, Gateway, GatewayError, MediaUpload, TurnRequest};
