use std::collections::VecDeque;
use std::convert::Infallible;
use std::path::Path;
use std::sync::Arc;

use axum::body::{Body, Bytes};
use axum::extract::rejection::BytesRejection;
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{DefaultBodyLimit, Path as UrlPath, Query, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine as _;
use futures::{SinkExt, Stream, StreamExt};
use indexmap::IndexMap;
use maestro_core::experts::AudioPayload;
use maestro_core::memory::MemoryItem;
use maestro_core::orchestrator::{EventEnvelope, OrchestratorError, Runtime, Session, TurnInput};
use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;
use tokio::sync::broadcast;

use crate::config::{ConfigError, GatewayConfig};

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("unknown session `{0}`")]
    UnknownSession(String),
    #[error("unknown turn {0}")]
    UnknownTurn(u64),
    #[error("session limit of {0} reached")]
    CapacityExceeded(usize),
    #[error("payload exceeds {0} bytes")]
    PayloadTooLarge(usize),
    #[error("session `{0}` is already processing a turn")]
    Busy(String),
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("missing or invalid bearer token")]
    Unauthorized,
}

impl GatewayError {
    pub fn code(&self) -> &'static str {
        match self {
            GatewayError::UnknownSession(_) => "unknown_session",
            GatewayError::UnknownTurn(_) => "unknown_turn",
            GatewayError::CapacityExceeded(_) => "capacity_exceeded",
            GatewayError::PayloadTooLarge(_) => "payload_too_large",
            GatewayError::Busy(_) => "busy",
            GatewayError::BadRequest(_) => "bad_request",
            GatewayError::Unauthorized => "unauthorized",
        }
    }

    pub fn status(&self) -> StatusCode {
        match self {
            GatewayError::UnknownSession(_) | GatewayError::UnknownTurn(_) => StatusCode::NOT_FOUND,
            GatewayError::CapacityExceeded(_) => StatusCode::SERVICE_UNAVAILABLE,
            GatewayError::PayloadTooLarge(_) => StatusCode::PAYLOAD_TOO_LARGE,
            GatewayError::Busy(_) => StatusCode::CONFLICT,
            GatewayError::BadRequest(_) => StatusCode::BAD_REQUEST,
            GatewayError::Unauthorized => StatusCode::UNAUTHORIZED,
        }
    }

    fn body(&self) -> serde_json::Value {
        json!({"error": self.code(), "message": self.to_string()})
    }
}

impl From<OrchestratorError> for GatewayError {
    fn from(e: OrchestratorError) -> Self {
        match e {
            OrchestratorError::Busy(id) => GatewayError::Busy(id),
            OrchestratorError::UnknownTurn(t) => GatewayError::UnknownTurn(t),
        }
    }
}

impl IntoResponse for GatewayError {
    fn into_response(self) -> Response {
        (self.status(), Json(self.body())).into_response()
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct CreateSession {
    pub memory_budget: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MediaUpload {
    pub modality: String,
    pub media_type: String,
    /// Base64 payload.
    pub data: String,
    #[serde(default)]
    pub tags: Vec<String>,
}

/// Body of a turn submission: exactly one of `text` or `audio`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct TurnRequest {
    pub text: Option<String>,
    pub audio: Option<AudioPayload>,
    pub media: Vec<MediaUpload>,
}

/// Messages a WebSocket client may send.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClientMessage {
    Turn(TurnRequest),
    Interrupt,
}

pub struct Gateway {
    config: GatewayConfig,
    runtime: Arc<Runtime>,
    sessions: RwLock<IndexMap<String, Arc<Session>>>,
}

impl Gateway {
    pub fn new(config: GatewayConfig, runtime: Runtime) -> Arc<Self> {
        Arc::new(Self { config, runtime: Arc::new(runtime), sessions: RwLock::default() })
    }

    /// Builds the runtime from `config`, resolving paths against `base`.
    pub fn from_config(config: GatewayConfig, base: &Path) -> Result<Arc<Self>, ConfigError> {
        config.validate()?;
        let runtime = config.runtime.build(base)?;
        Ok(Self::new(config, runtime))
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.config
    }

    pub fn create_session(&self, req: CreateSession) -> Result<Arc<Session>, GatewayError> {
        let mut sessions = self.sessions.write();
        if sessions.len() >= self.config.max_sessions {
            return Err(GatewayError::CapacityExceeded(self.config.max_sessions));
        }
        let mut memory = self.runtime.config.memory.clone();
        if let Some(b) = req.memory_budget {
            if b == 0 {
                return Err(GatewayError::BadRequest("memory_budget must be positive".into()));
            }
            memory.budget = b;
        }
        let id = uuid::Uuid::new_v4().to_string();
        let session = Session::with_memory(id.clone(), self.runtime.clone(), memory);
        sessions.insert(id, session.clone());
        Ok(session)
    }

    pub fn session(&self, id: &str) -> Result<Arc<Session>, GatewayError> {
        self.sessions.read().get(id).cloned().ok_or_else(|| GatewayError::UnknownSession(id.to_string()))
    }

    pub async fn close_session(&self, id: &str) -> Result<(), GatewayError> {
        let session = self.sessions.write().shift_remove(id).ok_or_else(|| GatewayError::UnknownSession(id.to_string()))?;
        session.interrupt().await;
        Ok(())
    }

    pub fn session_count(&self) -> usize {
        self.sessions.read().len()
    }

    pub fn router(self: &Arc<Self>) -> Router {
        let api = Router::new()
            .route("/sessions", post(create_session))
            .route("/sessions/{id}", axum::routing::delete(close_session))
            .route("/sessions/{id}/turns", post(submit_turn))
            .route("/sessions/{id}/turns/{turn}", get(get_trace))
            .route("/sessions/{id}/interrupt", post(send_interrupt))
            .route("/sessions/{id}/events", get(get_events))
            .route("/sessions/{id}/memory", get(dump_memory))
            .route("/sessions/{id}/ws", get(websocket))
            .layer(middleware::from_fn_with_state(self.clone(), require_token));
        Router::new()
            .route("/health", get(health))
            .merge(api)
            .layer(DefaultBodyLimit::max(self.config.max_payload_bytes))
            .with_state(self.clone())
    }
}

type Shared = State<Arc<Gateway>>;

async fn require_token(State(gw): Shared, req: Request, next: Next) -> Response {
    let Some(expected) = gw.config.auth_token.as_deref() else {
        return next.run(req).await;
    };
    let header_ok = req
        .headers()
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .is_some_and(|t| t == expected);
    // Browsers cannot set headers on WebSocket upgrades.
    let query_ok = req
        .uri()
        .query()
        .into_iter()
        .flat_map(|q| q.split('&'))
        .any(|kv| kv.strip_prefix("token=") == Some(expected));
    if header_ok || query_ok {
        next.run(req).await
    } else {
        GatewayError::Unauthorized.into_response()
    }
}

fn parse_body<T: for<'de> Deserialize<'de> + Default>(
    gw: &Gateway,
    body: Result<Bytes, BytesRejection>,
) -> Result<T, GatewayError> {
    let bytes = body.map_err(|e| {
        if e.status() == StatusCode::PAYLOAD_TOO_LARGE {
            GatewayError::PayloadTooLarge(gw.config.max_payload_bytes)
        } else {
            GatewayError::BadRequest(e.body_text())
        }
    })?;
    if bytes.iter().all(u8::is_ascii_whitespace) {
        return Ok(T::default());
    }
    serde_json::from_slice(&bytes).map_err(|e| GatewayError::BadRequest(e.to_string()))
}

async fn health(State(gw): Shared) -> Json<serde_json::Value> {
    Json(json!({
        "status": "ok",
        "sessions": gw.session_count(),
        "max_sessions": gw.config.max_sessions,
        "modalities": gw.runtime.experts.modalities(),
    }))
}

async fn create_session(State(gw): Shared, body: Result<Bytes, BytesRejection>) -> Result<Response, GatewayError> {
    let req: CreateSession = parse_body(&gw, body)?;
    let session = gw.create_session(req)?;
    let budget = session.with_store(|s| s.config().budget).await;
    Ok((StatusCode::CREATED, Json(json!({"session_id": session.id(), "memory_budget": budget}))).into_response())
}

async fn close_session(State(gw): Shared, UrlPath(id): UrlPath<String>) -> Result<StatusCode, GatewayError> {
    gw.close_session(&id).await?;
    Ok(StatusCode::NO_CONTENT)
}

/// Attaches uploads and converts the request into a turn input.
fn prepare_turn(session: &Session, req: TurnRequest) -> Result<TurnInput, GatewayError> {
    let input = match (req.text, req.audio) {
        (Some(t), None) => TurnInput::Text(t),
        (None, Some(a)) => TurnInput::Audio(a),
        _ => return Err(GatewayError::BadRequest("exactly one of `text` or `audio` is required".into())),
    };
    let mut decoded = Vec::with_capacity(req.media.len());
    for m in req.media {
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(m.data.as_bytes())
            .map_err(|e| GatewayError::BadRequest(format!("media data: {e}")))?;
        decoded.push((m.modality, m.media_type, bytes, m.tags));
    }
    for (modality, media_type, bytes, tags) in decoded {
        session.attach_media(&modality, &media_type, bytes, tags);
    }
    Ok(input)
}

struct TurnFeed {
    rx: broadcast::Receiver<EventEnvelope>,
    session: Arc<Session>,
    turn: u64,
    last_seq: u64,
    pending: VecDeque<EventEnvelope>,
    done: bool,
}

/// Events of one turn, in seq order, ending with its terminal event.
fn turn_events(feed: TurnFeed) -> impl Stream<Item = EventEnvelope> {
    futures::stream::unfold(feed, |mut f| async move {
        if f.done {
            return None;
        }
        loop {
            while let Some(env) = f.pending.pop_front() {
                if env.turn_id != f.turn || env.seq <= f.last_seq {
                    continue;
                }
                f.last_seq = env.seq;
                f.done = env.kind.is_terminal();
                return Some((env, f));
            }
            match f.rx.recv().await {
                Ok(env) => f.pending.push_back(env),
                Err(broadcast::error::RecvError::Lagged(_)) => {
                    f.pending.extend(f.session.events().since(f.last_seq));
                }
                Err(broadcast::error::RecvError::Closed) => return None,
            }
        }
    })
}

async fn submit_turn(
    State(gw): Shared,
    UrlPath(id): UrlPath<String>,
    body: Result<Bytes, BytesRejection>,
) -> Result<Response, GatewayError> {
    let session = gw.session(&id)?;
    let req: TurnRequest = parse_body(&gw, body)?;
    let input = prepare_turn(&session, req)?;
    let rx = session.events().subscribe();
    let (turn, _handle) = session.start_turn(input)?;
    let feed = TurnFeed { rx, session, turn, last_seq: 0, pending: VecDeque::new(), done: false };
    let lines = turn_events(feed).map(|env| {
        let mut line = serde_json::to_vec(&env).expect("envelope serializes");
        line.push(b'\n');
        Ok::<_, Infallible>(Bytes::from(line))
    });
    Ok(Response::builder()
        .header(header::CONTENT_TYPE, "application/x-ndjson")
        .header("x-turn-id", turn.to_string())
        .body(Body::from_stream(lines))
        .expect("valid response"))
}

async fn send_interrupt(State(gw): Shared, UrlPath(id): UrlPath<String>) -> Result<Json<serde_json::Value>, GatewayError> {
    let session = gw.session(&id)?;
    let was_active = session.interrupt().await;
    Ok(Json(json!({"session_id": id, "was_active": was_active})))
}

async fn get_trace(
    State(gw): Shared,
    UrlPath((id, turn)): UrlPath<(String, u64)>,
) -> Result<Response, GatewayError> {
    let session = gw.session(&id)?;
    Ok(Json(session.snapshot_trace(turn)?).into_response())
}

#[derive(Debug, Deserialize)]
struct EventsQuery {
    #[serde(default)]
    after: u64,
}

async fn get_events(
    State(gw): Shared,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<EventsQuery>,
) -> Result<Json<Vec<EventEnvelope>>, GatewayError> {
    Ok(Json(gw.session(&id)?.events().since(q.after)))
}

#[derive(Debug, Serialize)]
struct MemoryDump {
    session_id: String,
    budget: usize,
    rendered_size: usize,
    items: Vec<MemoryItem>,
}

async fn dump_memory(State(gw): Shared, UrlPath(id): UrlPath<String>) -> Result<Json<MemoryDump>, GatewayError> {
    let session = gw.session(&id)?;
    let dump = session
        .with_store(|s| MemoryDump {
            session_id: id.clone(),
            budget: s.config().budget,
            rendered_size: s.rendered_size(),
            items: s.items().to_vec(),
        })
        .await;
    Ok(Json(dump))
}

async fn websocket(
    State(gw): Shared,
    UrlPath(id): UrlPath<String>,
    ws: WebSocketUpgrade,
) -> Result<Response, GatewayError> {
    let session = gw.session(&id)?;
    Ok(ws.on_upgrade(move |socket| session_socket(socket, session)))
}

/// Text frames carry event envelopes and acks; binary frames carry PCM.
/// Interrupts are handled on receipt, independently of any running turn.
async fn session_socket(socket: WebSocket, session: Arc<Session>) {
    let (mut sink, mut incoming) = socket.split();
    let (out_tx, mut out_rx) = tokio::sync::mpsc::channel::<Message>(256);

    let mut events = session.events().subscribe();
    let mut audio = session.events().subscribe_audio();
    let fwd_tx = out_tx.clone();
    let forward = tokio::spawn(async move {
        loop {
            // Audio first: a frame is always published before its meta event.
            let msg = tokio::select! {
                biased;
                frame = audio.recv() => match frame {
                    Ok(f) => Message::Binary(f.encode().into()),
                    Err(broadcast::error::RecvError::Lagged(n)) => {
                        Message::Text(json!({"type": "audio_lagged", "dropped": n}).to_string().into())
                    }
                    Err(broadcast::error::RecvError::Closed) => break,
                },
                env = events.recv() => match env {
                    Ok(e) => Message::Text(serde_json::to_string(&e).expect("envelope serializes").into()),
                    Err(broadcast::error::RecvError::Lagged(n)) => {
                        Message::Text(json!({"type": "events_lagged", "dropped": n}).to_string().into())
                    }
                    Err(broadcast::error::RecvError::Closed) => break,
                },
            };
            if fwd_tx.send(msg).await.is_err() {
                break;
            }
        }
    });
    let writer = tokio::spawn(async move {
        while let Some(msg) = out_rx.recv().await {
            if sink.send(msg).await.is_err() {
                break;
            }
        }
    });

    while let Some(Ok(msg)) = incoming.next().await {
        let text = match msg {
            Message::Text(t) => t,
            Message::Close(_) => break,
            _ => continue,
        };
        let reply = match serde_json::from_str::<ClientMessage>(text.as_str()) {
            Ok(ClientMessage::Interrupt) => {
                let was_active = session.interrupt().await;
                json!({"type": "interrupt_ack", "was_active": was_active})
            }
            Ok(ClientMessage::Turn(req)) => {
                match prepare_turn(&session, req).and_then(|i| session.start_turn(i).map_err(GatewayError::from)) {
                    Ok((turn, _)) => json!({"type": "turn_accepted", "turn_id": turn}),
                    Err(e) => json!({"type": "error", "error": e.code(), "message": e.to_string()}),
                }
            }
            Err(e) => json!({"type": "error", "error": "bad_request", "message": e.to_string()}),
        };
        if out_tx.send(Message::Text(reply.to_string().into())).await.is_err() {
            break;
        }
    }
    forward.abort();
    drop(out_tx);
    let _ = writer.await;
}

/// Binds `config.listen` and serves until ctrl-c.
pub async fn serve(gateway: Arc<Gateway>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(gateway.config.listen).await?;
    tracing::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, gateway.router())
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
