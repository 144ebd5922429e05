use std::path::Path;
use std::time::{Duration, Instant};

use base64::Engine as _;
use futures::{SinkExt, StreamExt};
use maestro_gateway::{Gateway, GatewayConfig};
use serde_json::{json, Value};
use tokio_tungstenite::tungstenite::Message;

struct Server {
    base: String,
    http: reqwest::Client,
}

async fn start(tweak: impl FnOnce(&mut GatewayConfig)) -> Server {
    let mut cfg = GatewayConfig::default();
    cfg.runtime.realtime_playback = false;
    tweak(&mut cfg);
    let gw = Gateway::from_config(cfg, Path::new(".")).unwrap();
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let app = gw.router();
    tokio::spawn(async move { axum_serve(listener, app).await });
    Server { base: format!("http://{addr}"), http: reqwest::Client::new() }
}

async fn axum_serve(listener: tokio::net::TcpListener, app: axum::Router) {
    axum::serve(listener, app).await.unwrap();
}

impl Server {
    async fn create(&self, body: Value) -> String {
        let r = self.http.post(format!("{}/sessions", self.base)).json(&body).send().await.unwrap();
        assert_eq!(r.status(), 201);
        r.json::<Value>().await.unwrap()["session_id"].as_str().unwrap().to_string()
    }

    async fn submit(&self, sid: &str, body: Value) -> reqwest::Response {
        self.http.post(format!("{}/sessions/{sid}/turns", self.base)).json(&body).send().await.unwrap()
    }

    async fn interrupt(&self, sid: &str) -> bool {
        let r = self.http.post(format!("{}/sessions/{sid}/interrupt", self.base)).send().await.unwrap();
        r.json::<Value>().await.unwrap()["was_active"].as_bool().unwrap()
    }

    async fn get(&self, path: &str) -> reqwest::Response {
        self.http.get(format!("{}{path}", self.base)).send().await.unwrap()
    }
}

/// Reads an NDJSON turn stream to its end.
async fn read_events(mut resp: reqwest::Response) -> Vec<Value> {
    assert_eq!(resp.status(), 200);
    let mut buf = Vec::new();
    while let Some(chunk) = resp.chunk().await.unwrap() {
        buf.extend_from_slice(&chunk);
    }
    String::from_utf8(buf)
        .unwrap()
        .lines()
        .filter(|l| !l.is_empty())
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn kinds(events: &[Value]) -> Vec<String> {
    events.iter().map(|e| e["kind"].as_str().unwrap().to_string()).collect()
}

fn garden_turn() -> Value {
    json!({
        "text": "What flowers are blooming in this image?",
        "media": [{
            "modality": "vision",
            "media_type": "image/png",
            "data": base64::engine::general_purpose::STANDARD.encode(b"\x89PNG garden"),
            "tags": ["garden", "flowers", "roses", "tulips", "image"],
        }],
    })
}

#[tokio::test]
async fn garden_turn_event_sequence() {
    let s = start(|_| {}).await;
    assert_eq!(s.get("/health").await.json::<Value>().await.unwrap()["status"], "ok");
    let sid = s.create(json!({})).await;
    let events = read_events(s.submit(&sid, garden_turn()).await).await;
    let k = kinds(&events);
    let n = k.iter().filter(|x| *x == "segment").count();
    let mut expected = vec!["transcript", "controls", "expert_started", "expert_done", "fusion_done"];
    expected.extend(std::iter::repeat_n("segment", n));
    expected.extend(std::iter::repeat_n("audio_chunk_meta", n));
    expected.push("turn_done");
    assert_eq!(k, expected);
    assert!(n >= 2);
    assert!(events.windows(2).all(|w| w[0]["seq"].as_u64() < w[1]["seq"].as_u64()));
    assert_eq!(events[1]["payload"]["controls"], json!(["[S.need_vision]"]));

    let trace: Value = s.get(&format!("/sessions/{sid}/turns/1")).await.json().await.unwrap();
    assert_eq!(trace["expert_trace"].as_array().unwrap().len(), 1);
    assert_eq!(trace["expert_trace"][0]["modality"], "vision");
    let missing = s.get(&format!("/sessions/{sid}/turns/9")).await;
    assert_eq!(missing.status(), 404);
    assert_eq!(missing.json::<Value>().await.unwrap()["error"], "unknown_turn");

    let mem: Value = s.get(&format!("/sessions/{sid}/memory")).await.json().await.unwrap();
    assert!(mem["items"].as_array().unwrap().len() >= 4);
    let replay: Vec<Value> = s.get(&format!("/sessions/{sid}/events?after=2")).await.json().await.unwrap();
    assert_eq!(replay.len(), events.len() - 2);
}

#[tokio::test]
async fn unknown_session_and_bad_requests() {
    let s = start(|_| {}).await;
    let r = s.submit("nope", json!({"text": "hi"})).await;
    assert_eq!(r.status(), 404);
    assert_eq!(r.json::<Value>().await.unwrap()["error"], "unknown_session");
    let r = s.http.post(format!("{}/sessions/nope/interrupt", s.base)).send().await.unwrap();
    assert_eq!(r.status(), 404);

    let sid = s.create(json!({})).await;
    let r = s.submit(&sid, json!({})).await;
    assert_eq!(r.status(), 400);
    let r = s.submit(&sid, json!({"text": "a", "audio": {"media_type": "audio/wav", "bytes": ""}})).await;
    assert_eq!(r.status(), 400);
}

#[tokio::test]
async fn capacity_and_budget_override() {
    let s = start(|c| c.max_sessions = 1).await;
    let sid = s.create(json!({"memory_budget": 2000})).await;
    let r = s.http.post(format!("{}/sessions", s.base)).send().await.unwrap();
    assert_eq!(r.status(), 503);
    assert_eq!(r.json::<Value>().await.unwrap()["error"], "capacity_exceeded");

    let filler = "the garden path winds past the old stone wall and the quiet pond ".repeat(6);
    for i in 0..8 {
        read_events(s.submit(&sid, json!({"text": format!("hello {i} {filler}")})).await).await;
    }
    let mem: Value = s.get(&format!("/sessions/{sid}/memory")).await.json().await.unwrap();
    assert_eq!(mem["budget"], 2000);
    assert!(mem["rendered_size"].as_u64().unwrap() <= 2000, "{}", mem["rendered_size"]);
    assert!(mem["items"].as_array().unwrap().iter().any(|i| i["content"]["metadata"]["context"]
        .as_array()
        .unwrap()
        .iter()
        .any(|t| t == "summary")));

    let r = s.http.delete(format!("{}/sessions/{sid}", s.base)).send().await.unwrap();
    assert_eq!(r.status(), 204);
    s.create(json!({})).await;
}

#[tokio::test]
async fn payload_limit() {
    let s = start(|c| c.max_payload_bytes = 1024).await;
    let sid = s.create(json!({})).await;
    let r = s.submit(&sid, json!({"text": "x".repeat(4096)})).await;
    assert_eq!(r.status(), 413);
    assert_eq!(r.json::<Value>().await.unwrap()["error"], "payload_too_large");
}

#[tokio::test]
async fn bearer_token() {
    let s = start(|c| c.auth_token = Some("sesame".into())).await;
    assert_eq!(s.get("/health").await.status(), 200);
    let r = s.http.post(format!("{}/sessions", s.base)).send().await.unwrap();
    assert_eq!(r.status(), 401);
    let r = s.http.post(format!("{}/sessions", s.base)).bearer_auth("sesame").send().await.unwrap();
    assert_eq!(r.status(), 201);
}

#[tokio::test]
async fn out_of_band_interrupt() {
    let s = start(|c| c.runtime.realtime_playback = true).await;
    let sid = s.create(json!({})).await;
    assert!(!s.interrupt(&sid).await);
    let resp = s.submit(&sid, garden_turn()).await;
    let reader = tokio::spawn(read_events(resp));
    tokio::time::sleep(Duration::from_millis(600)).await;
    let t0 = Instant::now();
    assert!(s.interrupt(&sid).await);
    let events = reader.await.unwrap();
    assert!(t0.elapsed() < Duration::from_millis(200), "{:?}", t0.elapsed());
    assert_eq!(kinds(&events).last().unwrap(), "interrupted");
    assert_eq!(kinds(&events).iter().filter(|k| ["turn_done", "interrupted", "turn_failed"].contains(&k.as_str())).count(), 1);
    assert!(!s.interrupt(&sid).await);
}

#[tokio::test]
async fn stop_turn_ends_prior_stream() {
    let s = start(|c| c.runtime.realtime_playback = true).await;
    let sid = s.create(json!({})).await;
    let first = tokio::spawn(read_events(s.submit(&sid, garden_turn()).await));
    tokio::time::sleep(Duration::from_millis(600)).await;
    let second = read_events(s.submit(&sid, json!({"text": "How many roses"})).await).await;
    assert_eq!(kinds(&second), ["transcript", "controls", "turn_done"]);
    let first = first.await.unwrap();
    assert_eq!(kinds(&first).last().unwrap(), "interrupted");

    let third = read_events(s.submit(&sid, json!({"text": "are there in the image?"})).await).await;
    let done = third.iter().find(|e| e["kind"] == "expert_done").unwrap();
    assert_eq!(done["payload"]["record"]["outcome"], "skipped_cached");
    let fused = third.iter().find(|e| e["kind"] == "fusion_done").unwrap();
    assert!(fused["payload"]["text"].as_str().unwrap().contains('3'));
}

#[tokio::test]
async fn sessions_are_isolated() {
    let s = start(|_| {}).await;
    let a = s.create(json!({})).await;
    let b = s.create(json!({})).await;
    let ea = read_events(s.submit(&a, json!({"text": "hello"})).await).await;
    let eb = read_events(s.submit(&b, json!({"text": "hi"})).await).await;
    assert!(ea.iter().all(|e| e["session_id"] == a.as_str()));
    assert!(eb.iter().all(|e| e["session_id"] == b.as_str()));
    let log_b: Vec<Value> = s.get(&format!("/sessions/{b}/events")).await.json().await.unwrap();
    assert_eq!(log_b.len(), eb.len());
}

#[tokio::test]
async fn websocket_frames_precede_meta() {
    let s = start(|_| {}).await;
    let sid = s.create(json!({})).await;
    let url = format!("{}/sessions/{sid}/ws", s.base.replace("http", "ws"));
    let (mut ws, _) = tokio_tungstenite::connect_async(url).await.unwrap();
    let turn = json!({"type": "turn"}).as_object().unwrap().clone().into_iter().chain(garden_turn().as_object().unwrap().clone()).collect::<serde_json::Map<_, _>>();
    ws.send(Message::text(Value::Object(turn).to_string())).await.unwrap();

    let mut frames: Vec<(u64, u32, bool)> = Vec::new();
    let mut metas = Vec::new();
    let mut accepted = false;
    let deadline = tokio::time::Instant::now() + Duration::from_secs(10);
    while let Ok(Some(msg)) = tokio::time::timeout_at(deadline, ws.next()).await {
        match msg.unwrap() {
            Message::Binary(b) => {
                let (generation, index, last, samples) = maestro_core::orchestrator::AudioFrame::decode(&b).unwrap();
                assert!(!samples.is_empty());
                frames.push((generation, index, last));
            }
            Message::Text(t) => {
                let v: Value = serde_json::from_str(t.as_str()).unwrap();
                if v["type"] == "turn_accepted" {
                    accepted = true;
                }
                if v["kind"] == "audio_chunk_meta" {
                    let idx = v["payload"]["index"].as_u64().unwrap() as u32;
                    assert!(frames.iter().any(|f| f.1 == idx), "meta {idx} before its frame");
                    metas.push(idx);
                }
                if v["kind"] == "turn_done" {
                    break;
                }
            }
            _ => {}
        }
    }
    assert!(accepted);
    assert!(!frames.is_empty());
    assert_eq!(frames.iter().map(|f| f.1).collect::<Vec<_>>(), metas);
    assert!(frames.last().unwrap().2);

    ws.send(Message::text(json!({"type": "interrupt"}).to_string())).await.unwrap();
    loop {
        if let Message::Text(t) = ws.next().await.unwrap().unwrap() {
            let v: Value = serde_json::from_str(t.as_str()).unwrap();
            if v["type"] == "interrupt_ack" {
                assert_eq!(v["was_active"], false);
                break;
            }
        }
    }
}
