//! Shared test support: a local chat-completion stub server and dataset
//! fixtures.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use axum::extract::State;
use axum::http::StatusCode;
use axum::routing::post;
use axum::{Json, Router};
use serde_json::{json, Value};

use clipper::corpus::{Dataset, ImageRef, Sample};

pub fn sample(id: &str, query: &str, label: &str) -> Sample {
    Sample {
        id: id.to_string(),
        image: ImageRef::Uri {
            uri: format!("img/{id}.png"),
        },
        query: query.to_string(),
        label: label.to_string(),
        meta: BTreeMap::new(),
    }
}

/// n samples with ids `<prefix>#1..=n`, queries "question i", labels "answer i".
pub fn make_dataset(prefix: &str, n: usize) -> Dataset {
    let samples = (1..=n)
        .map(|i| sample(&format!("{prefix}#{i}"), &format!("question {i}"), &format!("answer {i}")))
        .collect();
    Dataset::new(samples, prefix)
}

pub fn write_dataset(dataset: &Dataset, dir: &Path, name: &str) -> std::path::PathBuf {
    let path = dir.join(name);
    clipper::corpus::write_jsonl(dataset, &path).unwrap();
    path
}

/// How the stub answers.
#[derive(Debug, Clone)]
pub enum StubBehavior {
    /// Echo the text part of the last user message back as
    /// `stub-reply:<text>`; logprob requests get a fixed two-token array.
    Echo,
    /// Fail the first `fails` calls with `status`, then behave like Echo.
    FailThenEcho { status: u16, fails: usize },
    /// Always answer with this status and an empty body.
    AlwaysStatus(u16),
}

pub struct StubState {
    pub behavior: StubBehavior,
    pub calls: AtomicUsize,
    pub in_flight: AtomicUsize,
    pub max_in_flight: AtomicUsize,
    /// Protocol violations observed while validating request bodies.
    pub violations: Mutex<Vec<String>>,
    /// Artificial per-request latency to force overlap, in milliseconds.
    pub delay_ms: u64,
}

pub struct StubServer {
    pub addr: SocketAddr,
    pub state: Arc<StubState>,
}

impl StubServer {
    pub async fn start(behavior: StubBehavior, delay_ms: u64) -> StubServer {
        let state = Arc::new(StubState {
            behavior,
            calls: AtomicUsize::new(0),
            in_flight: AtomicUsize::new(0),
            max_in_flight: AtomicUsize::new(0),
            violations: Mutex::new(Vec::new()),
            delay_ms,
        });
        let app = Router::new()
            .route("/chat/completions", post(handle))
            .with_state(state.clone());
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let addr = listener.local_addr().unwrap();
        tokio::spawn(async move {
            axum::serve(listener, app).await.unwrap();
        });
        StubServer { addr, state }
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn violations(&self) -> Vec<String> {
        self.state.violations.lock().unwrap().clone()
    }
}

fn validate(body: &Value, violations: &Mutex<Vec<String>>) {
    let report = |msg: String| violations.lock().unwrap().push(msg);

    match body.get("temperature").and_then(Value::as_f64) {
        Some(0.0) => {}
        other => report(format!("temperature must be 0, got {other:?}")),
    }
    if body.get("model").and_then(Value::as_str).is_none() {
        report("missing model".into());
    }
    let Some(messages) = body.get("messages").and_then(Value::as_array) else {
        report("missing messages".into());
        return;
    };
    if messages.is_empty() {
        report("empty messages".into());
        return;
    }
    let roles: Vec<&str> = messages
        .iter()
        .map(|m| m.get("role").and_then(Value::as_str).unwrap_or("?"))
        .collect();
    if roles[0] != "system" {
        report(format!("first role must be system, got {roles:?}"));
    }
    // one-shot layout: the demonstration must appear as a completed
    // assistant turn between the two user turns
    if roles.len() == 4 && roles != ["system", "user", "assistant", "user"] {
        report(format!("unexpected 4-message layout {roles:?}"));
    }
    for m in messages {
        match m.get("content") {
            Some(Value::Array(parts)) => {
                for p in parts {
                    match p.get("type").and_then(Value::as_str) {
                        Some("text") => {
                            if p.get("text").and_then(Value::as_str).is_none() {
                                report("text part without text".into());
                            }
                        }
                        Some("image_url") => {
                            if p.pointer("/image_url/url").and_then(Value::as_str).is_none() {
                                report("image part without url".into());
                            }
                        }
                        other => report(format!("unknown part type {other:?}")),
                    }
                }
            }
            other => report(format!("content must be a parts array, got {other:?}")),
        }
    }
}

/// Text part of the last user message.
pub fn last_user_text(body: &Value) -> String {
    body.get("messages")
        .and_then(Value::as_array)
        .and_then(|msgs| {
            msgs.iter()
                .rev()
                .find(|m| m.get("role").and_then(Value::as_str) == Some("user"))
        })
        .and_then(|m| m.get("content").and_then(Value::as_array).cloned())
        .map(|parts| {
            parts
                .iter()
                .filter_map(|p| p.get("text").and_then(Value::as_str))
                .collect::<Vec<_>>()
                .join("")
        })
        .unwrap_or_default()
}

pub const STUB_LOGPROBS: [(&str, f64); 2] = [("alpha", -0.25), ("beta", -0.75)];

async fn handle(
    State(state): State<Arc<StubState>>,
    Json(body): Json<Value>,
) -> (StatusCode, Json<Value>) {
    let call = state.calls.fetch_add(1, Ordering::SeqCst);
    let now = state.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
    state.max_in_flight.fetch_max(now, Ordering::SeqCst);
    if state.delay_ms > 0 {
        tokio::time::sleep(std::time::Duration::from_millis(state.delay_ms)).await;
    }
    validate(&body, &state.violations);

    let response = match &state.behavior {
        StubBehavior::AlwaysStatus(status) => (
            StatusCode::from_u16(*status).unwrap(),
            Json(json!({"error": "stubbed failure"})),
        ),
        StubBehavior::FailThenEcho { status, fails } if call < *fails => (
            StatusCode::from_u16(*status).unwrap(),
            Json(json!({"error": "transient stub failure"})),
        ),
        _ => {
            let wants_logprobs =
                body.get("logprobs").and_then(Value::as_bool).unwrap_or(false);
            let payload = if wants_logprobs {
                let content: Vec<Value> = STUB_LOGPROBS
                    .iter()
                    .map(|(token, logprob)| json!({"token": token, "logprob": logprob}))
                    .collect();
                json!({"choices": [{"message": {"content": ""}, "logprobs": {"content": content}}]})
            } else {
                let text = format!("stub-reply:{}", last_user_text(&body));
                json!({"choices": [{"message": {"content": text}}]})
            };
            (StatusCode::OK, Json(payload))
        }
    };
    state.in_flight.fetch_sub(1, Ordering::SeqCst);
    response
}
