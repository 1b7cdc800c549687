//! Uniform interface to the target model: zero-shot completion, one-shot
//! ICL completion, and label log-probabilities, plus the bounded-concurrency
//! batch scheduler and the append-only inference cache that makes runs
//! resumable and replayable.

mod batch;
mod cache;
pub mod http;
pub mod mock;
pub mod prompt;

pub use batch::{run_batch, BatchOutcome, BatchSummary};
pub use cache::{CachedValue, InferenceCache};
pub use http::HttpBackend;
pub use prompt::{IclLayout, Message, MessagePart, PromptTemplates};

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::Sample;

#[derive(Debug, Error)]
pub enum BackendError {
    /// Transport-level failure that survived the retry budget.
    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },

    /// Non-retryable protocol error (HTTP status outside 2xx/429/5xx, or a
    /// response body the client cannot interpret).
    #[error("protocol error (status {status}): {body_excerpt}")]
    Protocol { status: u16, body_excerpt: String },

    #[error("malformed response: {0}")]
    MalformedResponse(String),

    /// Capability mismatch, e.g. logprobs requested from a backend without
    /// logprob support.
    #[error("backend configuration error: {0}")]
    Unsupported(String),
}

impl BackendError {
    /// Terminal errors must not be retried; transport errors already carry
    /// their retry history and are terminal by the time they surface.
    pub fn is_terminal(&self) -> bool {
        true
    }
}

pub type BackendResult<T> = Result<T, BackendError>;

/// Greedy decoding parameters. Temperature is fixed at 0 by construction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decoding {
    pub max_new_tokens: u32,
}

impl Default for Decoding {
    fn default() -> Self {
        Decoding {
            max_new_tokens: 256,
        }
    }
}

/// Zero-shot completion over one sample's (image, query).
#[derive(Debug, Clone, Serialize)]
pub struct ZeroShotRequest {
    pub sample: Sample,
    pub system_prompt: String,
    pub decoding: Decoding,
}

/// One-shot ICL completion: a completed demonstration exchange followed by
/// the query sample's (image, query). Only the query's image and text are
/// used; its label is never sent.
#[derive(Debug, Clone, Serialize)]
pub struct IclRequest {
    pub demonstration: Sample,
    pub query_sample: Sample,
    pub system_prompt: String,
    pub decoding: Decoding,
}

/// Per-token log-probabilities of the sample's label conditioned on
/// (image, query).
#[derive(Debug, Clone, Serialize)]
pub struct LogprobRequest {
    pub sample: Sample,
    pub system_prompt: String,
}

/// Text-only completion, used by the LLM judge.
#[derive(Debug, Clone, Serialize)]
pub struct TextRequest {
    pub system_prompt: String,
    pub user_prompt: String,
    pub decoding: Decoding,
}

/// Any request the batch scheduler can dispatch.
#[derive(Debug, Clone, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InferenceRequest {
    ZeroShot(ZeroShotRequest),
    OneShot(IclRequest),
    Logprobs(LogprobRequest),
    Text(TextRequest),
}

/// Natural-log per-token probabilities of the label tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogprobResult {
    pub tokens: Vec<String>,
    pub token_logprobs: Vec<f64>,
}

/// A completed inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InferenceResponse {
    Text { text: String },
    Logprobs(LogprobResult),
}

impl InferenceResponse {
    pub fn as_text(&self) -> Option<&str> {
        match self {
            InferenceResponse::Text { text } => Some(text),
            InferenceResponse::Logprobs(_) => None,
        }
    }

    pub fn as_logprobs(&self) -> Option<&LogprobResult> {
        match self {
            InferenceResponse::Logprobs(lp) => Some(lp),
            InferenceResponse::Text { .. } => None,
        }
    }
}

/// Abstraction over the target model.
///
/// Determinism contract: given identical inputs and greedy decoding, repeated
/// calls return identical text. Mock backends satisfy it by construction; the
/// HTTP implementation cannot force a remote server to honor it, so the
/// inference cache is what restores replay determinism across runs.
///
/// Implementations must be safely callable from multiple concurrent workers.
#[async_trait]
pub trait ModelBackend: Send + Sync {
    /// Backend identity, mixed into every request digest.
    fn name(&self) -> &str;

    fn supports_logprobs(&self) -> bool;

    async fn execute(&self, request: &InferenceRequest) -> BackendResult<InferenceResponse>;
}

/// Model answer to (image, query) with no demonstration in context.
pub async fn complete_zero_shot(
    backend: &dyn ModelBackend,
    request: &ZeroShotRequest,
) -> BackendResult<String> {
    let resp = backend
        .execute(&InferenceRequest::ZeroShot(request.clone()))
        .await?;
    resp.as_text()
        .map(String::from)
        .ok_or_else(|| BackendError::MalformedResponse("expected text response".into()))
}

/// Model answer to the query given one completed demonstration exchange.
pub async fn complete_one_shot(
    backend: &dyn ModelBackend,
    request: &IclRequest,
) -> BackendResult<String> {
    assert_ne!(
        request.demonstration.id, request.query_sample.id,
        "demonstration and query must be distinct samples"
    );
    let resp = backend
        .execute(&InferenceRequest::OneShot(request.clone()))
        .await?;
    resp.as_text()
        .map(String::from)
        .ok_or_else(|| BackendError::MalformedResponse("expected text response".into()))
}

/// Per-token label log-probabilities for one sample.
pub async fn label_logprobs(
    backend: &dyn ModelBackend,
    sample: &Sample,
    system_prompt: &str,
) -> BackendResult<LogprobResult> {
    if !backend.supports_logprobs() {
        return Err(BackendError::Unsupported(format!(
            "backend {:?} does not support logprobs",
            backend.name()
        )));
    }
    let resp = backend
        .execute(&InferenceRequest::Logprobs(LogprobRequest {
            sample: sample.clone(),
            system_prompt: system_prompt.to_string(),
        }))
        .await?;
    resp.as_logprobs()
        .cloned()
        .ok_or_else(|| BackendError::MalformedResponse("expected logprobs response".into()))
}

/// Stable digest for a request: SHA-256 over canonical JSON of the backend
/// name, the full request payload, and the prompt template texts. Rendering
/// templates into the digest means a template change invalidates the cache.
pub fn request_digest(
    backend_name: &str,
    templates: &PromptTemplates,
    request: &InferenceRequest,
) -> String {
    let payload = serde_json::json!({
        "backend": backend_name,
        "templates": templates,
        "request": request,
    });
    // serde_json::Value maps are sorted, so this string form is canonical.
    let canonical = serde_json::to_string(&payload).expect("request serializes");
    let mut hasher = Sha256::new();
    hasher.update(canonical.as_bytes());
    hex::encode(hasher.finalize())
}
