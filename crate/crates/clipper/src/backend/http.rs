//! Chat-completion client for OpenAI-compatible inference servers.
//!
//! Requests POST to `{base_url}/chat/completions` with greedy decoding
//! (temperature 0). Transport failures and HTTP 429/5xx are retried with
//! exponential backoff; any other non-2xx status is terminal. The remote
//! server may not honor the greedy-determinism contract, so replayability
//! comes from the inference cache, not from this client.

use std::time::Duration;

use async_trait::async_trait;
use serde::Deserialize;
use serde_json::json;

use super::prompt::{
    render_logprobs, render_one_shot, render_text, render_zero_shot, Message,
};
use super::{
    BackendError, BackendResult, InferenceRequest, InferenceResponse, LogprobResult,
    ModelBackend, PromptTemplates,
};

pub const DEFAULT_MAX_ATTEMPTS: u32 = 3;

#[derive(Debug, Clone)]
pub struct HttpConfig {
    pub base_url: String,
    pub model: String,
    /// Bearer token, already resolved from the configured environment variable.
    pub api_key: Option<String>,
    pub timeout_s: u64,
    /// First backoff delay; doubles per retry.
    pub retry_base_ms: u64,
    pub max_attempts: u32,
    pub supports_logprobs: bool,
    pub templates: PromptTemplates,
}

impl HttpConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        HttpConfig {
            base_url: base_url.into(),
            model: model.into(),
            api_key: None,
            timeout_s: 60,
            retry_base_ms: 1000,
            max_attempts: DEFAULT_MAX_ATTEMPTS,
            supports_logprobs: false,
            templates: PromptTemplates::default(),
        }
    }
}

pub struct HttpBackend {
    cfg: HttpConfig,
    client: reqwest::Client,
    url: String,
}

impl HttpBackend {
    pub fn new(cfg: HttpConfig) -> BackendResult<Self> {
        let client = reqwest::Client::builder()
            .timeout(Duration::from_secs(cfg.timeout_s))
            .build()
            .map_err(|e| BackendError::Unsupported(format!("http client: {e}")))?;
        let url = format!("{}/chat/completions", cfg.base_url.trim_end_matches('/'));
        Ok(HttpBackend { cfg, client, url })
    }

    fn render(&self, request: &InferenceRequest) -> (Vec<Message>, u32, bool) {
        match request {
            InferenceRequest::ZeroShot(req) => {
                (render_zero_shot(req), req.decoding.max_new_tokens, false)
            }
            InferenceRequest::OneShot(req) => (
                render_one_shot(req, self.cfg.templates.icl_layout),
                req.decoding.max_new_tokens,
                false,
            ),
            // The label rides along as a completed assistant turn; the server
            // scores its tokens rather than generating.
            InferenceRequest::Logprobs(req) => (render_logprobs(req), 1, true),
            InferenceRequest::Text(req) => {
                (render_text(req), req.decoding.max_new_tokens, false)
            }
        }
    }

    async fn post_once(&self, body: &serde_json::Value) -> Result<reqwest::Response, reqwest::Error> {
        let mut builder = self.client.post(&self.url).json(body);
        if let Some(key) = &self.cfg.api_key {
            builder = builder.bearer_auth(key);
        }
        builder.send().await
    }
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
    #[serde(default)]
    logprobs: Option<WireLogprobs>,
}

#[derive(Deserialize)]
struct WireMessage {
    #[serde(default)]
    content: Option<serde_json::Value>,
}

#[derive(Deserialize)]
struct WireLogprobs {
    #[serde(default)]
    content: Vec<WireTokenLogprob>,
}

#[derive(Deserialize)]
struct WireTokenLogprob {
    token: String,
    logprob: f64,
}

/// Content arrives either as a plain string or as a list of text parts.
fn content_text(content: Option<serde_json::Value>) -> String {
    match content {
        Some(serde_json::Value::String(s)) => s,
        Some(serde_json::Value::Array(parts)) => parts
            .into_iter()
            .filter_map(|p| {
                p.get("text")
                    .and_then(|t| t.as_str())
                    .map(|s| s.to_string())
            })
            .collect::<Vec<_>>()
            .join(""),
        _ => String::new(),
    }
}

fn excerpt(body: &str) -> String {
    body.chars().take(200).collect()
}

#[async_trait]
impl ModelBackend for HttpBackend {
    fn name(&self) -> &str {
        &self.cfg.model
    }

    fn supports_logprobs(&self) -> bool {
        self.cfg.supports_logprobs
    }

    async fn execute(&self, request: &InferenceRequest) -> BackendResult<InferenceResponse> {
        let (messages, max_tokens, want_logprobs) = self.render(request);
        let mut body = json!({
            "model": self.cfg.model,
            "messages": messages,
            "temperature": 0,
            "max_tokens": max_tokens,
        });
        if want_logprobs {
            body["logprobs"] = json!(true);
        }

        let mut attempt = 0u32;
        let text = loop {
            attempt += 1;
            match self.post_once(&body).await {
                Err(e) => {
                    if attempt >= self.cfg.max_attempts {
                        return Err(BackendError::Transport {
                            attempts: attempt,
                            message: e.to_string(),
                        });
                    }
                }
                Ok(resp) => {
                    let status = resp.status();
                    let raw = resp.text().await.unwrap_or_default();
                    if status.is_success() {
                        break raw;
                    }
                    let retryable =
                        status.as_u16() == 429 || status.is_server_error();
                    if !retryable {
                        return Err(BackendError::Protocol {
                            status: status.as_u16(),
                            body_excerpt: excerpt(&raw),
                        });
                    }
                    if attempt >= self.cfg.max_attempts {
                        return Err(BackendError::Protocol {
                            status: status.as_u16(),
                            body_excerpt: format!(
                                "still failing after {attempt} attempts: {}",
                                excerpt(&raw)
                            ),
                        });
                    }
                }
            }
            let backoff = self.cfg.retry_base_ms.saturating_mul(1 << (attempt - 1));
            tokio::time::sleep(Duration::from_millis(backoff)).await;
        };

        let wire: WireResponse = serde_json::from_str(&text)
            .map_err(|e| BackendError::MalformedResponse(format!("{e}: {}", excerpt(&text))))?;
        let choice = wire
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| BackendError::MalformedResponse("no choices in response".into()))?;

        if want_logprobs {
            let lp = choice.logprobs.ok_or_else(|| {
                BackendError::MalformedResponse("logprobs requested but absent".into())
            })?;
            if lp.content.is_empty() {
                return Ok(InferenceResponse::Logprobs(LogprobResult {
                    tokens: vec![],
                    token_logprobs: vec![],
                }));
            }
            let (tokens, token_logprobs) = lp
                .content
                .into_iter()
                .map(|t| (t.token, t.logprob))
                .unzip();
            Ok(InferenceResponse::Logprobs(LogprobResult {
                tokens,
                token_logprobs,
            }))
        } else {
            Ok(InferenceResponse::Text {
                text: content_text(choice.message.content),
            })
        }
    }
}
