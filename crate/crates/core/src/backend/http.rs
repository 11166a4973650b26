//! OpenAI-compatible chat-completion client.
//!
//! POSTs `{base_url}/v1/chat/completions` and reads
//! `choices[0].message.content`. A non-standard top-level `saliency` object
//! (`{"tokens": [...], "scores": [...]}`) is passed through when a server
//! supplies one.

use std::sync::Arc;
use std::time::{Duration, Instant};

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;

use super::{Backend, BackendError, Completion, CompletionRequest};
use crate::domain::TokenSaliency;

fn default_max_tokens() -> u32 {
    512
}
fn default_timeout() -> f64 {
    60.0
}
fn default_retries() -> u32 {
    2
}
fn default_in_flight() -> usize {
    4
}
fn default_backoff() -> u64 {
    250
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HttpSpec {
    pub base_url: String,
    pub model: String,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    /// Additional attempts after the first failure.
    #[serde(default = "default_retries")]
    pub retries: u32,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_backoff")]
    pub retry_backoff_ms: u64,
    /// Environment variable holding a bearer token, if the server needs one.
    #[serde(default)]
    pub api_key_env: Option<String>,
}

impl HttpSpec {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model: model.into(),
            temperature: 0.0,
            max_tokens: default_max_tokens(),
            timeout_secs: default_timeout(),
            retries: default_retries(),
            max_in_flight: default_in_flight(),
            retry_backoff_ms: default_backoff(),
            api_key_env: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

/// Request body; field order is the wire order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl ChatRequest {
    pub fn user(spec: &HttpSpec, prompt: &str) -> Self {
        Self {
            model: spec.model.clone(),
            messages: vec![ChatMessage { role: "user".into(), content: prompt.into() }],
            temperature: spec.temperature,
            max_tokens: spec.max_tokens,
        }
    }
}

/// Pulls `choices[0].message.content` and optional saliency from a response body.
pub(crate) fn parse_response(body: &str) -> Result<(String, Option<TokenSaliency>), BackendError> {
    let value: serde_json::Value =
        serde_json::from_str(body).map_err(|e| BackendError::MalformedResponse(e.to_string()))?;
    let content = value
        .pointer("/choices/0/message/content")
        .and_then(|c| c.as_str())
        .ok_or_else(|| BackendError::MalformedResponse("missing choices[0].message.content".into()))?
        .to_string();
    let saliency = match value.get("saliency") {
        Some(s) => Some(
            serde_json::from_value::<TokenSaliency>(s.clone())
                .map_err(|e| BackendError::MalformedResponse(format!("saliency: {e}")))?,
        ),
        None => None,
    };
    Ok((content, saliency))
}

pub struct HttpBackend {
    id: String,
    spec: HttpSpec,
    url: String,
    client: reqwest::Client,
    api_key: Option<String>,
    permits: Arc<Semaphore>,
}

impl HttpBackend {
    pub fn new(spec: HttpSpec) -> Result<Self, BackendError> {
        if spec.max_in_flight == 0 {
            return Err(BackendError::Config("max_in_flight must be at least 1".into()));
        }
        if spec.timeout_secs.is_nan() || spec.timeout_secs <= 0.0 {
            return Err(BackendError::Config("timeout_secs must be positive".into()));
        }
        let api_key = match &spec.api_key_env {
            Some(var) => Some(
                std::env::var(var).map_err(|_| BackendError::Config(format!("environment variable {var} is not set")))?,
            ),
            None => None,
        };
        let client = reqwest::Client::builder()
            .timeout(Duration::from_secs_f64(spec.timeout_secs))
            .build()
            .map_err(|e| BackendError::Config(e.to_string()))?;
        Ok(Self {
            id: format!("http:{}", spec.model),
            url: format!("{}/v1/chat/completions", spec.base_url.trim_end_matches('/')),
            permits: Arc::new(Semaphore::new(spec.max_in_flight)),
            spec,
            client,
            api_key,
        })
    }

    pub fn spec(&self) -> &HttpSpec {
        &self.spec
    }

    async fn attempt(&self, body: &ChatRequest) -> Result<(String, Option<TokenSaliency>), BackendError> {
        let mut req = self.client.post(&self.url).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().await.map_err(classify)?;
        let status = resp.status();
        let text = resp.text().await.map_err(classify)?;
        if !status.is_success() {
            return Err(BackendError::HttpStatus { code: status.as_u16(), body: text });
        }
        parse_response(&text)
    }
}

fn classify(e: reqwest::Error) -> BackendError {
    if e.is_timeout() {
        BackendError::Timeout { attempts: 1 }
    } else {
        BackendError::Transport(e.to_string())
    }
}

fn retryable(e: &BackendError) -> bool {
    match e {
        BackendError::Timeout { .. } | BackendError::Transport(_) => true,
        BackendError::HttpStatus { code, .. } => *code == 429 || *code >= 500,
        _ => false,
    }
}

#[async_trait]
impl Backend for HttpBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn deterministic(&self) -> bool {
        false
    }

    async fn complete(&self, request: &CompletionRequest) -> Result<Completion, BackendError> {
        let _permit = self
            .permits
            .acquire()
            .await
            .map_err(|_| BackendError::Config("backend shut down".into()))?;
        let body = ChatRequest::user(&self.spec, &request.prompt);
        let start = Instant::now();
        let max_attempts = self.spec.retries + 1;
        let mut attempt = 0;
        loop {
            attempt += 1;
            match self.attempt(&body).await {
                Ok((text, saliency)) => {
                    return Ok(Completion {
                        text,
                        latency_seconds: start.elapsed().as_secs_f64(),
                        backend_id: self.id.clone(),
                        saliency,
                    })
                }
                Err(e) if attempt < max_attempts && retryable(&e) => {
                    tracing::warn!(attempt, error = %e, "chat completion failed, retrying");
                    let backoff = self.spec.retry_backoff_ms.saturating_mul(1 << (attempt - 1).min(6));
                    tokio::time::sleep(Duration::from_millis(backoff)).await;
                }
                Err(BackendError::Timeout { .. }) => return Err(BackendError::Timeout { attempts: attempt }),
                Err(e) => return Err(e),
            }
        }
    }
}
