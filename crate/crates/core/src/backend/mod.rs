//! Language-model completion backends.
//!
//! Three implementations share the [`Backend`] trait: a scripted replay
//! backend keyed by prompt digest, a keyword-rule heuristic mock, and an
//! OpenAI-compatible HTTP client. The two mocks are fully deterministic.

mod heuristic;
mod http;
mod parse;
mod scripted;
mod template;

use std::path::{Path, PathBuf};
use std::sync::Arc;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::domain::{EsiLevel, TokenSaliency};

pub use heuristic::{HeuristicBackend, HeuristicRule, RuleTable};
pub use http::{ChatMessage, ChatRequest, HttpBackend, HttpSpec};
pub use parse::{parse_esi, ParseFailure};
pub use scripted::{ScriptedBackend, ScriptedEntry};
pub use template::{render_prompt, PromptPack, PromptTemplate, TemplateError, TemplateId};

/// Appended to a prompt when the first answer held no parseable level.
pub const RETRY_INSTRUCTION: &str = "Answer with a single digit 1-5.";

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("no scripted response for prompt digest {0}")]
    FixtureMiss(String),
    #[error("request timed out after {attempts} attempt(s)")]
    Timeout { attempts: u32 },
    #[error("HTTP status {code}: {body}")]
    HttpStatus { code: u16, body: String },
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("backend configuration: {0}")]
    Config(String),
}

impl BackendError {
    pub fn is_timeout(&self) -> bool {
        matches!(self, BackendError::Timeout { .. })
    }
}

/// One call to a backend. `case_text` is the clinical content bound into the
/// prompt; only the heuristic mock reads it, to keep its keyword rules away
/// from instruction text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompletionRequest {
    pub task: TemplateId,
    pub prompt: String,
    pub case_text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    pub latency_seconds: f64,
    pub backend_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub saliency: Option<TokenSaliency>,
}

#[async_trait]
pub trait Backend: Send + Sync {
    fn id(&self) -> &str;

    /// Whether identical requests always yield identical text.
    fn deterministic(&self) -> bool;

    async fn complete(&self, request: &CompletionRequest) -> Result<Completion, BackendError>;
}

/// Hex SHA-256 of the exact prompt text.
pub fn prompt_digest(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackendSpec {
    Scripted {
        fixture: PathBuf,
    },
    Heuristic {
        #[serde(default)]
        rules: Option<PathBuf>,
        #[serde(default)]
        seed: u64,
    },
    Http(HttpSpec),
}

impl BackendSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            BackendSpec::Scripted { .. } => "scripted",
            BackendSpec::Heuristic { .. } => "heuristic",
            BackendSpec::Http(_) => "http",
        }
    }

    /// Resolves relative file paths against `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        match self {
            BackendSpec::Scripted { fixture } => {
                if fixture.is_relative() {
                    *fixture = base.join(&*fixture);
                }
            }
            BackendSpec::Heuristic { rules: Some(rules), .. }
                if rules.is_relative() => {
                    *rules = base.join(&*rules);
                }
            _ => {}
        }
    }

    /// Files this backend reads, for existence checks.
    pub fn referenced_files(&self) -> Vec<&Path> {
        match self {
            BackendSpec::Scripted { fixture } => vec![fixture.as_path()],
            BackendSpec::Heuristic { rules: Some(r), .. } => vec![r.as_path()],
            _ => Vec::new(),
        }
    }

    pub fn deterministic(&self) -> bool {
        !matches!(self, BackendSpec::Http(_))
    }
}

pub fn build_backend(spec: &BackendSpec) -> Result<Arc<dyn Backend>, BackendError> {
    Ok(match spec {
        BackendSpec::Scripted { fixture } => Arc::new(ScriptedBackend::load(fixture)?),
        BackendSpec::Heuristic { rules, seed } => {
            let table = match rules {
                Some(path) => RuleTable::load(path)?,
                None => RuleTable::builtin(),
            };
            Arc::new(HeuristicBackend::new(table, *seed))
        }
        BackendSpec::Http(http) => Arc::new(HttpBackend::new(http.clone())?),
    })
}

/// Result of asking for an ESI level with one bounded re-ask.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelAnswer {
    pub level: Option<EsiLevel>,
    /// Text of the last completion.
    pub text: String,
    pub latency_seconds: f64,
    pub attempts: u32,
    pub saliency: Option<TokenSaliency>,
}

/// Sends `request`; if the answer has no parseable level, re-asks once with
/// [`RETRY_INSTRUCTION`] appended. Never fabricates a level.
pub async fn ask_for_level(backend: &dyn Backend, request: CompletionRequest) -> Result<LevelAnswer, BackendError> {
    let first = backend.complete(&request).await?;
    if let Ok(level) = parse_esi(&first.text) {
        return Ok(LevelAnswer {
            level: Some(level),
            text: first.text,
            latency_seconds: first.latency_seconds,
            attempts: 1,
            saliency: first.saliency,
        });
    }
    let retry = CompletionRequest {
        prompt: format!("{}\n\n{}", request.prompt.trim_end(), RETRY_INSTRUCTION),
        ..request
    };
    let second = backend.complete(&retry).await?;
    Ok(LevelAnswer {
        level: parse_esi(&second.text).ok(),
        text: second.text,
        latency_seconds: first.latency_seconds + second.latency_seconds,
        attempts: 2,
        saliency: second.saliency,
    })
}
