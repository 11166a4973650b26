//! HTTP API for single-encounter predictions and what-if ablation sweeps.
//!
//! Routes: `POST /v1/predict`, `POST /v1/whatif`, `GET /v1/pipelines`,
//! `GET /v1/health`. Request bodies are JSON; any body that does not match
//! the schema is a 400. Patient text is never logged.

mod config;

pub use config::{RagSettings, ServerConfig, ServerConfigError};

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use bytes::Bytes;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use triage_core::backend::{Backend, PromptPack};
use triage_core::domain::{EsiLevel, TriageEncounter};
use triage_core::ensemble::{EnsembleError, EnsembleOptions};
use triage_core::pipelines::{
    run_with_strategy, Ablation, PipelineContext, PipelineError, PipelineKind, PredictionRecord, Strategy,
};
use triage_core::rag::LexicalIndex;

pub const API_VERSION: &str = "triage-api/1";

/// Read-only state shared by every request.
pub struct AppState {
    pub backends: BTreeMap<String, Arc<dyn Backend>>,
    pub default_backend: Option<String>,
    pub prompts: Arc<PromptPack>,
    pub index: Option<Arc<LexicalIndex>>,
    pub default_k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncounterInput {
    #[serde(default = "default_id")]
    pub id: String,
    pub age_months: u32,
    #[serde(default)]
    pub chief_complaint: String,
    #[serde(default)]
    pub vital_signs: String,
    #[serde(default)]
    pub physical_exam: String,
    #[serde(default)]
    pub pivot_assessment: Option<String>,
    #[serde(default)]
    pub pmh: String,
    #[serde(default)]
    pub triage_note: String,
    #[serde(default)]
    pub nurse_esi: Option<EsiLevel>,
}

fn default_id() -> String {
    "request".to_string()
}

impl From<EncounterInput> for TriageEncounter {
    fn from(e: EncounterInput) -> Self {
        TriageEncounter {
            id: e.id,
            age_months: e.age_months,
            chief_complaint: e.chief_complaint,
            vital_signs: e.vital_signs,
            physical_exam: e.physical_exam,
            pivot_assessment: e.pivot_assessment.filter(|p| !p.trim().is_empty()),
            pmh: e.pmh,
            triage_note: e.triage_note,
            nurse_esi: e.nurse_esi,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RagRequest {
    #[serde(default)]
    pub k: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictRequest {
    pub encounter: EncounterInput,
    pub pipeline: PipelineKind,
    #[serde(default)]
    pub ablation: Ablation,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ensemble: Option<EnsembleOptions>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rag: Option<RagRequest>,
    /// Named backend; the server default when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backend: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WhatIfRequest {
    pub encounter: EncounterInput,
    pub pipeline: PipelineKind,
    pub ablations: Vec<Ablation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ensemble: Option<EnsembleOptions>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rag: Option<RagRequest>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backend: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictResponse {
    pub api_version: String,
    pub backend: String,
    pub strategy: String,
    #[serde(flatten)]
    pub record: PredictionRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorDetail {
    pub status: u16,
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WhatIfEntry {
    pub ablation: Ablation,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<PredictResponse>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ErrorDetail>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WhatIfResponse {
    pub api_version: String,
    pub results: Vec<WhatIfEntry>,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self { status, code, message: message.into() }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "invalid_request", message)
    }

    fn unprocessable(code: &'static str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, code, message)
    }

    fn detail(&self) -> ErrorDetail {
        ErrorDetail { status: self.status.as_u16(), code: self.code.to_string(), message: self.message.clone() }
    }
}

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        if let Some(b) = e.backend_error() {
            return if b.is_timeout() {
                ApiError::new(StatusCode::GATEWAY_TIMEOUT, "backend_timeout", e.to_string())
            } else {
                ApiError::new(StatusCode::BAD_GATEWAY, "backend_error", e.to_string())
            };
        }
        match &e {
            PipelineError::MissingField { .. } | PipelineError::NoVignetteSource => {
                ApiError::unprocessable("precondition_failed", e.to_string())
            }
            PipelineError::EnsembleNeedsVignette(_) | PipelineError::Ensemble(EnsembleError::InvalidOptions(_)) => {
                ApiError::unprocessable("strategy_conflict", e.to_string())
            }
            PipelineError::EmptyVignette | PipelineError::Ensemble(EnsembleError::RoundFailure) => {
                ApiError::new(StatusCode::BAD_GATEWAY, "backend_error", e.to_string())
            }
            _ => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = serde_json::json!({ "error": self.detail() });
        (self.status, Json(body)).into_response()
    }
}

fn parse_body<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(e.to_string()))
}

/// Everything a request resolves to before any backend call.
struct Plan {
    backend_name: String,
    ctx: PipelineContext,
    strategy: Strategy,
}

fn plan(
    state: &AppState,
    backend: Option<&str>,
    ensemble: Option<EnsembleOptions>,
    rag: Option<RagRequest>,
) -> Result<Plan, ApiError> {
    let name = backend
        .map(str::to_string)
        .or_else(|| state.default_backend.clone())
        .ok_or_else(|| ApiError::bad_request("no backend named and no default configured"))?;
    let backend = state
        .backends
        .get(&name)
        .cloned()
        .ok_or_else(|| ApiError::bad_request(format!("unknown backend '{name}'")))?;
    let strategy = match (ensemble, rag) {
        (Some(_), Some(_)) => {
            return Err(ApiError::unprocessable("strategy_conflict", "ensemble and rag cannot be combined"))
        }
        (Some(opts), None) => {
            opts.validate().map_err(|e| ApiError::unprocessable("strategy_conflict", e.to_string()))?;
            Strategy::Ensemble(opts)
        }
        (None, Some(r)) => {
            let index = state
                .index
                .clone()
                .ok_or_else(|| ApiError::unprocessable("strategy_conflict", "no retrieval corpus is configured"))?;
            let k = r.k.unwrap_or(state.default_k);
            if k == 0 {
                return Err(ApiError::unprocessable("strategy_conflict", "rag.k must be at least 1"));
            }
            Strategy::Rag { index, k }
        }
        (None, None) => Strategy::Plain,
    };
    Ok(Plan { backend_name: name, ctx: PipelineContext::new(backend, state.prompts.clone()), strategy })
}

async fn predict_one(
    plan: &Plan,
    kind: PipelineKind,
    encounter: &TriageEncounter,
    ablation: Ablation,
) -> Result<PredictResponse, ApiError> {
    let record = run_with_strategy(&plan.ctx, kind, encounter, ablation, &plan.strategy).await?;
    Ok(PredictResponse {
        api_version: API_VERSION.to_string(),
        backend: plan.backend_name.clone(),
        strategy: plan.strategy.name().to_string(),
        record,
    })
}

async fn handle_predict(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Json<PredictResponse>, ApiError> {
    let start = Instant::now();
    let req: PredictRequest = parse_body(&body)?;
    let result = async {
        let plan = plan(&state, req.backend.as_deref(), req.ensemble, req.rag)?;
        let encounter = TriageEncounter::from(req.encounter);
        predict_one(&plan, req.pipeline, &encounter, req.ablation).await
    }
    .await;
    let status = result.as_ref().map(|_| 200).unwrap_or_else(|e| e.status.as_u16());
    tracing::info!(
        route = "predict",
        pipeline = %req.pipeline,
        ablation = %req.ablation,
        status,
        elapsed_ms = start.elapsed().as_millis() as u64,
        "request served"
    );
    result.map(Json)
}

async fn handle_whatif(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Json<WhatIfResponse>, ApiError> {
    let start = Instant::now();
    let req: WhatIfRequest = parse_body(&body)?;
    if req.ablations.is_empty() {
        return Err(ApiError::bad_request("ablations must list at least one entry"));
    }
    let plan = plan(&state, req.backend.as_deref(), req.ensemble, req.rag)?;
    let encounter = TriageEncounter::from(req.encounter);
    let runs = req.ablations.iter().map(|&a| {
        let (plan, encounter) = (&plan, &encounter);
        async move {
            match predict_one(plan, req.pipeline, encounter, a).await {
                Ok(r) => WhatIfEntry { ablation: a, response: Some(r), error: None },
                Err(e) => WhatIfEntry { ablation: a, response: None, error: Some(e.detail()) },
            }
        }
    });
    let results = futures::future::join_all(runs).await;
    tracing::info!(
        route = "whatif",
        pipeline = %req.pipeline,
        entries = results.len(),
        failed = results.iter().filter(|r| r.error.is_some()).count(),
        elapsed_ms = start.elapsed().as_millis() as u64,
        "request served"
    );
    Ok(Json(WhatIfResponse { api_version: API_VERSION.to_string(), results }))
}

#[derive(Serialize)]
struct PipelineInfo {
    kind: PipelineKind,
    stages: Vec<String>,
    required_fields: &'static [&'static str],
    supports_ensemble: bool,
}

async fn handle_pipelines(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    let pipelines: Vec<PipelineInfo> = PipelineKind::ALL
        .iter()
        .map(|&kind| PipelineInfo {
            kind,
            stages: kind.stages().iter().map(|s| s.to_string()).collect(),
            required_fields: kind.required_fields(),
            supports_ensemble: kind.produces_vignette(),
        })
        .collect();
    Json(serde_json::json!({
        "api_version": API_VERSION,
        "pipelines": pipelines,
        "ablations": Ablation::ALL,
        "strategies": ["plain", "ensemble", "rag"],
        "rag_available": state.index.is_some(),
        "backends": state.backends.keys().collect::<Vec<_>>(),
        "default_backend": state.default_backend,
        "prompt_pack_version": state.prompts.version(),
    }))
}

async fn handle_health() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok", "api_version": API_VERSION, "version": env!("CARGO_PKG_VERSION") }))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/v1/predict", post(handle_predict))
        .route("/v1/whatif", post(handle_whatif))
        .route("/v1/pipelines", get(handle_pipelines))
        .route("/v1/health", get(handle_health))
        .with_state(state)
}

/// The API router, plus static files for any other path when configured.
pub fn app(state: Arc<AppState>, static_dir: Option<&std::path::Path>) -> Router {
    let api = router(state);
    match static_dir {
        Some(dir) => api.fallback_service(tower_http::services::ServeDir::new(dir)),
        None => api,
    }
}
