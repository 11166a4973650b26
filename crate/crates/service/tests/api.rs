use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;
use triage_core::backend::{Backend, HeuristicBackend, HttpBackend, HttpSpec, PromptPack, ScriptedBackend, TemplateId};
use triage_service::{app, router, AppState, ServerConfig};

fn demo_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("demo.toml")
}

fn demo_state() -> Arc<AppState> {
    Arc::new(ServerConfig::load(&demo_config()).unwrap().build_state().unwrap())
}

fn state_with(backends: Vec<(&str, Arc<dyn Backend>)>) -> Arc<AppState> {
    let backends: BTreeMap<String, Arc<dyn Backend>> = backends.into_iter().map(|(n, b)| (n.to_string(), b)).collect();
    Arc::new(AppState {
        default_backend: backends.keys().next().cloned(),
        backends,
        prompts: Arc::new(PromptPack::builtin()),
        index: None,
        default_k: 3,
    })
}

async fn call(app: Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri).header("content-type", "application/json");
    let req = match body {
        Some(b) => req.body(Body::from(b.to_string())).unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap_or(Value::Null) };
    (status, value)
}

async fn raw(app: Router, uri: &str, body: &str) -> StatusCode {
    let req = Request::builder()
        .method("POST")
        .uri(uri)
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap();
    app.oneshot(req).await.unwrap().status()
}

const NOTE: &str = "4-month-old with cough and poor feeding. RR 64, SpO2 91%. Infant is grunting with subcostal retractions.";

fn infant() -> Value {
    json!({
        "id": "demo-1",
        "age_months": 4,
        "chief_complaint": "difficulty breathing",
        "vital_signs": "HR 172, RR 64, SpO2 91%",
        "physical_exam": "grunting, subcostal retractions",
        "pmh": "born at 36 weeks",
        "triage_note": NOTE
    })
}

fn vomiting() -> Value {
    json!({
        "age_months": 36,
        "chief_complaint": "vomiting",
        "vital_signs": "HR 130, T 38.1",
        "physical_exam": "dry mucous membranes",
        "triage_note": "3-year-old with vomiting and diarrhea since yesterday. HR 130."
    })
}

#[tokio::test]
async fn health_and_pipelines() {
    let (status, body) = call(router(demo_state()), "GET", "/v1/health", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["status"], "ok");
    let (status, body) = call(router(demo_state()), "GET", "/v1/pipelines", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["pipelines"].as_array().unwrap().len(), 6);
    assert_eq!(body["backends"], json!(["heuristic"]));
    assert_eq!(body["rag_available"], true);
    assert_eq!(body["ablations"], json!(["none", "drop_vitals", "drop_exam"]));
}

#[tokio::test]
async fn predict_from_rule_table() {
    let req = json!({"encounter": infant(), "pipeline": "note_to_esi", "backend": "heuristic"});
    let (status, body) = call(router(demo_state()), "POST", "/v1/predict", Some(req)).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(body["predicted"], 2);
    assert_eq!(body["encounter_id"], "demo-1");
    assert_eq!(body["strategy"], "plain");
    assert!(body["nurse_esi"].is_null());
    assert!(body["saliency"]["tokens"].as_array().unwrap().iter().any(|t| t == "grunting"));
    assert!(body["latency_seconds"].as_f64().unwrap() >= 0.0);
}

#[tokio::test]
async fn vignette_pipeline_returns_intermediates() {
    let req = json!({"encounter": infant(), "pipeline": "model_structured_to_vignette_to_esi"});
    let (status, body) = call(router(demo_state()), "POST", "/v1/predict", Some(req)).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(body["intermediates"]["structured"]["source"], "model");
    assert!(body["intermediates"]["vignette"]["text"].as_str().unwrap().contains("grunting"));
}

#[tokio::test]
async fn schema_violations_are_400() {
    let app = router(demo_state());
    assert_eq!(raw(app.clone(), "/v1/predict", "{not json").await, StatusCode::BAD_REQUEST);
    assert_eq!(raw(app.clone(), "/v1/predict", r#"{"pipeline":"note_to_esi"}"#).await, StatusCode::BAD_REQUEST);
    let unknown_kind = json!({"encounter": infant(), "pipeline": "note_to_magic"});
    assert_eq!(call(app.clone(), "POST", "/v1/predict", Some(unknown_kind)).await.0, StatusCode::BAD_REQUEST);
    let extra = json!({"encounter": infant(), "pipeline": "note_to_esi", "temperature": 1});
    assert_eq!(call(app.clone(), "POST", "/v1/predict", Some(extra)).await.0, StatusCode::BAD_REQUEST);
    let mut bad_label = infant();
    bad_label["nurse_esi"] = json!(7);
    let req = json!({"encounter": bad_label, "pipeline": "note_to_esi"});
    assert_eq!(call(app.clone(), "POST", "/v1/predict", Some(req)).await.0, StatusCode::BAD_REQUEST);
    let req = json!({"encounter": infant(), "pipeline": "note_to_esi", "backend": "gpt-9"});
    let (status, body) = call(app, "POST", "/v1/predict", Some(req)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(body["error"]["code"], "invalid_request");
}

#[tokio::test]
async fn strategy_conflicts_are_422() {
    let app = router(demo_state());
    let both = json!({
        "encounter": infant(), "pipeline": "note_to_vignette_to_esi",
        "ensemble": {"n_agents": 3, "rounds": 1}, "rag": {"k": 2}
    });
    let (status, body) = call(app.clone(), "POST", "/v1/predict", Some(both)).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["error"]["code"], "strategy_conflict");
    let no_vignette = json!({"encounter": infant(), "pipeline": "note_to_esi", "ensemble": {"n_agents": 3, "rounds": 1}});
    assert_eq!(call(app.clone(), "POST", "/v1/predict", Some(no_vignette)).await.0, StatusCode::UNPROCESSABLE_ENTITY);
    let bad_opts = json!({"encounter": infant(), "pipeline": "note_to_vignette_to_esi", "ensemble": {"n_agents": 7, "rounds": 1}});
    assert_eq!(call(app.clone(), "POST", "/v1/predict", Some(bad_opts)).await.0, StatusCode::UNPROCESSABLE_ENTITY);
    let mut no_note = infant();
    no_note["triage_note"] = json!("");
    let req = json!({"encounter": no_note, "pipeline": "note_to_esi"});
    let (status, body) = call(app, "POST", "/v1/predict", Some(req)).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["error"]["code"], "precondition_failed");

    let no_corpus = state_with(vec![("h", Arc::new(HeuristicBackend::builtin()))]);
    let req = json!({"encounter": infant(), "pipeline": "note_to_esi", "rag": {}});
    assert_eq!(call(router(no_corpus), "POST", "/v1/predict", Some(req)).await.0, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn ensemble_debate_returns_both_rounds() {
    let req = json!({
        "encounter": vomiting(), "pipeline": "note_to_vignette_to_esi",
        "ensemble": {"n_agents": 4, "rounds": 2}
    });
    let (status, body) = call(router(demo_state()), "POST", "/v1/predict", Some(req)).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    let rounds = body["ensemble"]["rounds"].as_array().unwrap();
    assert_eq!(rounds.len(), 2);
    let first: Vec<i64> = rounds[0].as_array().unwrap().iter().map(|v| v["level"].as_i64().unwrap()).collect();
    assert_eq!(first, vec![2, 3, 3, 2]);
    assert_eq!(rounds[1][0]["persona"], "safety_first");
    assert!(!rounds[1][0]["rationale"].as_str().unwrap().is_empty());
    assert_eq!(body["predicted"], 3);
}

#[tokio::test]
async fn rag_returns_passages() {
    let req = json!({"encounter": infant(), "pipeline": "note_to_esi", "rag": {"k": 2}});
    let (status, body) = call(router(demo_state()), "POST", "/v1/predict", Some(req)).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(body["strategy"], "rag");
    assert_eq!(body["rag"]["passages"].as_array().unwrap().len(), 2);
    assert_eq!(body["rag"]["passages"][0]["passage_id"], 3);
}

#[tokio::test]
async fn whatif_orders_results_and_flips_on_exam() {
    let app = router(demo_state());
    let req = json!({"encounter": infant(), "pipeline": "human_structured_to_esi", "ablations": ["none", "drop_vitals", "drop_exam"]});
    let (status, body) = call(app.clone(), "POST", "/v1/whatif", Some(req)).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    let results = body["results"].as_array().unwrap();
    let order: Vec<&str> = results.iter().map(|r| r["ablation"].as_str().unwrap()).collect();
    assert_eq!(order, vec!["none", "drop_vitals", "drop_exam"]);
    assert_eq!(results[0]["response"]["predicted"], 2);
    assert_eq!(results[1]["response"]["predicted"], 2);
    assert_eq!(results[2]["response"]["predicted"], 4);

    let empty = json!({"encounter": infant(), "pipeline": "note_to_esi", "ablations": []});
    assert_eq!(call(app, "POST", "/v1/whatif", Some(empty)).await.0, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn whatif_entries_fail_independently() {
    let app = router(demo_state());
    let mut encounter = infant();
    encounter["chief_complaint"] = json!("");
    encounter["vital_signs"] = json!("");
    let req = json!({"encounter": encounter, "pipeline": "human_structured_to_vignette_to_esi", "ablations": ["none", "drop_exam"]});
    let (status, body) = call(app, "POST", "/v1/whatif", Some(req)).await;
    assert_eq!(status, StatusCode::OK);
    let results = body["results"].as_array().unwrap();
    assert_eq!(results[0]["error"]["status"], 422);
    assert_eq!(results[1]["error"]["status"], 422);
}

#[tokio::test]
async fn backend_failure_is_502() {
    let state = state_with(vec![("scripted", Arc::new(ScriptedBackend::new(Vec::new())))]);
    let req = json!({"encounter": infant(), "pipeline": "note_to_esi"});
    let (status, body) = call(router(state), "POST", "/v1/predict", Some(req)).await;
    assert_eq!(status, StatusCode::BAD_GATEWAY);
    assert_eq!(body["error"]["code"], "backend_error");
}

#[tokio::test]
async fn backend_timeout_is_504() {
    let slow = Router::new().route(
        "/v1/chat/completions",
        axum::routing::post(|| async {
            tokio::time::sleep(Duration::from_secs(2)).await;
            "{}"
        }),
    );
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, slow).await.unwrap() });
    let mut spec = HttpSpec::new(format!("http://{addr}"), "slow");
    spec.timeout_secs = 0.2;
    spec.retries = 0;
    let state = state_with(vec![("slow", Arc::new(HttpBackend::new(spec).unwrap()))]);
    let req = json!({"encounter": infant(), "pipeline": "note_to_esi"});
    let (status, body) = call(router(state), "POST", "/v1/predict", Some(req)).await;
    assert_eq!(status, StatusCode::GATEWAY_TIMEOUT);
    assert_eq!(body["error"]["code"], "backend_timeout");
}

#[tokio::test]
async fn identical_requests_identical_bodies() {
    let pack = PromptPack::builtin();
    let prompt = pack
        .get(TemplateId::PredictFromNote)
        .render(&[("age", "4 months"), ("note", NOTE)])
        .unwrap();
    let backend = ScriptedBackend::from_pairs([(prompt.as_str(), "ESI: 2\nRationale: grunting infant")]);
    let state = state_with(vec![("scripted", Arc::new(backend))]);
    let req = json!({"encounter": infant(), "pipeline": "note_to_esi"});
    let (s1, mut b1) = call(router(state.clone()), "POST", "/v1/predict", Some(req.clone())).await;
    let (s2, mut b2) = call(router(state), "POST", "/v1/predict", Some(req)).await;
    assert_eq!((s1, s2), (StatusCode::OK, StatusCode::OK));
    b1["latency_seconds"] = json!(0);
    b2["latency_seconds"] = json!(0);
    assert_eq!(b1, b2);
    assert_eq!(b1["predicted"], 2);
}

#[derive(Clone, Default)]
struct LogBuffer(Arc<Mutex<Vec<u8>>>);

impl Write for LogBuffer {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.0.lock().unwrap().extend_from_slice(buf);
        Ok(buf.len())
    }
    fn flush(&mut self) -> std::io::Result<()> {
        Ok(())
    }
}

#[tokio::test]
async fn logs_carry_no_patient_text() {
    let buffer = LogBuffer::default();
    let writer = buffer.clone();
    let subscriber = tracing_subscriber::fmt()
        .with_max_level(tracing::Level::INFO)
        .with_ansi(false)
        .with_writer(move || writer.clone())
        .finish();
    let _guard = tracing::subscriber::set_default(subscriber);

    let app = router(demo_state());
    let req = json!({"encounter": infant(), "pipeline": "note_to_vignette_to_esi"});
    assert_eq!(call(app.clone(), "POST", "/v1/predict", Some(req)).await.0, StatusCode::OK);
    let req = json!({"encounter": infant(), "pipeline": "human_structured_to_esi", "ablations": ["none", "drop_exam"]});
    assert_eq!(call(app.clone(), "POST", "/v1/whatif", Some(req)).await.0, StatusCode::OK);
    let mut bad = infant();
    bad["triage_note"] = json!("");
    let req = json!({"encounter": bad, "pipeline": "note_to_esi"});
    assert_eq!(call(app, "POST", "/v1/predict", Some(req)).await.0, StatusCode::UNPROCESSABLE_ENTITY);

    let logs = String::from_utf8(buffer.0.lock().unwrap().clone()).unwrap();
    assert!(logs.contains("request served"), "{logs}");
    for field in ["grunting", "difficulty breathing", "HR 172", "36 weeks", "poor feeding", "demo-1"] {
        assert!(!logs.contains(field), "log leaked {field:?}: {logs}");
    }
}

#[tokio::test]
async fn static_files_served_beside_api() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("index.html"), "<h1>console</h1>").unwrap();
    let app = app(demo_state(), Some(dir.path()));
    let resp = app
        .clone()
        .oneshot(Request::builder().uri("/index.html").body(Body::empty()).unwrap())
        .await
        .unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    assert_eq!(call(app, "GET", "/v1/health", None).await.0, StatusCode::OK);
}

#[test]
fn server_config_errors() {
    assert!(ServerConfig::from_toml("[backends]\n").unwrap().build_state().is_err());
    let unknown = "default_backend = \"x\"\n[backends.h]\nkind = \"heuristic\"\n";
    assert!(ServerConfig::from_toml(unknown).unwrap().build_state().is_err());
    assert!(ServerConfig::from_toml("port = 1\n[backends.h]\nkind = \"heuristic\"\n").is_err());
}

#[test]
fn schema_lists_request_fields() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("schema/api.schema.json");
    let schema: Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    let defs = &schema["$defs"];
    let keys = |v: &Value| -> Vec<String> {
        let mut k: Vec<String> = v["properties"].as_object().unwrap().keys().cloned().collect();
        k.sort();
        k
    };
    assert_eq!(keys(&defs["PredictRequest"]), ["ablation", "backend", "encounter", "ensemble", "pipeline", "rag"]);
    assert_eq!(keys(&defs["WhatIfRequest"]), ["ablations", "backend", "encounter", "ensemble", "pipeline", "rag"]);
    assert_eq!(
        keys(&defs["Encounter"]),
        ["age_months", "chief_complaint", "id", "nurse_esi", "physical_exam", "pivot_assessment", "pmh", "triage_note", "vital_signs"]
    );
}
