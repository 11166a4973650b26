//! Batch evaluation runs: load a config, predict every encounter with bounded
//! parallelism, persist predictions and a self-describing artifact.

mod compare;
mod config;

pub use compare::{compare_runs, render_comparison, CompareError, EncounterChange, MetricDelta, RunComparison};
pub use config::{ConfigError, DatasetConfig, PipelineConfig, RagConfig, RunConfig, CONFIG_VERSION};

use std::path::{Path, PathBuf};
use std::sync::Arc;

use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backend::{build_backend, BackendError};
use crate::ingest::{curate, load_encounters, Exclusion, IngestError};
use crate::jsonl;
use crate::metrics::{compute_metrics, EvalReport, RunMeta};
use crate::pipelines::{run_with_strategy, PipelineContext, PipelineError, PredictionRecord};

pub const ARTIFACT_FILE: &str = "artifact.json";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const ARTIFACT_SCHEMA_VERSION: &str = "run-artifact/1";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("dataset: {0}")]
    Dataset(#[from] IngestError),
    #[error("encounter {encounter_id}: {source}")]
    Pipeline {
        encounter_id: String,
        #[source]
        source: PipelineError,
    },
    #[error("backend: {0}")]
    Backend(#[from] BackendError),
    #[error("artifact {path}: {message}")]
    Artifact { path: PathBuf, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl HarnessError {
    /// Process exit code: 2 config, 3 data, 4 backend.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Dataset(_) | HarnessError::Artifact { .. } | HarnessError::Io(_) => 3,
            HarnessError::Backend(_) => 4,
            HarnessError::Pipeline { source, .. } => match source {
                PipelineError::MissingField { .. } => 3,
                PipelineError::Template(_) | PipelineError::EnsembleNeedsVignette(_) => 2,
                _ => 4,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum RunStatus {
    Complete,
    /// Aborted by a fatal error; predictions before the failing encounter were kept.
    Partial { failed_encounter: String, error: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunArtifact {
    pub schema_version: String,
    pub status: RunStatus,
    pub config: RunConfig,
    /// Relative to the artifact's directory.
    pub predictions_file: String,
    pub predictions_digest: String,
    pub n_encounters: usize,
    #[serde(default)]
    pub excluded: Vec<Exclusion>,
    pub report: EvalReport,
}

/// SHA-256 over the predictions JSONL with every latency set to zero.
pub fn predictions_digest(records: &[PredictionRecord]) -> String {
    let zeroed: Vec<PredictionRecord> = records
        .iter()
        .cloned()
        .map(|mut r| {
            r.latency_seconds = 0.0;
            r
        })
        .collect();
    let text = jsonl::to_jsonl_string(&zeroed).expect("records serialize");
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// A finished run read back from disk.
#[derive(Debug, Clone)]
pub struct LoadedRun {
    pub dir: PathBuf,
    pub artifact: RunArtifact,
    pub records: Vec<PredictionRecord>,
}

impl LoadedRun {
    /// Accepts an artifact directory or the artifact file itself.
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let file = if path.is_dir() { path.join(ARTIFACT_FILE) } else { path.to_path_buf() };
        let dir = file.parent().map(Path::to_path_buf).unwrap_or_default();
        let bad = |message: String| HarnessError::Artifact { path: file.clone(), message };
        let text = std::fs::read_to_string(&file).map_err(|e| bad(e.to_string()))?;
        let artifact: RunArtifact = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
        let predictions = dir.join(&artifact.predictions_file);
        let records = jsonl::read_jsonl::<PredictionRecord>(&predictions)
            .map_err(|e| bad(format!("{}: {e}", predictions.display())))?
            .map_err(|(line, e)| bad(format!("{} line {line}: {e}", predictions.display())))?;
        Ok(Self { dir, artifact, records })
    }
}

fn write_outputs(dir: &Path, artifact: &RunArtifact, records: &[PredictionRecord]) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir)?;
    jsonl::write_jsonl(&dir.join(PREDICTIONS_FILE), records)?;
    let mut text = serde_json::to_string_pretty(artifact).expect("artifact serializes");
    text.push('\n');
    std::fs::write(dir.join(ARTIFACT_FILE), text)?;
    Ok(())
}

/// Executes a validated run and writes `predictions.jsonl` and
/// `artifact.json` into the configured output directory. Records are written
/// in dataset order whatever the parallelism. A fatal error still writes the
/// predictions completed before it, marked partial.
pub async fn run_eval(config: &RunConfig) -> Result<RunArtifact, HarnessError> {
    config.validate()?;
    let prompts = Arc::new(config.load_prompts()?);
    let strategy = config.strategy()?;
    let backend = build_backend(&config.backend)?;
    let ctx = PipelineContext::new(backend.clone(), prompts.clone());

    let encounters = load_encounters(&config.dataset.path, config.dataset.resolved_format())?;
    let (encounters, excluded) = if config.dataset.curate {
        let set = curate(encounters, &config.dataset.rules);
        (set.retained, set.excluded)
    } else {
        (encounters, Vec::new())
    };
    tracing::info!(
        encounters = encounters.len(),
        excluded = excluded.len(),
        pipeline = %config.pipeline.kind,
        strategy = strategy.name(),
        "starting run"
    );

    let kind = config.pipeline.kind;
    let ablation = config.pipeline.ablation;
    let mut results = stream::iter(encounters.iter())
        .map(|e| {
            let ctx = &ctx;
            let strategy = &strategy;
            async move { (e.id.as_str(), run_with_strategy(ctx, kind, e, ablation, strategy).await) }
        })
        .buffered(config.parallelism);

    let mut records = Vec::with_capacity(encounters.len());
    let mut failure = None;
    while let Some((id, result)) = results.next().await {
        match result {
            Ok(record) => records.push(record),
            Err(source) => {
                failure = Some(HarnessError::Pipeline { encounter_id: id.to_string(), source });
                break;
            }
        }
    }
    drop(results);

    let digest = predictions_digest(&records);
    let mut report = compute_metrics(&records);
    report.meta = Some(RunMeta {
        pipeline: kind,
        strategy: strategy.name().to_string(),
        backend_id: backend.id().to_string(),
        ablation,
        prompt_pack_version: prompts.version().to_string(),
        predictions_digest: digest.clone(),
        reproducible: backend.deterministic(),
    });
    let status = match &failure {
        None => RunStatus::Complete,
        Some(HarnessError::Pipeline { encounter_id, source }) => {
            RunStatus::Partial { failed_encounter: encounter_id.clone(), error: source.to_string() }
        }
        Some(other) => RunStatus::Partial { failed_encounter: String::new(), error: other.to_string() },
    };
    let artifact = RunArtifact {
        schema_version: ARTIFACT_SCHEMA_VERSION.to_string(),
        status,
        config: config.clone(),
        predictions_file: PREDICTIONS_FILE.to_string(),
        predictions_digest: digest,
        n_encounters: encounters.len(),
        excluded,
        report,
    };
    write_outputs(&config.output_dir, &artifact, &records)?;
    match failure {
        Some(err) => {
            tracing::error!(error = %err, "run aborted");
            Err(err)
        }
        None => Ok(artifact),
    }
}
