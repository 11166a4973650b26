//! Run configuration files.
//!
//! ```toml
//! version = 1
//! output_dir = "runs/demo"
//! parallelism = 4
//!
//! [dataset]
//! path = "demo_encounters.jsonl"
//!
//! [pipeline]
//! kind = "note_to_esi"
//! ablation = "none"
//!
//! [backend]
//! kind = "heuristic"
//! seed = 7
//! ```
//!
//! Relative paths are resolved against the directory holding the file.
//! Unknown keys are rejected.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendSpec, PromptPack, TemplateError};
use crate::ensemble::EnsembleOptions;
use crate::ingest::{CurationRules, DatasetFormat};
use crate::pipelines::{Ablation, PipelineKind, Strategy};
use crate::rag::{index_corpus, load_corpus, RagError};

pub const CONFIG_VERSION: u32 = 1;

fn default_parallelism() -> usize {
    4
}

fn default_k() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub path: PathBuf,
    /// Inferred from the extension when absent.
    #[serde(default)]
    pub format: Option<DatasetFormat>,
    #[serde(default)]
    pub curate: bool,
    #[serde(default)]
    pub rules: CurationRules,
}

impl DatasetConfig {
    pub fn resolved_format(&self) -> DatasetFormat {
        self.format.unwrap_or_else(|| DatasetFormat::from_path(&self.path))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub kind: PipelineKind,
    #[serde(default)]
    pub ablation: Ablation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RagConfig {
    pub corpus: PathBuf,
    #[serde(default = "default_k")]
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub dataset: DatasetConfig,
    pub pipeline: PipelineConfig,
    pub backend: BackendSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ensemble: Option<EnsembleOptions>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rag: Option<RagConfig>,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    pub output_dir: PathBuf,
    /// Prompt pack file; the built-in pack when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_pack: Option<PathBuf>,
    /// When set, the loaded pack must carry exactly this version.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_pack_version: Option<String>,
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Parse(String),
    #[error("unsupported config version {0} (expected {CONFIG_VERSION})")]
    UnsupportedVersion(u32),
    #[error("ensemble and rag are both configured; choose one strategy")]
    ConflictingStrategies,
    #[error("{what} not found: {path}")]
    MissingFile { what: &'static str, path: PathBuf },
    #[error("{0}")]
    Invalid(String),
    #[error("prompt pack: {0}")]
    PromptPack(#[from] TemplateError),
    #[error("prompt pack version {found} does not match required {expected}")]
    PromptVersion { expected: String, found: String },
    #[error("rag corpus: {0}")]
    Corpus(#[from] RagError),
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    /// Parses `path` and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
        let mut config = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        config.resolve_paths(base);
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.dataset.path);
        fix(&mut self.output_dir);
        if let Some(rag) = &mut self.rag {
            fix(&mut rag.corpus);
        }
        if let Some(pack) = &mut self.prompt_pack {
            fix(pack);
        }
        self.backend.resolve_paths(base);
    }

    /// Structural checks plus existence of every referenced input file.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.version != CONFIG_VERSION {
            return Err(ConfigError::UnsupportedVersion(self.version));
        }
        if self.ensemble.is_some() && self.rag.is_some() {
            return Err(ConfigError::ConflictingStrategies);
        }
        if let Some(opts) = &self.ensemble {
            opts.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
            if !self.pipeline.kind.produces_vignette() {
                return Err(ConfigError::Invalid(format!(
                    "ensemble needs a vignette pipeline, got {}",
                    self.pipeline.kind
                )));
            }
        }
        if let Some(rag) = &self.rag {
            if rag.k == 0 {
                return Err(ConfigError::Invalid("rag.k must be at least 1".into()));
            }
        }
        if self.parallelism == 0 {
            return Err(ConfigError::Invalid("parallelism must be at least 1".into()));
        }
        let mut files: Vec<(&'static str, &Path)> = vec![("dataset", self.dataset.path.as_path())];
        files.extend(self.backend.referenced_files().into_iter().map(|p| ("backend file", p)));
        if let Some(rag) = &self.rag {
            files.push(("rag corpus", rag.corpus.as_path()));
        }
        if let Some(pack) = &self.prompt_pack {
            files.push(("prompt pack", pack.as_path()));
        }
        for (what, path) in files {
            if !path.is_file() {
                return Err(ConfigError::MissingFile { what, path: path.to_path_buf() });
            }
        }
        Ok(())
    }

    pub fn load_prompts(&self) -> Result<PromptPack, ConfigError> {
        let pack = match &self.prompt_pack {
            Some(path) => PromptPack::load(path)?,
            None => PromptPack::builtin(),
        };
        if let Some(expected) = &self.prompt_pack_version {
            if expected != pack.version() {
                return Err(ConfigError::PromptVersion { expected: expected.clone(), found: pack.version().to_string() });
            }
        }
        Ok(pack)
    }

    /// Builds the prediction strategy, indexing the corpus for RAG.
    pub fn strategy(&self) -> Result<Strategy, ConfigError> {
        match (&self.ensemble, &self.rag) {
            (Some(_), Some(_)) => Err(ConfigError::ConflictingStrategies),
            (Some(opts), None) => Ok(Strategy::Ensemble(*opts)),
            (None, Some(rag)) => {
                let index = index_corpus(load_corpus(&rag.corpus)?)?;
                Ok(Strategy::Rag { index: Arc::new(index), k: rag.k })
            }
            (None, None) => Ok(Strategy::Plain),
        }
    }
}
