//! Server configuration file.
//!
//! ```toml
//! bind = "127.0.0.1:8080"
//! default_backend = "heuristic"
//!
//! [backends.heuristic]
//! kind = "heuristic"
//!
//! [backends.local]
//! kind = "http"
//! base_url = "http://localhost:8000"
//! model = "qwen2.5-7b"
//!
//! [rag]
//! corpus = "handbook.jsonl"
//! k = 3
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use triage_core::backend::{build_backend, BackendError, BackendSpec, PromptPack, TemplateError};
use triage_core::rag::{index_corpus, load_corpus, RagError};

use crate::AppState;

fn default_bind() -> String {
    "127.0.0.1:8080".to_string()
}

fn default_k() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RagSettings {
    pub corpus: PathBuf,
    #[serde(default = "default_k")]
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServerConfig {
    #[serde(default = "default_bind")]
    pub bind: String,
    pub backends: BTreeMap<String, BackendSpec>,
    #[serde(default)]
    pub default_backend: Option<String>,
    #[serde(default)]
    pub prompt_pack: Option<PathBuf>,
    #[serde(default)]
    pub rag: Option<RagSettings>,
    /// Directory of static files served for non-API paths.
    #[serde(default)]
    pub static_dir: Option<PathBuf>,
}

#[derive(Debug, Error)]
pub enum ServerConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid server config: {0}")]
    Parse(String),
    #[error("at least one backend must be configured")]
    NoBackends,
    #[error("default backend '{0}' is not configured")]
    UnknownDefault(String),
    #[error("backend '{name}': {source}")]
    Backend {
        name: String,
        #[source]
        source: BackendError,
    },
    #[error("prompt pack: {0}")]
    Prompts(#[from] TemplateError),
    #[error("rag corpus: {0}")]
    Corpus(#[from] RagError),
}

impl ServerConfig {
    pub fn from_toml(text: &str) -> Result<Self, ServerConfigError> {
        toml::from_str(text).map_err(|e| ServerConfigError::Parse(e.to_string()))
    }

    /// Parses `path`, resolving relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self, ServerConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ServerConfigError::Read { path: path.to_path_buf(), source })?;
        let mut config = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for spec in config.backends.values_mut() {
            spec.resolve_paths(base);
        }
        if let Some(p) = &mut config.prompt_pack {
            fix(p);
        }
        if let Some(r) = &mut config.rag {
            fix(&mut r.corpus);
        }
        if let Some(d) = &mut config.static_dir {
            fix(d);
        }
        Ok(config)
    }

    /// Builds backends, loads prompts, and indexes the corpus.
    pub fn build_state(&self) -> Result<AppState, ServerConfigError> {
        if self.backends.is_empty() {
            return Err(ServerConfigError::NoBackends);
        }
        let default_backend = match &self.default_backend {
            Some(name) if !self.backends.contains_key(name) => {
                return Err(ServerConfigError::UnknownDefault(name.clone()))
            }
            Some(name) => Some(name.clone()),
            None if self.backends.len() == 1 => self.backends.keys().next().cloned(),
            None => None,
        };
        let mut backends = BTreeMap::new();
        for (name, spec) in &self.backends {
            let backend =
                build_backend(spec).map_err(|source| ServerConfigError::Backend { name: name.clone(), source })?;
            backends.insert(name.clone(), backend);
        }
        let prompts = match &self.prompt_pack {
            Some(p) => PromptPack::load(p)?,
            None => PromptPack::builtin(),
        };
        let (index, default_k) = match &self.rag {
            Some(r) => (Some(Arc::new(index_corpus(load_corpus(&r.corpus)?)?)), r.k),
            None => (None, default_k()),
        };
        Ok(AppState { backends, default_backend, prompts: Arc::new(prompts), index, default_k })
    }
}
