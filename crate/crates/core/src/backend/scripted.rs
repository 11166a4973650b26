use std::collections::HashMap;
use std::path::Path;
use std::time::Instant;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};

use super::{prompt_digest, Backend, BackendError, Completion, CompletionRequest};
use crate::jsonl::read_jsonl;

/// One line of a scripted fixture file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptedEntry {
    pub digest: String,
    pub response: String,
}

impl ScriptedEntry {
    pub fn for_prompt(prompt: &str, response: impl Into<String>) -> Self {
        Self { digest: prompt_digest(prompt), response: response.into() }
    }
}

/// Replays canned responses keyed by the SHA-256 of the exact prompt.
#[derive(Debug, Clone, Default)]
pub struct ScriptedBackend {
    id: String,
    responses: HashMap<String, String>,
}

impl ScriptedBackend {
    pub fn new(entries: impl IntoIterator<Item = ScriptedEntry>) -> Self {
        Self {
            id: "scripted".into(),
            responses: entries.into_iter().map(|e| (e.digest, e.response)).collect(),
        }
    }

    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Self {
        Self::new(pairs.into_iter().map(|(p, r)| ScriptedEntry::for_prompt(p, r)))
    }

    pub fn load(path: &Path) -> Result<Self, BackendError> {
        let entries: Vec<ScriptedEntry> = read_jsonl(path)
            .map_err(|e| BackendError::Config(format!("{}: {e}", path.display())))?
            .map_err(|(line, e)| BackendError::Config(format!("{}:{line}: {e}", path.display())))?;
        let mut backend = Self::new(entries);
        backend.id = format!(
            "scripted:{}",
            path.file_name().and_then(|n| n.to_str()).unwrap_or("fixture")
        );
        Ok(backend)
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }
}

#[async_trait]
impl Backend for ScriptedBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn deterministic(&self) -> bool {
        true
    }

    async fn complete(&self, request: &CompletionRequest) -> Result<Completion, BackendError> {
        let start = Instant::now();
        let digest = prompt_digest(&request.prompt);
        let text = self
            .responses
            .get(&digest)
            .cloned()
            .ok_or(BackendError::FixtureMiss(digest))?;
        Ok(Completion {
            text,
            latency_seconds: start.elapsed().as_secs_f64(),
            backend_id: self.id.clone(),
            saliency: None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::TemplateId;

    fn req(p: &str) -> CompletionRequest {
        CompletionRequest { task: TemplateId::PredictFromNote, prompt: p.into(), case_text: String::new() }
    }

    #[tokio::test]
    async fn lookup_and_miss() {
        let b = ScriptedBackend::from_pairs([("p", "ESI: 3")]);
        assert_eq!(b.complete(&req("p")).await.unwrap().text, "ESI: 3");
        match b.complete(&req("q")).await {
            Err(BackendError::FixtureMiss(d)) => assert_eq!(d, prompt_digest("q")),
            other => panic!("{other:?}"),
        }
    }

    #[tokio::test]
    async fn loads_fixture_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fx.jsonl");
        crate::jsonl::write_jsonl(&path, &[ScriptedEntry::for_prompt("p", "ESI 2")]).unwrap();
        let b = ScriptedBackend::load(&path).unwrap();
        assert_eq!(b.id(), "scripted:fx.jsonl");
        assert_eq!(b.complete(&req("p")).await.unwrap().text, "ESI 2");
    }
}
