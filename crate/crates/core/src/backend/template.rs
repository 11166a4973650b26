//! Prompt templates with `{name}` placeholders and the versioned prompt pack.
//!
//! `{{` and `}}` render as literal braces. A `{` that does not open a
//! well-formed `{identifier}` is copied through unchanged, so JSON snippets in
//! a template body survive rendering.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TemplateError {
    #[error("unbound placeholder {{{0}}}")]
    UnboundPlaceholder(String),
    #[error("template {template} uses undeclared placeholder {{{name}}}")]
    UndeclaredPlaceholder { template: TemplateId, name: String },
    #[error("prompt pack is missing template {0}")]
    MissingTemplate(TemplateId),
    #[error("prompt pack: {0}")]
    Pack(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateId {
    PredictFromNote,
    PredictFromVignette,
    PredictFromStructured,
    ExtractStructured,
    GenerateVignette,
    AgentSafetyFirst,
    AgentGuidelineStrict,
    AgentResourceAware,
    AgentRedFlagSentinel,
    DebateRevision,
    RagPredict,
}

impl TemplateId {
    pub const ALL: [TemplateId; 11] = [
        TemplateId::PredictFromNote,
        TemplateId::PredictFromVignette,
        TemplateId::PredictFromStructured,
        TemplateId::ExtractStructured,
        TemplateId::GenerateVignette,
        TemplateId::AgentSafetyFirst,
        TemplateId::AgentGuidelineStrict,
        TemplateId::AgentResourceAware,
        TemplateId::AgentRedFlagSentinel,
        TemplateId::DebateRevision,
        TemplateId::RagPredict,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateId::PredictFromNote => "predict_from_note",
            TemplateId::PredictFromVignette => "predict_from_vignette",
            TemplateId::PredictFromStructured => "predict_from_structured",
            TemplateId::ExtractStructured => "extract_structured",
            TemplateId::GenerateVignette => "generate_vignette",
            TemplateId::AgentSafetyFirst => "agent_safety_first",
            TemplateId::AgentGuidelineStrict => "agent_guideline_strict",
            TemplateId::AgentResourceAware => "agent_resource_aware",
            TemplateId::AgentRedFlagSentinel => "agent_red_flag_sentinel",
            TemplateId::DebateRevision => "debate_revision",
            TemplateId::RagPredict => "rag_predict",
        }
    }

    /// Placeholders a body for this template may reference.
    pub fn declared_placeholders(self) -> &'static [&'static str] {
        match self {
            TemplateId::PredictFromNote => &["age", "note"],
            TemplateId::PredictFromVignette => &["vignette"],
            TemplateId::PredictFromStructured => &["age", "structured"],
            TemplateId::ExtractStructured => &["note"],
            TemplateId::GenerateVignette => &["age", "clinical_input"],
            TemplateId::AgentSafetyFirst
            | TemplateId::AgentGuidelineStrict
            | TemplateId::AgentResourceAware
            | TemplateId::AgentRedFlagSentinel => &["vignette"],
            TemplateId::DebateRevision => &["persona", "vignette", "own_level", "own_rationale", "peer_opinions"],
            TemplateId::RagPredict => &["case"],
        }
    }

    /// Tasks whose answer is an ESI level.
    pub fn expects_level(self) -> bool {
        !matches!(self, TemplateId::ExtractStructured | TemplateId::GenerateVignette)
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Text(String),
    Slot(String),
}

fn is_ident(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
}

fn parse_body(body: &str) -> Vec<Segment> {
    let mut segments = Vec::new();
    let mut text = String::new();
    let mut rest = body;
    while let Some(c) = rest.chars().next() {
        if rest.starts_with("{{") {
            text.push('{');
            rest = &rest[2..];
        } else if rest.starts_with("}}") {
            text.push('}');
            rest = &rest[2..];
        } else if c == '{' {
            match rest[1..].find('}') {
                Some(end) if is_ident(&rest[1..1 + end]) => {
                    if !text.is_empty() {
                        segments.push(Segment::Text(std::mem::take(&mut text)));
                    }
                    segments.push(Segment::Slot(rest[1..1 + end].to_string()));
                    rest = &rest[end + 2..];
                }
                _ => {
                    text.push('{');
                    rest = &rest[1..];
                }
            }
        } else {
            text.push(c);
            rest = &rest[c.len_utf8()..];
        }
    }
    if !text.is_empty() {
        segments.push(Segment::Text(text));
    }
    segments
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    id: TemplateId,
    body: String,
    segments: Vec<Segment>,
}

impl PromptTemplate {
    /// Builds a template, rejecting placeholders the template id does not declare.
    pub fn new(id: TemplateId, body: impl Into<String>) -> Result<Self, TemplateError> {
        let body = body.into();
        let segments = parse_body(&body);
        let declared = id.declared_placeholders();
        for seg in &segments {
            if let Segment::Slot(name) = seg {
                if !declared.contains(&name.as_str()) {
                    return Err(TemplateError::UndeclaredPlaceholder { template: id, name: name.clone() });
                }
            }
        }
        Ok(Self { id, body, segments })
    }

    pub fn id(&self) -> TemplateId {
        self.id
    }

    pub fn body(&self) -> &str {
        &self.body
    }

    pub fn placeholders(&self) -> Vec<&str> {
        let mut names: Vec<&str> = self
            .segments
            .iter()
            .filter_map(|s| match s {
                Segment::Slot(n) => Some(n.as_str()),
                Segment::Text(_) => None,
            })
            .collect();
        names.sort_unstable();
        names.dedup();
        names
    }

    /// Single-pass substitution; bound values are never re-scanned.
    pub fn render_with<'a>(&self, lookup: impl Fn(&str) -> Option<&'a str>) -> Result<String, TemplateError> {
        let mut out = String::with_capacity(self.body.len());
        for seg in &self.segments {
            match seg {
                Segment::Text(t) => out.push_str(t),
                Segment::Slot(name) => {
                    let value = lookup(name).ok_or_else(|| TemplateError::UnboundPlaceholder(name.clone()))?;
                    out.push_str(value);
                }
            }
        }
        Ok(out)
    }

    pub fn render(&self, bindings: &[(&str, &str)]) -> Result<String, TemplateError> {
        self.render_with(|name| bindings.iter().find(|(k, _)| *k == name).map(|(_, v)| *v))
    }
}

pub fn render_prompt(template: &PromptTemplate, bindings: &HashMap<String, String>) -> Result<String, TemplateError> {
    template.render_with(|name| bindings.get(name).map(String::as_str))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PackFile {
    version: String,
    templates: BTreeMap<TemplateId, String>,
}

/// A versioned set of bodies, one per template id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptPack {
    version: String,
    templates: BTreeMap<TemplateId, PromptTemplate>,
}

const BUILTIN_PACK: &str = include_str!("../../assets/prompts.toml");

impl PromptPack {
    pub fn builtin() -> Self {
        Self::from_toml(BUILTIN_PACK).expect("bundled prompt pack is valid")
    }

    pub fn from_toml(text: &str) -> Result<Self, TemplateError> {
        let file: PackFile = toml::from_str(text).map_err(|e| TemplateError::Pack(e.to_string()))?;
        if file.version.trim().is_empty() {
            return Err(TemplateError::Pack("version must be non-empty".into()));
        }
        let mut templates = BTreeMap::new();
        for id in TemplateId::ALL {
            let body = file.templates.get(&id).ok_or(TemplateError::MissingTemplate(id))?;
            templates.insert(id, PromptTemplate::new(id, body.clone())?);
        }
        Ok(Self { version: file.version, templates })
    }

    pub fn load(path: &Path) -> Result<Self, TemplateError> {
        let text = std::fs::read_to_string(path).map_err(|e| TemplateError::Pack(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    pub fn get(&self, id: TemplateId) -> &PromptTemplate {
        &self.templates[&id]
    }
}
