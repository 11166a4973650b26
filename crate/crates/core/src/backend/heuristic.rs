//! Keyword-rule mock backend.
//!
//! The first rule with a keyword present in the request's case text decides
//! the answer; with no match the table's default level applies. Output depends
//! only on the rule table, the seed, and the request, so repeated runs are
//! byte-identical.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use async_trait::async_trait;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Backend, BackendError, Completion, CompletionRequest, TemplateId};
use crate::domain::TokenSaliency;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeuristicRule {
    pub keywords: Vec<String>,
    pub esi: u8,
    #[serde(default)]
    pub chief_complaint: Option<String>,
    #[serde(default)]
    pub vital_signs: Option<String>,
    #[serde(default)]
    pub physical_exam: Option<String>,
    #[serde(default)]
    pub vignette: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuleTable {
    #[serde(default = "default_level")]
    pub default_esi: u8,
    /// Probability of shifting an answer by one level, drawn from a seeded RNG.
    #[serde(default)]
    pub noise: f64,
    /// Level offsets applied to persona agent answers.
    #[serde(default)]
    pub persona_offsets: BTreeMap<TemplateId, i8>,
    pub rules: Vec<HeuristicRule>,
}

fn default_level() -> u8 {
    4
}

const BUILTIN_RULES: &str = include_str!("../../assets/heuristic_rules.toml");

impl RuleTable {
    pub fn builtin() -> Self {
        Self::from_toml(BUILTIN_RULES).expect("bundled rule table is valid")
    }

    pub fn from_toml(text: &str) -> Result<Self, BackendError> {
        let table: RuleTable = toml::from_str(text).map_err(|e| BackendError::Config(e.to_string()))?;
        table.validate()?;
        Ok(table)
    }

    pub fn load(path: &Path) -> Result<Self, BackendError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BackendError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    fn validate(&self) -> Result<(), BackendError> {
        let in_range = |v: u8| (1..=5).contains(&v);
        if !in_range(self.default_esi) {
            return Err(BackendError::Config(format!("default_esi {} outside 1-5", self.default_esi)));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(BackendError::Config(format!("noise {} outside [0, 1]", self.noise)));
        }
        for (i, rule) in self.rules.iter().enumerate() {
            if !in_range(rule.esi) {
                return Err(BackendError::Config(format!("rule {i}: esi {} outside 1-5", rule.esi)));
            }
            if rule.keywords.is_empty() || rule.keywords.iter().any(|k| k.trim().is_empty()) {
                return Err(BackendError::Config(format!("rule {i}: keywords must be non-empty")));
            }
        }
        Ok(())
    }

    /// First matching rule and the keyword that matched.
    pub fn lookup(&self, case_text: &str) -> Option<(&HeuristicRule, &str)> {
        let lower = case_text.to_lowercase();
        self.rules.iter().find_map(|rule| {
            rule.keywords
                .iter()
                .find(|k| lower.contains(&k.to_lowercase()))
                .map(|k| (rule, k.as_str()))
        })
    }

    pub fn level_for(&self, case_text: &str) -> u8 {
        self.lookup(case_text).map(|(r, _)| r.esi).unwrap_or(self.default_esi)
    }
}

#[derive(Debug, Clone)]
pub struct HeuristicBackend {
    id: String,
    table: RuleTable,
    seed: u64,
}

impl HeuristicBackend {
    pub fn new(table: RuleTable, seed: u64) -> Self {
        Self { id: "heuristic".into(), table, seed }
    }

    pub fn builtin() -> Self {
        Self::new(RuleTable::builtin(), 0)
    }

    pub fn table(&self) -> &RuleTable {
        &self.table
    }

    fn level_answer(&self, request: &CompletionRequest) -> String {
        let matched = self.table.lookup(&request.case_text);
        let mut level = matched.map(|(r, _)| r.esi).unwrap_or(self.table.default_esi) as i16;
        level += *self.table.persona_offsets.get(&request.task).unwrap_or(&0) as i16;
        if self.table.noise > 0.0 {
            let digest = Sha256::digest(request.prompt.as_bytes());
            let salt = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ salt);
            if rng.random::<f64>() < self.table.noise {
                level += if rng.random::<bool>() { 1 } else { -1 };
            }
        }
        let level = level.clamp(1, 5);
        let rationale = match matched {
            Some((_, kw)) => format!("presentation includes {kw}."),
            None => "no high-risk features identified.".to_string(),
        };
        format!("ESI: {level}\nRationale: {rationale}")
    }

    fn structured_answer(&self, case_text: &str) -> String {
        let matched = self.table.lookup(case_text).map(|(r, _)| r);
        let sentences = split_sentences(case_text);
        let fallback_cc = sentences.first().cloned().unwrap_or_default();
        let fallback_vitals = sentences
            .iter()
            .skip(1)
            .filter(|s| s.chars().any(|c| c.is_ascii_digit()))
            .cloned()
            .collect::<Vec<_>>()
            .join("; ");
        let fallback_exam = sentences
            .iter()
            .skip(1)
            .filter(|s| !s.chars().any(|c| c.is_ascii_digit()))
            .cloned()
            .collect::<Vec<_>>()
            .join("; ");
        let pick = |authored: Option<&String>, fallback: String| authored.cloned().unwrap_or(fallback);
        format!(
            "Chief Complaint: {}\nVital Signs: {}\nPhysical Exam: {}",
            pick(matched.and_then(|r| r.chief_complaint.as_ref()), fallback_cc),
            pick(matched.and_then(|r| r.vital_signs.as_ref()), fallback_vitals),
            pick(matched.and_then(|r| r.physical_exam.as_ref()), fallback_exam),
        )
    }

    fn vignette_answer(&self, case_text: &str) -> String {
        let lead = split_sentences(case_text).into_iter().next().unwrap_or_default();
        match self.table.lookup(case_text) {
            Some((rule, _)) if rule.vignette.is_some() => rule.vignette.clone().unwrap_or_default(),
            // the keyword is repeated so a downstream prediction hits the same rule
            Some((_, kw)) => format!("Pediatric patient presenting with {kw}. {lead}."),
            None if lead.is_empty() => "Pediatric patient with a non-specific presentation.".to_string(),
            None => format!("Pediatric patient with a non-specific presentation. {lead}."),
        }
    }

    fn saliency(&self, case_text: &str) -> TokenSaliency {
        let winner: Vec<String> = self
            .table
            .lookup(case_text)
            .map(|(_, kw)| tokenize(kw))
            .unwrap_or_default();
        let other: Vec<String> = self.table.rules.iter().flat_map(|r| r.keywords.iter()).flat_map(|k| tokenize(k)).collect();
        let tokens = tokenize(case_text);
        let scores = tokens
            .iter()
            .map(|t| {
                if winner.contains(t) {
                    1.0
                } else if other.contains(t) {
                    0.5
                } else {
                    0.0
                }
            })
            .collect();
        TokenSaliency { tokens, scores }
    }
}

fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn split_sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let chars: Vec<char> = text.chars().collect();
    for (i, &c) in chars.iter().enumerate() {
        // a period between digits (38.5) is a decimal point
        let decimal = c == '.'
            && i > 0
            && chars[i - 1].is_ascii_digit()
            && chars.get(i + 1).is_some_and(|n| n.is_ascii_digit());
        if matches!(c, '.' | ';' | '\n') && !decimal {
            let s = cur.trim().to_string();
            if !s.is_empty() {
                out.push(s);
            }
            cur.clear();
        } else {
            cur.push(c);
        }
    }
    let s = cur.trim().to_string();
    if !s.is_empty() {
        out.push(s);
    }
    out
}

#[async_trait]
impl Backend for HeuristicBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn deterministic(&self) -> bool {
        true
    }

    async fn complete(&self, request: &CompletionRequest) -> Result<Completion, BackendError> {
        let start = Instant::now();
        let (text, saliency) = match request.task {
            TemplateId::ExtractStructured => (self.structured_answer(&request.case_text), None),
            TemplateId::GenerateVignette => (self.vignette_answer(&request.case_text), None),
            TemplateId::PredictFromNote
            | TemplateId::PredictFromVignette
            | TemplateId::PredictFromStructured
            | TemplateId::RagPredict => (self.level_answer(request), Some(self.saliency(&request.case_text))),
            _ => (self.level_answer(request), None),
        };
        Ok(Completion {
            text,
            latency_seconds: start.elapsed().as_secs_f64(),
            backend_id: self.id.clone(),
            saliency,
        })
    }
}
