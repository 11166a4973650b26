//! Lexical retrieval over a reference-guideline corpus.
//!
//! Scoring is Okapi BM25 with `k1 = 1.2`, `b = 0.75` and
//! `idf(t) = ln(1 + (N - df + 0.5) / (df + 0.5))`. Text is lowercased and
//! split on anything that is not alphanumeric. A query term counts once no
//! matter how often it repeats. Results are ordered by score, then by
//! ascending `passage_id`.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::jsonl;

pub const BM25_K1: f64 = 1.2;
pub const BM25_B: f64 = 0.75;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Passage {
    pub passage_id: u32,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_section: Option<String>,
}

#[derive(Debug, Error)]
pub enum RagError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("duplicate passage_id {0}")]
    DuplicateId(u32),
    #[error("corpus file not found: {0}")]
    NotFound(String),
    #[error("corpus line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Clone)]
struct IndexedPassage {
    passage: Passage,
    term_counts: HashMap<String, u32>,
    length: usize,
}

/// Immutable BM25 index; safe to share across threads.
#[derive(Debug, Clone)]
pub struct LexicalIndex {
    passages: Vec<IndexedPassage>,
    doc_freq: HashMap<String, u32>,
    avg_len: f64,
}

pub fn index_corpus(passages: Vec<Passage>) -> Result<LexicalIndex, RagError> {
    if passages.is_empty() {
        return Err(RagError::EmptyCorpus);
    }
    let mut seen = BTreeSet::new();
    let mut doc_freq: HashMap<String, u32> = HashMap::new();
    let mut indexed = Vec::with_capacity(passages.len());
    for passage in passages {
        if !seen.insert(passage.passage_id) {
            return Err(RagError::DuplicateId(passage.passage_id));
        }
        let tokens = tokenize(&passage.text);
        let mut term_counts: HashMap<String, u32> = HashMap::new();
        for t in &tokens {
            *term_counts.entry(t.clone()).or_default() += 1;
        }
        for t in term_counts.keys() {
            *doc_freq.entry(t.clone()).or_default() += 1;
        }
        indexed.push(IndexedPassage { passage, term_counts, length: tokens.len() });
    }
    let avg_len = indexed.iter().map(|p| p.length as f64).sum::<f64>() / indexed.len() as f64;
    Ok(LexicalIndex { passages: indexed, doc_freq, avg_len })
}

impl LexicalIndex {
    pub fn len(&self) -> usize {
        self.passages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.passages.is_empty()
    }

    pub fn avg_len(&self) -> f64 {
        self.avg_len
    }

    pub fn doc_freq(&self, term: &str) -> u32 {
        self.doc_freq.get(term).copied().unwrap_or(0)
    }

    pub fn idf(&self, term: &str) -> f64 {
        let n = self.passages.len() as f64;
        let df = self.doc_freq(term) as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    fn score_passage(&self, p: &IndexedPassage, terms: &BTreeSet<String>) -> f64 {
        let norm = if self.avg_len > 0.0 { p.length as f64 / self.avg_len } else { 0.0 };
        terms
            .iter()
            .map(|t| {
                let tf = p.term_counts.get(t).copied().unwrap_or(0) as f64;
                if tf == 0.0 {
                    return 0.0;
                }
                self.idf(t) * tf * (BM25_K1 + 1.0) / (tf + BM25_K1 * (1.0 - BM25_B + BM25_B * norm))
            })
            .sum()
    }

    /// Score of one passage for `query`, if the id exists.
    pub fn score(&self, passage_id: u32, query: &str) -> Option<f64> {
        let terms: BTreeSet<String> = tokenize(query).into_iter().collect();
        self.passages
            .iter()
            .find(|p| p.passage.passage_id == passage_id)
            .map(|p| self.score_passage(p, &terms))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hit {
    pub passage: Passage,
    pub score: f64,
}

/// Top `k` passages; every passage is ranked, including zero scores.
pub fn retrieve(index: &LexicalIndex, query: &str, k: usize) -> Vec<Hit> {
    let terms: BTreeSet<String> = tokenize(query).into_iter().collect();
    let mut hits: Vec<Hit> = index
        .passages
        .iter()
        .map(|p| Hit { passage: p.passage.clone(), score: index.score_passage(p, &terms) })
        .collect();
    hits.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.passage.passage_id.cmp(&b.passage.passage_id))
    });
    hits.truncate(k);
    hits
}

pub const GUIDELINES_OPEN: &str = "=== Reference guidelines ===";
pub const GUIDELINES_CLOSE: &str = "=== End reference guidelines ===";

pub fn augment_prompt(base_prompt: &str, passages: &[Passage]) -> String {
    if passages.is_empty() {
        return base_prompt.to_string();
    }
    let mut out = String::from(GUIDELINES_OPEN);
    out.push('\n');
    for (rank, p) in passages.iter().enumerate() {
        match &p.source_section {
            Some(section) => out.push_str(&format!("[{}] ({}) {}\n", rank + 1, section, p.text.trim())),
            None => out.push_str(&format!("[{}] {}\n", rank + 1, p.text.trim())),
        }
    }
    out.push_str(GUIDELINES_CLOSE);
    out.push_str("\n\n");
    out.push_str(base_prompt);
    out
}

pub fn load_corpus(path: &Path) -> Result<Vec<Passage>, RagError> {
    if !path.exists() {
        return Err(RagError::NotFound(path.display().to_string()));
    }
    jsonl::read_jsonl::<Passage>(path)?.map_err(|(line, e)| RagError::Parse { line, message: e.to_string() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedPassage {
    pub passage_id: u32,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_section: Option<String>,
    pub text: String,
}

/// Retrieval record attached to a prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RagTrace {
    pub k: usize,
    pub passages: Vec<RetrievedPassage>,
}

impl RagTrace {
    pub fn from_hits(k: usize, hits: &[Hit]) -> Self {
        Self {
            k,
            passages: hits
                .iter()
                .map(|h| RetrievedPassage {
                    passage_id: h.passage.passage_id,
                    score: h.score,
                    source_section: h.passage.source_section.clone(),
                    text: h.passage.text.clone(),
                })
                .collect(),
        }
    }
}
