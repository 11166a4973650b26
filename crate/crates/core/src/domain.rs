//! Core vocabulary shared by every module: acuity levels, encounters,
//! intermediate representations, and the triage error classification.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DomainError {
    #[error("ESI level {0} is out of range (expected 1-5)")]
    OutOfRange(i64),
}

/// Emergency Severity Index acuity level.
///
/// Lower values are more acute. The derived ordering follows the numeric
/// value, so `min` over a set of levels yields the most acute (safest) one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "i64", into = "u8")]
pub struct EsiLevel(u8);

impl EsiLevel {
    pub const ALL: [EsiLevel; 5] = [EsiLevel(1), EsiLevel(2), EsiLevel(3), EsiLevel(4), EsiLevel(5)];

    pub fn new(value: i64) -> Result<Self, DomainError> {
        esi_from_int(value)
    }

    pub fn value(self) -> u8 {
        self.0
    }

    /// True when `self` is strictly more acute than `other`.
    pub fn more_acute_than(self, other: EsiLevel) -> bool {
        self.0 < other.0
    }
}

pub fn esi_from_int(i: i64) -> Result<EsiLevel, DomainError> {
    if (1..=5).contains(&i) {
        Ok(EsiLevel(i as u8))
    } else {
        Err(DomainError::OutOfRange(i))
    }
}

impl TryFrom<i64> for EsiLevel {
    type Error = DomainError;

    fn try_from(value: i64) -> Result<Self, Self::Error> {
        esi_from_int(value)
    }
}

impl From<EsiLevel> for u8 {
    fn from(level: EsiLevel) -> u8 {
        level.0
    }
}

impl fmt::Display for EsiLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// One emergency department visit.
///
/// `nurse_esi` is the reference label. Datasets loaded for evaluation always
/// carry it; interactive requests may omit it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TriageEncounter {
    pub id: String,
    pub age_months: u32,
    pub chief_complaint: String,
    pub vital_signs: String,
    pub physical_exam: String,
    #[serde(default)]
    pub pivot_assessment: Option<String>,
    pub pmh: String,
    pub triage_note: String,
    #[serde(default)]
    pub nurse_esi: Option<EsiLevel>,
}

impl TriageEncounter {
    /// Human-readable age used in prompts.
    pub fn age_text(&self) -> String {
        let m = self.age_months;
        if m < 24 {
            format!("{m} months")
        } else {
            format!("{} years", m / 12)
        }
    }

    /// The encounter's own curated fields, treated as human-structured data.
    pub fn human_structured(&self) -> StructuredRecord {
        StructuredRecord {
            chief_complaint: self.chief_complaint.clone(),
            vital_signs: self.vital_signs.clone(),
            physical_exam: self.physical_exam.clone(),
            source: FieldSource::Human,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldSource {
    Human,
    Model,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructuredRecord {
    pub chief_complaint: String,
    pub vital_signs: String,
    pub physical_exam: String,
    pub source: FieldSource,
}

impl StructuredRecord {
    /// Labeled three-section rendering used as prompt input.
    pub fn to_prompt_block(&self) -> String {
        format!(
            "Chief Complaint: {}\nVital Signs: {}\nPhysical Exam: {}",
            self.chief_complaint, self.vital_signs, self.physical_exam
        )
    }

    pub fn has_content(&self) -> bool {
        [&self.chief_complaint, &self.vital_signs, &self.physical_exam]
            .iter()
            .any(|f| !f.trim().is_empty())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VignetteOrigin {
    RawNote,
    HumanStructured,
    ModelStructured,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClinicalVignette {
    pub text: String,
    pub derived_from: VignetteOrigin,
}

/// Per-token importance scores supplied by a backend alongside a completion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenSaliency {
    pub tokens: Vec<String>,
    pub scores: Vec<f64>,
}

/// Outcome of comparing a predicted level against the reference level.
///
/// Exactly one of `concordant`, `undertriage`, `overtriage` is set. The
/// significance flags are subsets of their parent direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ErrorClass {
    pub concordant: bool,
    pub undertriage: bool,
    pub overtriage: bool,
    pub significant_undertriage: bool,
    pub significant_overtriage: bool,
}

/// Classifies a prediction against the reference label.
///
/// Undertriage means the prediction is less acute (numerically higher).
/// Significant undertriage is a true ESI 2 predicted as 3-5; significant
/// overtriage is a true ESI 3-5 predicted as 1-2. A true ESI 1 predicted
/// lower is plain undertriage.
pub fn classify_error(truth: EsiLevel, pred: EsiLevel) -> ErrorClass {
    let (t, p) = (truth.value(), pred.value());
    ErrorClass {
        concordant: p == t,
        undertriage: p > t,
        overtriage: p < t,
        significant_undertriage: t == 2 && p >= 3,
        significant_overtriage: t >= 3 && p <= 2,
    }
}
