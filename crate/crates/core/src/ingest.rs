//! Dataset loading, curation filters, silver-vignette task construction, and
//! chunk partitioning.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{self, BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{esi_from_int, EsiLevel, StructuredRecord, TriageEncounter};

/// Column order of the CSV encoding.
pub const CSV_COLUMNS: [&str; 9] = [
    "id",
    "age_months",
    "chief_complaint",
    "vital_signs",
    "physical_exam",
    "pivot_assessment",
    "pmh",
    "triage_note",
    "nurse_esi",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetFormat {
    Jsonl,
    Csv,
}

impl DatasetFormat {
    /// Guesses the format from a file extension; anything but `.csv` is JSONL.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => DatasetFormat::Csv,
            _ => DatasetFormat::Jsonl,
        }
    }
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("dataset not found: {0}")]
    FileNotFound(PathBuf),
    #[error("line {line}: {message}")]
    SchemaError { line: usize, message: String },
    #[error("line {line}: record {id} has nurse ESI {value} outside 1-5")]
    LabelError { line: usize, id: String, value: i64 },
    #[error("chunk count must be at least 1 (got {0})")]
    InvalidK(usize),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Deserialize)]
struct RawEncounter {
    id: String,
    age_months: u32,
    chief_complaint: String,
    vital_signs: String,
    physical_exam: String,
    #[serde(default)]
    pivot_assessment: Option<String>,
    pmh: String,
    triage_note: String,
    #[serde(default)]
    nurse_esi: Option<i64>,
}

impl RawEncounter {
    fn validate(self, line: usize) -> Result<TriageEncounter, IngestError> {
        let value = self.nurse_esi.ok_or_else(|| IngestError::SchemaError {
            line,
            message: format!("record {} is missing nurse_esi", self.id),
        })?;
        let nurse_esi = esi_from_int(value).map_err(|_| IngestError::LabelError {
            line,
            id: self.id.clone(),
            value,
        })?;
        Ok(TriageEncounter {
            id: self.id,
            age_months: self.age_months,
            chief_complaint: self.chief_complaint,
            vital_signs: self.vital_signs,
            physical_exam: self.physical_exam,
            pivot_assessment: self.pivot_assessment.filter(|p| !p.trim().is_empty()),
            pmh: self.pmh,
            triage_note: self.triage_note,
            nurse_esi: Some(nurse_esi),
        })
    }
}

/// Loads a labeled dataset, preserving file order.
pub fn load_encounters(path: &Path, format: DatasetFormat) -> Result<Vec<TriageEncounter>, IngestError> {
    let file = File::open(path).map_err(|e| match e.kind() {
        io::ErrorKind::NotFound => IngestError::FileNotFound(path.to_path_buf()),
        _ => IngestError::Io(e),
    })?;
    let records = match format {
        DatasetFormat::Jsonl => load_jsonl(file)?,
        DatasetFormat::Csv => load_csv(file)?,
    };
    let mut seen = HashSet::new();
    for (line, rec) in &records {
        if !seen.insert(rec.id.as_str()) {
            return Err(IngestError::SchemaError {
                line: *line,
                message: format!("duplicate record id {}", rec.id),
            });
        }
    }
    Ok(records.into_iter().map(|(_, r)| r).collect())
}

fn load_jsonl(file: File) -> Result<Vec<(usize, TriageEncounter)>, IngestError> {
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawEncounter = serde_json::from_str(&line).map_err(|e| IngestError::SchemaError {
            line: line_no,
            message: e.to_string(),
        })?;
        out.push((line_no, raw.validate(line_no)?));
    }
    Ok(out)
}

fn load_csv(file: File) -> Result<Vec<(usize, TriageEncounter)>, IngestError> {
    let mut reader = csv::Reader::from_reader(file);
    let headers = reader
        .headers()
        .map_err(|e| IngestError::SchemaError { line: 1, message: e.to_string() })?
        .clone();
    for col in CSV_COLUMNS {
        // nurse_esi may be absent as a value but the column itself is required
        if !headers.iter().any(|h| h == col) {
            return Err(IngestError::SchemaError {
                line: 1,
                message: format!("missing column {col}"),
            });
        }
    }
    let mut out = Vec::new();
    for result in reader.records() {
        let record = result.map_err(|e| IngestError::SchemaError {
            line: e.position().map(|p| p.line() as usize).unwrap_or(0),
            message: e.to_string(),
        })?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        let get = |name: &str| -> String {
            headers
                .iter()
                .position(|h| h == name)
                .and_then(|i| record.get(i))
                .unwrap_or("")
                .to_string()
        };
        let schema = |message: String| IngestError::SchemaError { line, message };
        let age_months = get("age_months")
            .trim()
            .parse::<u32>()
            .map_err(|e| schema(format!("age_months: {e}")))?;
        let esi_text = get("nurse_esi");
        let nurse_esi = if esi_text.trim().is_empty() {
            None
        } else {
            Some(esi_text.trim().parse::<i64>().map_err(|e| schema(format!("nurse_esi: {e}")))?)
        };
        let pivot = get("pivot_assessment");
        let raw = RawEncounter {
            id: get("id"),
            age_months,
            chief_complaint: get("chief_complaint"),
            vital_signs: get("vital_signs"),
            physical_exam: get("physical_exam"),
            pivot_assessment: Some(pivot),
            pmh: get("pmh"),
            triage_note: get("triage_note"),
            nurse_esi,
        };
        out.push((line, raw.validate(line)?));
    }
    Ok(out)
}

/// Writes encounters in the fixed CSV column order.
pub fn write_csv(path: &Path, encounters: &[TriageEncounter]) -> Result<(), IngestError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| IngestError::Io(e.into()))?;
    let to_io = |e: csv::Error| IngestError::Io(e.into());
    w.write_record(CSV_COLUMNS).map_err(to_io)?;
    for e in encounters {
        let age = e.age_months.to_string();
        let esi = e.nurse_esi.map(|l| l.to_string()).unwrap_or_default();
        w.write_record([
            e.id.as_str(),
            age.as_str(),
            e.chief_complaint.as_str(),
            e.vital_signs.as_str(),
            e.physical_exam.as_str(),
            e.pivot_assessment.as_deref().unwrap_or(""),
            e.pmh.as_str(),
            e.triage_note.as_str(),
            esi.as_str(),
        ])
        .map_err(to_io)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurationRules {
    pub placeholder_phrases: BTreeSet<String>,
    pub require_vitals: bool,
    pub require_exam: bool,
    pub exclude_pmh_none: bool,
}

impl Default for CurationRules {
    fn default() -> Self {
        Self {
            placeholder_phrases: ["see pivot", "see triage", "none"].iter().map(|s| s.to_string()).collect(),
            require_vitals: true,
            require_exam: true,
            exclude_pmh_none: true,
        }
    }
}

impl CurationRules {
    /// Case-insensitive match on trimmed text. Empty text counts as a placeholder.
    pub fn is_placeholder(&self, text: &str) -> bool {
        let t = text.trim().to_lowercase();
        t.is_empty() || self.placeholder_phrases.iter().any(|p| p.trim().to_lowercase() == t)
    }

    /// First failing rule in fixed order, or `None` when the record is retained.
    pub fn first_failure(&self, e: &TriageEncounter) -> Option<ExclusionReason> {
        if self.is_placeholder(&e.chief_complaint) {
            return Some(ExclusionReason::PlaceholderComplaint);
        }
        if self.require_vitals && !contains_measurement(&e.vital_signs) {
            return Some(ExclusionReason::MissingVitals);
        }
        if self.require_exam && self.is_placeholder(&e.physical_exam) {
            return Some(ExclusionReason::MissingExam);
        }
        if self.exclude_pmh_none && e.pmh.trim().eq_ignore_ascii_case("none") {
            return Some(ExclusionReason::PmhNone);
        }
        None
    }
}

/// A vital-signs field counts as measured when it holds at least one number.
fn contains_measurement(text: &str) -> bool {
    text.chars().any(|c| c.is_ascii_digit())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExclusionReason {
    PlaceholderComplaint,
    MissingVitals,
    MissingExam,
    PmhNone,
}

impl fmt::Display for ExclusionReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ExclusionReason::PlaceholderComplaint => "placeholder_complaint",
            ExclusionReason::MissingVitals => "missing_vitals",
            ExclusionReason::MissingExam => "missing_exam",
            ExclusionReason::PmhNone => "pmh_none",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exclusion {
    pub id: String,
    pub reason: ExclusionReason,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CuratedSet {
    pub retained: Vec<TriageEncounter>,
    pub excluded: Vec<Exclusion>,
}

pub fn curate(encounters: Vec<TriageEncounter>, rules: &CurationRules) -> CuratedSet {
    let mut set = CuratedSet::default();
    for e in encounters {
        match rules.first_failure(&e) {
            None => set.retained.push(e),
            Some(reason) => set.excluded.push(Exclusion { id: e.id, reason }),
        }
    }
    set
}

/// Splits `records` into `k` contiguous chunks whose sizes differ by at most
/// one; the first `n % k` chunks carry the extra element.
pub fn partition_chunks<T>(records: Vec<T>, k: usize) -> Result<Vec<Vec<T>>, IngestError> {
    if k < 1 {
        return Err(IngestError::InvalidK(k));
    }
    let n = records.len();
    let (base, extra) = (n / k, n % k);
    let mut iter = records.into_iter();
    let chunks = (0..k)
        .map(|i| {
            let size = base + usize::from(i < extra);
            iter.by_ref().take(size).collect()
        })
        .collect();
    Ok(chunks)
}

/// A vignette-generation task for the silver training set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SilverTask {
    pub encounter_id: String,
    pub age_months: u32,
    pub prompt_context: StructuredRecord,
    pub label: EsiLevel,
}

/// One task per labeled encounter with both vital signs and physical exam
/// present. Labels are copied from `nurse_esi` unchanged.
pub fn build_silver_tasks(encounters: &[TriageEncounter]) -> Vec<SilverTask> {
    encounters
        .iter()
        .filter(|e| !e.vital_signs.trim().is_empty() && !e.physical_exam.trim().is_empty())
        .filter_map(|e| {
            Some(SilverTask {
                encounter_id: e.id.clone(),
                age_months: e.age_months,
                prompt_context: e.human_structured(),
                label: e.nurse_esi?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::FieldSource;

    pub(crate) fn enc(id: &str) -> TriageEncounter {
        TriageEncounter {
            id: id.into(),
            age_months: 36,
            chief_complaint: "fever".into(),
            vital_signs: "HR 120, T 38.2".into(),
            physical_exam: "alert, mild distress".into(),
            pivot_assessment: None,
            pmh: "asthma".into(),
            triage_note: "3yo with fever for 2 days".into(),
            nurse_esi: Some(esi_from_int(3).unwrap()),
        }
    }

    #[test]
    fn placeholder_complaint_any_case() {
        let rules = CurationRules::default();
        for cc in ["See Pivot", "  SEE TRIAGE ", "none", ""] {
            let mut e = enc("a");
            e.chief_complaint = cc.into();
            assert_eq!(rules.first_failure(&e), Some(ExclusionReason::PlaceholderComplaint), "{cc:?}");
        }
    }

    #[test]
    fn pmh_none_excluded() {
        let mut e = enc("a");
        e.pmh = "None".into();
        let set = curate(vec![e], &CurationRules::default());
        assert!(set.retained.is_empty());
        assert_eq!(set.excluded[0].reason, ExclusionReason::PmhNone);
    }

    #[test]
    fn substantive_record_retained() {
        let set = curate(vec![enc("a")], &CurationRules::default());
        assert_eq!(set.retained.len(), 1);
        assert!(set.excluded.is_empty());
    }

    #[test]
    fn vitals_need_a_number() {
        let rules = CurationRules::default();
        let mut e = enc("a");
        e.vital_signs = "not obtained".into();
        assert_eq!(rules.first_failure(&e), Some(ExclusionReason::MissingVitals));
        let relaxed = CurationRules { require_vitals: false, ..CurationRules::default() };
        assert_eq!(relaxed.first_failure(&e), None);
    }

    #[test]
    fn first_failure_wins() {
        let mut e = enc("a");
        e.chief_complaint = "see pivot".into();
        e.pmh = "none".into();
        e.physical_exam = String::new();
        assert_eq!(
            CurationRules::default().first_failure(&e),
            Some(ExclusionReason::PlaceholderComplaint)
        );
    }

    #[test]
    fn chunk_examples() {
        let chunks = partition_chunks((0..20).collect::<Vec<_>>(), 10).unwrap();
        assert!(chunks.iter().all(|c| c.len() == 2));

        let sizes: Vec<usize> = partition_chunks((0..23).collect::<Vec<_>>(), 10)
            .unwrap()
            .iter()
            .map(Vec::len)
            .collect();
        assert_eq!(sizes, vec![3, 3, 3, 2, 2, 2, 2, 2, 2, 2]);

        assert!(matches!(partition_chunks(vec![1], 0), Err(IngestError::InvalidK(0))));
        let empty = partition_chunks(Vec::<u8>::new(), 3).unwrap();
        assert_eq!(empty.len(), 3);
    }

    #[test]
    fn silver_tasks() {
        let mut missing = enc("b");
        missing.vital_signs = "  ".into();
        let tasks = build_silver_tasks(&[enc("a"), missing]);
        assert_eq!(tasks.len(), 1);
        assert_eq!(tasks[0].label.value(), 3);
        assert_eq!(tasks[0].prompt_context.source, FieldSource::Human);
        assert!(build_silver_tasks(&[]).is_empty());
    }

    #[test]
    fn format_from_extension() {
        assert_eq!(DatasetFormat::from_path(Path::new("a/b.CSV")), DatasetFormat::Csv);
        assert_eq!(DatasetFormat::from_path(Path::new("a/b.jsonl")), DatasetFormat::Jsonl);
    }
}
