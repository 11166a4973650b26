//! The six prompting pipelines, missing-information ablations, and the
//! composition of a pipeline with a prediction strategy (single call,
//! persona ensemble, or retrieval-augmented call).

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::backend::{ask_for_level, Backend, BackendError, CompletionRequest, PromptPack, TemplateError, TemplateId};
use crate::domain::{
    ClinicalVignette, EsiLevel, FieldSource, StructuredRecord, TokenSaliency, TriageEncounter, VignetteOrigin,
};
use crate::ensemble::{run_ensemble, EnsembleError, EnsembleOptions, EnsembleTrace};
use crate::rag::{augment_prompt, retrieve, LexicalIndex, RagTrace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineKind {
    NoteToEsi,
    NoteToVignetteToEsi,
    HumanStructuredToEsi,
    NoteToStructuredToEsi,
    HumanStructuredToVignetteToEsi,
    ModelStructuredToVignetteToEsi,
}

impl PipelineKind {
    pub const ALL: [PipelineKind; 6] = [
        PipelineKind::NoteToEsi,
        PipelineKind::NoteToVignetteToEsi,
        PipelineKind::HumanStructuredToEsi,
        PipelineKind::NoteToStructuredToEsi,
        PipelineKind::HumanStructuredToVignetteToEsi,
        PipelineKind::ModelStructuredToVignetteToEsi,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PipelineKind::NoteToEsi => "note_to_esi",
            PipelineKind::NoteToVignetteToEsi => "note_to_vignette_to_esi",
            PipelineKind::HumanStructuredToEsi => "human_structured_to_esi",
            PipelineKind::NoteToStructuredToEsi => "note_to_structured_to_esi",
            PipelineKind::HumanStructuredToVignetteToEsi => "human_structured_to_vignette_to_esi",
            PipelineKind::ModelStructuredToVignetteToEsi => "model_structured_to_vignette_to_esi",
        }
    }

    /// Stages in execution order; the last is always the prediction.
    pub fn stages(self) -> &'static [Stage] {
        use Stage::*;
        match self {
            PipelineKind::NoteToEsi | PipelineKind::HumanStructuredToEsi => &[Predict],
            PipelineKind::NoteToVignetteToEsi | PipelineKind::HumanStructuredToVignetteToEsi => {
                &[GenerateVignette, Predict]
            }
            PipelineKind::NoteToStructuredToEsi => &[ExtractStructured, Predict],
            PipelineKind::ModelStructuredToVignetteToEsi => &[ExtractStructured, GenerateVignette, Predict],
        }
    }

    pub fn reads_note(self) -> bool {
        matches!(
            self,
            PipelineKind::NoteToEsi
                | PipelineKind::NoteToVignetteToEsi
                | PipelineKind::NoteToStructuredToEsi
                | PipelineKind::ModelStructuredToVignetteToEsi
        )
    }

    pub fn produces_vignette(self) -> bool {
        self.stages().contains(&Stage::GenerateVignette)
    }

    pub fn extracts_structured(self) -> bool {
        self.stages().contains(&Stage::ExtractStructured)
    }

    /// Encounter fields that must be non-empty before ablation.
    pub fn required_fields(self) -> &'static [&'static str] {
        if self.reads_note() {
            &["triage_note"]
        } else {
            &["chief_complaint", "vital_signs", "physical_exam"]
        }
    }
}

impl fmt::Display for PipelineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    ExtractStructured,
    GenerateVignette,
    Predict,
    AgentRound,
    Debate,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::ExtractStructured => "extract_structured",
            Stage::GenerateVignette => "generate_vignette",
            Stage::Predict => "predict",
            Stage::AgentRound => "agent_round",
            Stage::Debate => "debate",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    None,
    DropVitals,
    DropExam,
}

impl Ablation {
    pub const ALL: [Ablation; 3] = [Ablation::None, Ablation::DropVitals, Ablation::DropExam];

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::DropVitals => "drop_vitals",
            Ablation::DropExam => "drop_exam",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Empties the targeted field; every other field is untouched.
pub fn apply_ablation(mut e: TriageEncounter, a: Ablation) -> TriageEncounter {
    match a {
        Ablation::None => {}
        Ablation::DropVitals => e.vital_signs.clear(),
        Ablation::DropExam => e.physical_exam.clear(),
    }
    e
}

/// A parsed level, or the marker for output that never yielded one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Prediction {
    Level(EsiLevel),
    ParseFailure,
}

impl Prediction {
    pub fn level(self) -> Option<EsiLevel> {
        match self {
            Prediction::Level(l) => Some(l),
            Prediction::ParseFailure => None,
        }
    }
}

impl From<Option<EsiLevel>> for Prediction {
    fn from(level: Option<EsiLevel>) -> Self {
        level.map_or(Prediction::ParseFailure, Prediction::Level)
    }
}

const PARSE_FAILURE: &str = "parse_failure";

impl Serialize for Prediction {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Prediction::Level(l) => l.serialize(s),
            Prediction::ParseFailure => s.serialize_str(PARSE_FAILURE),
        }
    }
}

impl<'de> Deserialize<'de> for Prediction {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Level(EsiLevel),
            Marker(String),
        }
        match Raw::deserialize(d)? {
            Raw::Level(l) => Ok(Prediction::Level(l)),
            Raw::Marker(m) if m == PARSE_FAILURE => Ok(Prediction::ParseFailure),
            Raw::Marker(m) => Err(serde::de::Error::custom(format!("invalid prediction {m:?}"))),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Intermediates {
    pub structured: Option<StructuredRecord>,
    pub vignette: Option<ClinicalVignette>,
}

/// Full provenance of one prediction. Field order is the JSONL order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub encounter_id: String,
    pub pipeline: PipelineKind,
    pub ablation: Ablation,
    pub predicted: Prediction,
    pub nurse_esi: Option<EsiLevel>,
    pub intermediates: Intermediates,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ensemble: Option<EnsembleTrace>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rag: Option<RagTrace>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub saliency: Option<TokenSaliency>,
    pub raw_model_text: String,
    pub latency_seconds: f64,
    pub backend_id: String,
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{kind} requires a non-empty {field}")]
    MissingField { kind: PipelineKind, field: &'static str },
    #[error("stage {stage} failed: {source}")]
    Backend {
        stage: Stage,
        #[source]
        source: BackendError,
    },
    #[error("vignette generation returned blank text twice")]
    EmptyVignette,
    #[error("vignette generation needs at least one non-empty clinical field")]
    NoVignetteSource,
    #[error("ensemble prediction requires a vignette pipeline, got {0}")]
    EnsembleNeedsVignette(PipelineKind),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
}

impl PipelineError {
    pub fn backend_error(&self) -> Option<&BackendError> {
        match self {
            PipelineError::Backend { source, .. } => Some(source),
            PipelineError::Ensemble(EnsembleError::Backend { source, .. }) => Some(source),
            _ => None,
        }
    }
}

/// Backend plus prompt pack; cheap to clone and share across tasks.
#[derive(Clone)]
pub struct PipelineContext {
    pub backend: Arc<dyn Backend>,
    pub prompts: Arc<PromptPack>,
}

impl PipelineContext {
    pub fn new(backend: Arc<dyn Backend>, prompts: Arc<PromptPack>) -> Self {
        Self { backend, prompts }
    }

    pub(crate) fn request(&self, task: TemplateId, bindings: &[(&str, &str)], case_text: &str) -> Result<CompletionRequest, TemplateError> {
        Ok(CompletionRequest {
            task,
            prompt: self.prompts.get(task).render(bindings)?,
            case_text: case_text.to_string(),
        })
    }
}

/// Parses labeled `Chief Complaint:` / `Vital Signs:` / `Physical Exam:`
/// sections. Lines after a header continue its section until the next header.
/// A missing section yields an empty field.
pub fn parse_structured_sections(text: &str) -> StructuredRecord {
    const HEADERS: [&str; 3] = ["chief complaint", "vital signs", "physical exam"];
    let mut fields: [Vec<String>; 3] = Default::default();
    let mut current: Option<usize> = None;
    for line in text.lines() {
        let stripped = line.trim().trim_start_matches(['-', '*', '#', ' ']);
        let lower = stripped.to_lowercase();
        let header = HEADERS.iter().position(|h| lower.starts_with(h));
        match header {
            Some(i) => {
                let rest = stripped[HEADERS[i].len()..].trim_start_matches(['*', ' ']);
                let rest = rest.strip_prefix(':').unwrap_or(rest).trim_start_matches('*').trim();
                current = Some(i);
                if !rest.is_empty() {
                    fields[i].push(rest.to_string());
                }
            }
            None => {
                if let (Some(i), false) = (current, stripped.is_empty()) {
                    fields[i].push(stripped.to_string());
                }
            }
        }
    }
    let [cc, vs, pe] = fields.map(|f| f.join(" "));
    StructuredRecord { chief_complaint: cc, vital_signs: vs, physical_exam: pe, source: FieldSource::Model }
}

/// Stage output with the time spent producing it.
#[derive(Debug, Clone, PartialEq)]
pub struct Timed<T> {
    pub value: T,
    pub latency_seconds: f64,
}

pub async fn extract_structured(ctx: &PipelineContext, e: &TriageEncounter) -> Result<Timed<StructuredRecord>, PipelineError> {
    if e.triage_note.trim().is_empty() {
        return Err(PipelineError::MissingField { kind: PipelineKind::NoteToStructuredToEsi, field: "triage_note" });
    }
    let req = ctx.request(TemplateId::ExtractStructured, &[("note", &e.triage_note)], &e.triage_note)?;
    let completion = ctx
        .backend
        .complete(&req)
        .await
        .map_err(|source| PipelineError::Backend { stage: Stage::ExtractStructured, source })?;
    Ok(Timed { value: parse_structured_sections(&completion.text), latency_seconds: completion.latency_seconds })
}

/// What a vignette is generated from.
#[derive(Debug, Clone, Copy)]
pub enum VignetteSource<'a> {
    Note(&'a TriageEncounter),
    Structured { record: &'a StructuredRecord, age_months: u32 },
}

pub async fn generate_vignette(ctx: &PipelineContext, source: VignetteSource<'_>) -> Result<Timed<ClinicalVignette>, PipelineError> {
    let (age, input, origin) = match source {
        VignetteSource::Note(e) => {
            if e.triage_note.trim().is_empty() {
                return Err(PipelineError::NoVignetteSource);
            }
            (e.age_text(), e.triage_note.clone(), VignetteOrigin::RawNote)
        }
        VignetteSource::Structured { record, age_months } => {
            if !record.has_content() {
                return Err(PipelineError::NoVignetteSource);
            }
            let origin = match record.source {
                FieldSource::Human => VignetteOrigin::HumanStructured,
                FieldSource::Model => VignetteOrigin::ModelStructured,
            };
            let age = TriageEncounter { age_months, ..blank_encounter() }.age_text();
            (age, record.to_prompt_block(), origin)
        }
    };
    let req = ctx.request(TemplateId::GenerateVignette, &[("age", &age), ("clinical_input", &input)], &input)?;
    let mut latency = 0.0;
    for _ in 0..2 {
        let completion = ctx
            .backend
            .complete(&req)
            .await
            .map_err(|source| PipelineError::Backend { stage: Stage::GenerateVignette, source })?;
        latency += completion.latency_seconds;
        let text = completion.text.trim();
        if !text.is_empty() {
            return Ok(Timed {
                value: ClinicalVignette { text: text.to_string(), derived_from: origin },
                latency_seconds: latency,
            });
        }
    }
    Err(PipelineError::EmptyVignette)
}

fn blank_encounter() -> TriageEncounter {
    TriageEncounter {
        id: String::new(),
        age_months: 0,
        chief_complaint: String::new(),
        vital_signs: String::new(),
        physical_exam: String::new(),
        pivot_assessment: None,
        pmh: String::new(),
        triage_note: String::new(),
        nurse_esi: None,
    }
}

/// How the final level is produced.
#[derive(Clone, Default)]
pub enum Strategy {
    #[default]
    Plain,
    Ensemble(EnsembleOptions),
    Rag { index: Arc<LexicalIndex>, k: usize },
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Plain => "plain",
            Strategy::Ensemble(_) => "ensemble",
            Strategy::Rag { .. } => "rag",
        }
    }
}

/// Checks the kind's field requirements and strategy compatibility.
pub fn check_preconditions(kind: PipelineKind, e: &TriageEncounter, strategy: &Strategy) -> Result<(), PipelineError> {
    if matches!(strategy, Strategy::Ensemble(_)) && !kind.produces_vignette() {
        return Err(PipelineError::EnsembleNeedsVignette(kind));
    }
    for &field in kind.required_fields() {
        let value = match field {
            "triage_note" => &e.triage_note,
            "chief_complaint" => &e.chief_complaint,
            "vital_signs" => &e.vital_signs,
            _ => &e.physical_exam,
        };
        if value.trim().is_empty() {
            return Err(PipelineError::MissingField { kind, field });
        }
    }
    Ok(())
}

/// Final-stage input: the template to use and the clinical text it carries.
enum FinalInput {
    Note { age: String, note: String },
    Structured { age: String, block: String },
    Vignette(String),
}

impl FinalInput {
    fn case_text(&self) -> String {
        match self {
            FinalInput::Note { age, note } => format!("Patient age: {age}\nTriage note:\n{note}"),
            FinalInput::Structured { age, block } => format!("Patient age: {age}\n{block}"),
            FinalInput::Vignette(v) => v.clone(),
        }
    }

    fn request(&self, ctx: &PipelineContext) -> Result<CompletionRequest, TemplateError> {
        match self {
            FinalInput::Note { age, note } => ctx.request(TemplateId::PredictFromNote, &[("age", age), ("note", note)], note),
            FinalInput::Structured { age, block } => {
                ctx.request(TemplateId::PredictFromStructured, &[("age", age), ("structured", block)], block)
            }
            FinalInput::Vignette(v) => ctx.request(TemplateId::PredictFromVignette, &[("vignette", v)], v),
        }
    }
}

/// Runs `kind` on the ablated encounter with a single prediction call.
pub async fn run_pipeline(
    ctx: &PipelineContext,
    kind: PipelineKind,
    e: &TriageEncounter,
    ablation: Ablation,
) -> Result<PredictionRecord, PipelineError> {
    run_with_strategy(ctx, kind, e, ablation, &Strategy::Plain).await
}

/// Runs the kind's stages in order on the ablated encounter, then produces the
/// final level with `strategy`. Stage latencies are summed.
pub async fn run_with_strategy(
    ctx: &PipelineContext,
    kind: PipelineKind,
    encounter: &TriageEncounter,
    ablation: Ablation,
    strategy: &Strategy,
) -> Result<PredictionRecord, PipelineError> {
    check_preconditions(kind, encounter, strategy)?;
    let e = apply_ablation(encounter.clone(), ablation);
    let mut latency = 0.0;
    let mut intermediates = Intermediates::default();

    let structured = if kind.extracts_structured() {
        let out = extract_structured(ctx, &e).await?;
        latency += out.latency_seconds;
        intermediates.structured = Some(out.value.clone());
        Some(out.value)
    } else if kind.reads_note() {
        None
    } else {
        Some(e.human_structured())
    };

    let final_input = if kind.produces_vignette() {
        let source = match &structured {
            Some(record) => VignetteSource::Structured { record, age_months: e.age_months },
            None => VignetteSource::Note(&e),
        };
        let out = generate_vignette(ctx, source).await?;
        latency += out.latency_seconds;
        let text = out.value.text.clone();
        intermediates.vignette = Some(out.value);
        FinalInput::Vignette(text)
    } else if let Some(record) = &structured {
        FinalInput::Structured { age: e.age_text(), block: record.to_prompt_block() }
    } else {
        FinalInput::Note { age: e.age_text(), note: e.triage_note.clone() }
    };

    let mut record = PredictionRecord {
        encounter_id: e.id.clone(),
        pipeline: kind,
        ablation,
        predicted: Prediction::ParseFailure,
        nurse_esi: e.nurse_esi,
        intermediates,
        ensemble: None,
        rag: None,
        saliency: None,
        raw_model_text: String::new(),
        latency_seconds: 0.0,
        backend_id: ctx.backend.id().to_string(),
    };

    match strategy {
        Strategy::Plain => {
            let req = final_input.request(ctx)?;
            let answer = ask_for_level(ctx.backend.as_ref(), req)
                .await
                .map_err(|source| PipelineError::Backend { stage: Stage::Predict, source })?;
            latency += answer.latency_seconds;
            record.predicted = answer.level.into();
            record.raw_model_text = answer.text;
            record.saliency = answer.saliency;
        }
        Strategy::Rag { index, k } => {
            let case = final_input.case_text();
            let hits = retrieve(index, &case, *k);
            let base = ctx.prompts.get(TemplateId::RagPredict).render(&[("case", &case)])?;
            let passages: Vec<_> = hits.iter().map(|h| h.passage.clone()).collect();
            let req = CompletionRequest {
                task: TemplateId::RagPredict,
                prompt: augment_prompt(&base, &passages),
                case_text: case,
            };
            let answer = ask_for_level(ctx.backend.as_ref(), req)
                .await
                .map_err(|source| PipelineError::Backend { stage: Stage::Predict, source })?;
            latency += answer.latency_seconds;
            record.predicted = answer.level.into();
            record.raw_model_text = answer.text;
            record.saliency = answer.saliency;
            record.rag = Some(RagTrace::from_hits(*k, &hits));
        }
        Strategy::Ensemble(opts) => {
            let vignette = record
                .intermediates
                .vignette
                .clone()
                .expect("ensemble strategy is only allowed on vignette pipelines");
            let outcome = run_ensemble(ctx, &vignette, *opts).await?;
            latency += outcome.latency_seconds;
            record.predicted = Prediction::Level(outcome.predicted);
            record.raw_model_text = outcome.raw_text();
            record.ensemble = Some(outcome.trace);
        }
    }
    record.latency_seconds = latency;
    Ok(record)
}
