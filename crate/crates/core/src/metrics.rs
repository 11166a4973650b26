//! Triage-error rates, timing, report rendering and saliency aggregation.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::classify_error;
use crate::pipelines::{Ablation, PipelineKind, PredictionRecord};

pub const REPORT_SCHEMA_VERSION: &str = "eval-report/1";

/// Column headers of the text table, in display order.
pub const REPORT_COLUMNS: [&str; 6] = ["Discordance", "Under", "Over", "Sig.Under", "Sig.Over", "Time(s)"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rate {
    pub count: u64,
    pub rate: f64,
}

impl Rate {
    pub fn of(count: u64, denominator: u64) -> Self {
        let rate = if denominator == 0 { 0.0 } else { count as f64 / denominator as f64 };
        Self { count, rate }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub pipeline: PipelineKind,
    pub strategy: String,
    pub backend_id: String,
    pub ablation: Ablation,
    pub prompt_pack_version: String,
    pub predictions_digest: String,
    pub reproducible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: String,
    pub n_scored: u64,
    pub n_failed: u64,
    /// Records without a reference label; neither scored nor failed.
    pub n_unlabeled: u64,
    pub total_discordance: Rate,
    pub undertriage: Rate,
    pub overtriage: Rate,
    pub significant_undertriage: Rate,
    pub significant_overtriage: Rate,
    /// Parse failures over all labeled records.
    pub failure_rate: Rate,
    pub mean_latency_seconds: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<RunMeta>,
}

impl EvalReport {
    pub fn empty() -> Self {
        compute_metrics(&[])
    }
}

pub fn compute_metrics(records: &[PredictionRecord]) -> EvalReport {
    let (mut scored, mut failed, mut unlabeled) = (0u64, 0u64, 0u64);
    let (mut disc, mut under, mut over, mut sig_under, mut sig_over) = (0u64, 0u64, 0u64, 0u64, 0u64);
    let mut latency = 0.0;
    for r in records {
        let Some(truth) = r.nurse_esi else {
            unlabeled += 1;
            continue;
        };
        let Some(pred) = r.predicted.level() else {
            failed += 1;
            continue;
        };
        scored += 1;
        latency += r.latency_seconds;
        let c = classify_error(truth, pred);
        disc += u64::from(!c.concordant);
        under += u64::from(c.undertriage);
        over += u64::from(c.overtriage);
        sig_under += u64::from(c.significant_undertriage);
        sig_over += u64::from(c.significant_overtriage);
    }
    EvalReport {
        schema_version: REPORT_SCHEMA_VERSION.to_string(),
        n_scored: scored,
        n_failed: failed,
        n_unlabeled: unlabeled,
        total_discordance: Rate::of(disc, scored),
        undertriage: Rate::of(under, scored),
        overtriage: Rate::of(over, scored),
        significant_undertriage: Rate::of(sig_under, scored),
        significant_overtriage: Rate::of(sig_over, scored),
        failure_rate: Rate::of(failed, scored + failed),
        mean_latency_seconds: if scored == 0 { 0.0 } else { latency / scored as f64 },
        meta: None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    TextTable,
    Markdown,
    Json,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "text" | "text_table" => Ok(Self::TextTable),
            "markdown" | "md" => Ok(Self::Markdown),
            "json" => Ok(Self::Json),
            other => Err(format!("unknown report format '{other}'")),
        }
    }
}

fn pct(r: &Rate) -> String {
    format!("{:.2}%", r.rate * 100.0)
}

fn row_cells(report: &EvalReport) -> [String; 6] {
    [
        pct(&report.total_discordance),
        pct(&report.undertriage),
        pct(&report.overtriage),
        pct(&report.significant_undertriage),
        pct(&report.significant_overtriage),
        format!("{:.2}", report.mean_latency_seconds),
    ]
}

/// The metric row alone, cells separated by single spaces.
pub fn report_row(report: &EvalReport) -> String {
    row_cells(report).join(" ")
}

pub fn render_report(report: &EvalReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::TextTable => {
            let mut out = String::new();
            let _ = writeln!(out, "{}", REPORT_COLUMNS.join(" "));
            let _ = writeln!(out, "{}", report_row(report));
            let _ = writeln!(
                out,
                "scored={} failed={} unlabeled={}",
                report.n_scored, report.n_failed, report.n_unlabeled
            );
            out
        }
        ReportFormat::Markdown => {
            let mut out = String::new();
            let _ = writeln!(out, "| {} |", REPORT_COLUMNS.join(" | "));
            let _ = writeln!(out, "|{}", "---|".repeat(REPORT_COLUMNS.len()));
            let _ = writeln!(out, "| {} |", row_cells(report).join(" | "));
            let _ = writeln!(out);
            let _ = writeln!(
                out,
                "Scored: {}, parse failures: {} ({}), unlabeled: {}",
                report.n_scored,
                report.n_failed,
                pct(&report.failure_rate),
                report.n_unlabeled
            );
            out
        }
        ReportFormat::Json => {
            let mut s = serde_json::to_string_pretty(report).expect("report serializes");
            s.push('\n');
            s
        }
    }
}

#[derive(Debug, Error, PartialEq)]
#[error("record {encounter_id}: {tokens} tokens but {scores} scores")]
pub struct ShapeMismatch {
    pub encounter_id: String,
    pub tokens: usize,
    pub scores: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenScore {
    pub token: String,
    pub mean_score: f64,
    pub occurrences: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SaliencyGroup {
    pub n_records: u64,
    /// Every token seen in the group, alphabetical.
    pub tokens: Vec<TokenScore>,
    /// Highest mean score first; ties alphabetical.
    pub top: Vec<TokenScore>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SaliencySummary {
    pub correct: SaliencyGroup,
    pub incorrect: SaliencyGroup,
}

#[derive(Default)]
struct Accumulator {
    n_records: u64,
    sums: BTreeMap<String, (f64, u64)>,
}

impl Accumulator {
    fn finish(self, top_k: usize) -> SaliencyGroup {
        let tokens: Vec<TokenScore> = self
            .sums
            .into_iter()
            .map(|(token, (sum, n))| TokenScore { token, mean_score: sum / n as f64, occurrences: n })
            .collect();
        let mut top = tokens.clone();
        top.sort_by(|a, b| b.mean_score.total_cmp(&a.mean_score).then_with(|| a.token.cmp(&b.token)));
        top.truncate(top_k);
        SaliencyGroup { n_records: self.n_records, tokens, top }
    }
}

/// Mean saliency per token, split by whether the prediction matched the
/// label. Records without saliency, label or parsed level are skipped.
pub fn aggregate_token_saliency(
    records: &[PredictionRecord],
    top_k: usize,
    only_esi_2_3: bool,
) -> Result<SaliencySummary, ShapeMismatch> {
    let mut correct = Accumulator::default();
    let mut incorrect = Accumulator::default();
    for r in records {
        let Some(sal) = &r.saliency else { continue };
        if sal.tokens.len() != sal.scores.len() {
            return Err(ShapeMismatch {
                encounter_id: r.encounter_id.clone(),
                tokens: sal.tokens.len(),
                scores: sal.scores.len(),
            });
        }
        let (Some(truth), Some(pred)) = (r.nurse_esi, r.predicted.level()) else { continue };
        if only_esi_2_3 && !matches!(truth.value(), 2 | 3) {
            continue;
        }
        let acc = if truth == pred { &mut correct } else { &mut incorrect };
        acc.n_records += 1;
        for (t, s) in sal.tokens.iter().zip(&sal.scores) {
            let e = acc.sums.entry(t.clone()).or_insert((0.0, 0));
            e.0 += s;
            e.1 += 1;
        }
    }
    Ok(SaliencySummary { correct: correct.finish(top_k), incorrect: incorrect.finish(top_k) })
}
