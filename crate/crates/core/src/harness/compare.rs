use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::LoadedRun;
use crate::domain::EsiLevel;
use crate::metrics::EvalReport;
use crate::pipelines::Prediction;

#[derive(Debug, Error, PartialEq, Eq)]
#[error("runs cover different encounters ({} only in a, {} only in b)", only_in_a.len(), only_in_b.len())]
pub struct CompareError {
    pub only_in_a: Vec<String>,
    pub only_in_b: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricDelta {
    pub metric: String,
    pub a: f64,
    pub b: f64,
    /// `b - a`.
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncounterChange {
    pub encounter_id: String,
    pub nurse_esi: Option<EsiLevel>,
    pub a: Prediction,
    pub b: Prediction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunComparison {
    pub n_encounters: usize,
    pub deltas: Vec<MetricDelta>,
    pub changed: Vec<EncounterChange>,
}

fn metric_values(r: &EvalReport) -> [(&'static str, f64); 7] {
    [
        ("total_discordance", r.total_discordance.rate),
        ("undertriage", r.undertriage.rate),
        ("overtriage", r.overtriage.rate),
        ("significant_undertriage", r.significant_undertriage.rate),
        ("significant_overtriage", r.significant_overtriage.rate),
        ("failure_rate", r.failure_rate.rate),
        ("mean_latency_seconds", r.mean_latency_seconds),
    ]
}

/// Per-metric deltas and per-encounter prediction changes, in `a`'s order.
pub fn compare_runs(a: &LoadedRun, b: &LoadedRun) -> Result<RunComparison, CompareError> {
    let ids_a: BTreeSet<&str> = a.records.iter().map(|r| r.encounter_id.as_str()).collect();
    let ids_b: BTreeSet<&str> = b.records.iter().map(|r| r.encounter_id.as_str()).collect();
    if ids_a != ids_b {
        return Err(CompareError {
            only_in_a: ids_a.difference(&ids_b).map(|s| s.to_string()).collect(),
            only_in_b: ids_b.difference(&ids_a).map(|s| s.to_string()).collect(),
        });
    }
    let deltas = metric_values(&a.artifact.report)
        .into_iter()
        .zip(metric_values(&b.artifact.report))
        .map(|((name, va), (_, vb))| MetricDelta { metric: name.to_string(), a: va, b: vb, delta: vb - va })
        .collect();
    let by_id: HashMap<&str, Prediction> = b.records.iter().map(|r| (r.encounter_id.as_str(), r.predicted)).collect();
    let changed = a
        .records
        .iter()
        .filter_map(|r| {
            let other = by_id[r.encounter_id.as_str()];
            (other != r.predicted).then(|| EncounterChange {
                encounter_id: r.encounter_id.clone(),
                nurse_esi: r.nurse_esi,
                a: r.predicted,
                b: other,
            })
        })
        .collect();
    Ok(RunComparison { n_encounters: a.records.len(), deltas, changed })
}

fn show(p: Prediction) -> String {
    match p.level() {
        Some(l) => l.to_string(),
        None => "parse_failure".to_string(),
    }
}

pub fn render_comparison(c: &RunComparison) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<26} {:>10} {:>10} {:>10}", "metric", "a", "b", "b-a");
    for d in &c.deltas {
        if d.metric == "mean_latency_seconds" {
            let _ = writeln!(out, "{:<26} {:>10.2} {:>10.2} {:>+10.2}", d.metric, d.a, d.b, d.delta);
        } else {
            let _ = writeln!(
                out,
                "{:<26} {:>9.2}% {:>9.2}% {:>+9.2}%",
                d.metric,
                d.a * 100.0,
                d.b * 100.0,
                d.delta * 100.0
            );
        }
    }
    let _ = writeln!(out, "changed encounters: {} of {}", c.changed.len(), c.n_encounters);
    for ch in &c.changed {
        let truth = ch.nurse_esi.map(|l| l.to_string()).unwrap_or_else(|| "-".into());
        let _ = writeln!(out, "  {} (nurse {}): {} -> {}", ch.encounter_id, truth, show(ch.a), show(ch.b));
    }
    out
}
