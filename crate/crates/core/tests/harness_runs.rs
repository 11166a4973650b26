mod common;

use common::{fixture, golden_config, golden_digest};
use triage_core::backend::BackendSpec;
use triage_core::harness::{compare_runs, run_eval, HarnessError, LoadedRun, RunStatus};
use triage_core::metrics::compute_metrics;
use triage_core::pipelines::Prediction;

#[tokio::test]
async fn golden_digest_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let artifact = run_eval(&golden_config(dir.path(), 4)).await.unwrap();
    assert_eq!(artifact.status, RunStatus::Complete);
    assert_eq!(artifact.predictions_digest, golden_digest());

    let golden: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(fixture("golden_report.json")).unwrap()).unwrap();
    let r = &artifact.report;
    assert_eq!(r.n_scored, golden["n_scored"].as_u64().unwrap());
    assert_eq!(r.total_discordance.count, golden["total_discordance"].as_u64().unwrap());
    assert_eq!(r.undertriage.count, golden["undertriage"].as_u64().unwrap());
    assert_eq!(r.overtriage.count, golden["overtriage"].as_u64().unwrap());
    assert_eq!(r.significant_undertriage.count, golden["significant_undertriage"].as_u64().unwrap());
    assert_eq!(r.significant_overtriage.count, golden["significant_overtriage"].as_u64().unwrap());
    assert!(r.meta.as_ref().unwrap().reproducible);
}

#[tokio::test]
async fn report_matches_persisted_predictions() {
    let dir = tempfile::tempdir().unwrap();
    run_eval(&golden_config(dir.path(), 2)).await.unwrap();
    let loaded = LoadedRun::load(dir.path()).unwrap();
    let mut recomputed = compute_metrics(&loaded.records);
    recomputed.meta = loaded.artifact.report.meta.clone();
    assert_eq!(recomputed, loaded.artifact.report);
}

#[tokio::test]
async fn parallelism_does_not_change_order() {
    for cap in [1, 4, 16] {
        let dir = tempfile::tempdir().unwrap();
        let artifact = run_eval(&golden_config(dir.path(), cap)).await.unwrap();
        assert_eq!(artifact.predictions_digest, golden_digest(), "cap {cap}");
    }
}

#[tokio::test]
async fn scripted_miss_writes_partial_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.jsonl");
    std::fs::write(&empty, "").unwrap();
    let mut config = golden_config(&dir.path().join("out"), 1);
    config.backend = BackendSpec::Scripted { fixture: empty };
    let err = run_eval(&config).await.unwrap_err();
    assert_eq!(err.exit_code(), 4);
    let loaded = LoadedRun::load(&dir.path().join("out")).unwrap();
    assert!(matches!(loaded.artifact.status, RunStatus::Partial { ref failed_encounter, .. } if failed_encounter == "E1"));
    assert!(loaded.records.is_empty());
}

#[tokio::test]
async fn missing_dataset_is_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = golden_config(dir.path(), 1);
    config.dataset.path = dir.path().join("absent.jsonl");
    let err = run_eval(&config).await.unwrap_err();
    assert!(matches!(err, HarnessError::Config(_)));
    assert_eq!(err.exit_code(), 2);
}

#[tokio::test]
async fn curation_applies_before_prediction() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = golden_config(dir.path(), 4);
    config.dataset.path = fixture("curation_12.jsonl");
    config.dataset.curate = true;
    let artifact = run_eval(&config).await.unwrap();
    assert_eq!(artifact.n_encounters, 8);
    assert_eq!(artifact.excluded.len(), 4);
}

#[tokio::test]
async fn compare_identical_and_ablated_runs() {
    let a_dir = tempfile::tempdir().unwrap();
    let b_dir = tempfile::tempdir().unwrap();
    run_eval(&golden_config(a_dir.path(), 4)).await.unwrap();
    run_eval(&golden_config(b_dir.path(), 4)).await.unwrap();
    let a = LoadedRun::load(a_dir.path()).unwrap();
    let b = LoadedRun::load(b_dir.path()).unwrap();
    let same = compare_runs(&a, &b).unwrap();
    assert!(same.changed.is_empty());
    assert!(same.deltas.iter().filter(|d| d.metric != "mean_latency_seconds").all(|d| d.delta == 0.0));

    let mut edited = b.clone();
    edited.records[2].predicted = Prediction::ParseFailure;
    let diff = compare_runs(&a, &edited).unwrap();
    assert_eq!(diff.changed.len(), 1);
    assert_eq!(diff.changed[0].encounter_id, "E3");

    let mut other = b.clone();
    other.records[0].encounter_id = "Z9".into();
    let err = compare_runs(&a, &other).unwrap_err();
    assert_eq!(err.only_in_a, vec!["E1".to_string()]);
    assert_eq!(err.only_in_b, vec!["Z9".to_string()]);
}

#[tokio::test]
async fn csv_and_jsonl_datasets_agree() {
    let a_dir = tempfile::tempdir().unwrap();
    let b_dir = tempfile::tempdir().unwrap();
    let a = run_eval(&golden_config(a_dir.path(), 4)).await.unwrap();
    let mut config = golden_config(b_dir.path(), 4);
    config.dataset.path = fixture("demo_encounters.csv");
    let b = run_eval(&config).await.unwrap();
    assert_eq!(a.predictions_digest, b.predictions_digest);
}
