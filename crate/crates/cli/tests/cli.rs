use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures").join(name)
}

fn triage(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_triage")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let text = format!(
        "version = 1\noutput_dir = \"{out}\"\nparallelism = 4\n\n[dataset]\npath = \"{data}\"\n\n[pipeline]\nkind = \"note_to_esi\"\n\n[backend]\nkind = \"heuristic\"\n{extra}",
        out = dir.join("run").display(),
        data = fixture("demo_encounters.jsonl").display(),
    );
    let path = dir.join("run.toml");
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn validate_accepts_golden_config() {
    let out = triage(&["validate", fixture("golden_run.toml").to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).starts_with("ok: pipeline=note_to_esi"));
}

#[test]
fn conflicting_strategies_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        &format!("\n[ensemble]\nn_agents = 3\nrounds = 1\n\n[rag]\ncorpus = \"{}\"\n", fixture("toy_corpus.jsonl").display()),
    );
    let out = triage(&["validate", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_key_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "\n[extras]\nfoo = 1\n");
    assert_eq!(triage(&["run", cfg.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn run_then_report_and_compare() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = triage(&["run", cfg.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    assert!(text.starts_with("Discordance Under Over Sig.Under Sig.Over Time(s)\n50.00% 33.33% 16.67% 16.67% 16.67% "));
    let digest = std::fs::read_to_string(fixture("golden_digest.txt")).unwrap();
    assert!(String::from_utf8_lossy(&out.stderr).contains(digest.trim()));

    let run_dir = dir.path().join("run");
    let rep = triage(&["report", run_dir.to_str().unwrap(), "--format", "markdown", "--saliency"]);
    assert!(rep.status.success());
    assert!(stdout(&rep).contains("| 50.00% | 33.33% |"));
    assert!(stdout(&rep).contains("\"incorrect\""));

    let cmp = triage(&["compare", run_dir.to_str().unwrap(), run_dir.to_str().unwrap()]);
    assert!(cmp.status.success());
    assert!(stdout(&cmp).contains("changed encounters: 0 of 6"));
}

#[test]
fn compare_mismatched_datasets_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let a = write_config(dir.path(), "");
    assert!(triage(&["run", a.to_str().unwrap(), "--output-dir", dir.path().join("a").to_str().unwrap()]).status.success());
    let text = std::fs::read_to_string(&a).unwrap().replace(
        &fixture("demo_encounters.jsonl").display().to_string(),
        &fixture("curation_12.jsonl").display().to_string(),
    );
    std::fs::write(&a, text).unwrap();
    assert!(triage(&["run", a.to_str().unwrap(), "--output-dir", dir.path().join("b").to_str().unwrap()]).status.success());
    let out = triage(&["compare", dir.path().join("a").to_str().unwrap(), dir.path().join("b").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn backend_failure_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    let fixture_file = dir.path().join("empty.jsonl");
    std::fs::write(&fixture_file, "").unwrap();
    let cfg = write_config(dir.path(), "");
    let text = std::fs::read_to_string(&cfg)
        .unwrap()
        .replace("kind = \"heuristic\"", &format!("kind = \"scripted\"\nfixture = \"{}\"", fixture_file.display()));
    std::fs::write(&cfg, text).unwrap();
    let out = triage(&["run", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(4));
    assert!(dir.path().join("run/artifact.json").exists());
}

#[test]
fn curate_lists_exclusions() {
    let dir = tempfile::tempdir().unwrap();
    let kept = dir.path().join("kept.csv");
    let out = triage(&["curate", fixture("curation_12.jsonl").to_str().unwrap(), "--out", kept.to_str().unwrap()]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.contains("excluded c03 placeholder_complaint"));
    assert!(text.contains("excluded c11 pmh_none"));
    assert!(text.ends_with("retained 8 of 12\n"));
    assert_eq!(std::fs::read_to_string(kept).unwrap().lines().count(), 9);
}

#[test]
fn curate_with_custom_rules() {
    let dir = tempfile::tempdir().unwrap();
    let rules = dir.path().join("rules.toml");
    std::fs::write(&rules, "exclude_pmh_none = false\n").unwrap();
    let out = triage(&["curate", fixture("curation_12.jsonl").to_str().unwrap(), "--rules", rules.to_str().unwrap()]);
    assert!(stdout(&out).ends_with("retained 9 of 12\n"));
    std::fs::write(&rules, "bogus = 1\n").unwrap();
    let out = triage(&["curate", fixture("curation_12.jsonl").to_str().unwrap(), "--rules", rules.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn chunk_and_missing_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let out = triage(&["chunk", fixture("curation_12.jsonl").to_str().unwrap(), "--k", "5", "--out-dir", dir.path().to_str().unwrap()]);
    assert!(out.status.success());
    assert_eq!(stdout(&out), "chunk 01: 3\nchunk 02: 3\nchunk 03: 2\nchunk 04: 2\nchunk 05: 2\n");
    assert!(dir.path().join("chunk_05.jsonl").exists());
    let missing = triage(&["chunk", "/nonexistent.jsonl"]);
    assert_eq!(missing.status.code(), Some(3));
}

#[test]
fn silver_tasks_keep_labels() {
    let out = triage(&["silver-tasks", fixture("curation_12.jsonl").to_str().unwrap()]);
    assert!(out.status.success());
    let lines: Vec<serde_json::Value> = stdout(&out).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 11);
    assert_eq!(lines[0]["encounter_id"], "c01");
    assert_eq!(lines[0]["label"], 3);
}
