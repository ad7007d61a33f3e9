//! Command-line contract: outputs, error variants and exit codes.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use expert_lm::library::Registry;
use expert_lm::params::load_params;
use tempfile::TempDir;

fn elm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_elm")).current_dir(dir).args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = elm(dir, args);
    assert!(out.status.success(), "elm {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

/// Runs a command that must fail and returns its stderr.
fn fails(dir: &Path, args: &[&str], code: i32) -> String {
    let out = elm(dir, args);
    assert_eq!(out.status.code(), Some(code), "elm {args:?}");
    String::from_utf8(out.stderr).unwrap()
}

const TRAIN: [&str; 6] = ["--epochs", "1", "--lr", "0.1", "--batch-size", "8"];

fn train(dir: &Path, name: &str, extra: &[&str]) -> Output {
    let task = format!("tasks/{name}.train.jsonl");
    let out = format!("{name}.elmp");
    let mut args = vec![
        "train-expert", "--task", &task, "--base", "base.elmp", "--kind", "pe", "--out", &out, "--registry",
        "registry.jsonl",
    ];
    args.extend_from_slice(&TRAIN);
    args.extend_from_slice(extra);
    elm(dir, &args)
}

/// Two families with two prompts each, a small base and two trained experts.
fn setup() -> TempDir {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(dir, &["gen-tasks", "--out-dir", "tasks", "--families", "2", "--prompts", "2", "--instances", "40"]);
    ok(
        dir,
        &[
            "init-base", "--out", "base.elmp", "--layers", "1", "--hidden", "16", "--adapter-dim", "4", "--heads", "2",
            "--max-tokens", "32",
        ],
    );
    for name in ["map00__p0", "map01__p0"] {
        let out = train(dir, name, &[]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    ok(dir, &["build-library", "--registry", "registry.jsonl", "--tasks-dir", "tasks", "--S", "10", "--out", "library.jsonl"]);
    tmp
}

#[test]
fn gen_tasks_writes_every_split() {
    let tmp = tempfile::tempdir().unwrap();
    ok(tmp.path(), &["gen-tasks", "--out-dir", "t", "--families", "3", "--prompts", "2", "--instances", "20", "--sequence-tasks"]);
    let names: Vec<String> = fs::read_dir(tmp.path().join("t"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    assert_eq!(names.len(), 3 * 2 * 3 + 3 * 3);
    assert!(names.contains(&"map02__p1.validation.jsonl".to_string()));
    let train = fs::read_to_string(tmp.path().join("t/map00__p0.train.jsonl")).unwrap();
    assert_eq!(train.lines().count(), 20);
}

#[test]
fn training_registers_and_library_routes() {
    let tmp = setup();
    let dir = tmp.path();
    let registry = Registry::load(dir.join("registry.jsonl")).unwrap();
    assert_eq!(registry.len(), 2);
    let rec = registry.get("map00__p0").unwrap();
    assert_eq!(rec.params, "map00__p0.elmp");
    assert_eq!(rec.dataset, "map00");

    // Retraining with identical settings leaves the registry as it was.
    assert!(train(dir, "map00__p0", &[]).status.success());
    assert_eq!(Registry::load(dir.join("registry.jsonl")).unwrap().len(), 2);

    let lib = fs::read_to_string(dir.join("library.jsonl")).unwrap();
    assert_eq!(lib.lines().count(), 1 + 2 * 10);

    let decision: serde_json::Value = serde_json::from_str(&ok(
        dir,
        &["route", "--library", "library.jsonl", "--target", "tasks/map01__p1.test.jsonl", "--Q", "5"],
    ))
    .unwrap();
    assert_eq!(decision["chosen_expert"], "map01__p0");
    assert_eq!(decision["per_query"].as_array().unwrap().len(), 5);
    assert!(decision["provenance"]["inputs"]["library"].is_string());
}

#[test]
fn conflicting_retrain_is_a_duplicate_id() {
    let tmp = setup();
    let out = train(tmp.path(), "map00__p0", &["--seed", "3"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error[DuplicateExpertId]"));
}

#[test]
fn corrupted_parameters_are_rejected() {
    let tmp = setup();
    let dir = tmp.path();
    let path = dir.join("map00__p0.elmp");
    let mut bytes = fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x10;
    fs::write(&path, bytes).unwrap();
    let err = fails(dir, &["eval", "--base", "base.elmp", "--params", "map00__p0.elmp", "--tasks", "tasks/map00__p1.test.jsonl"], 1);
    assert!(err.starts_with("error[ChecksumMismatch]"), "{err}");
}

#[test]
fn dangling_experts_are_reported() {
    let tmp = setup();
    let dir = tmp.path();
    let err = fails(
        dir,
        &["add-expert", "--library", "library.jsonl", "--registry", "registry.jsonl", "--expert", "nobody", "--task", "tasks/map00__p1.train.jsonl"],
        1,
    );
    assert!(err.starts_with("error[DanglingExpertId]"), "{err}");

    let text = fs::read_to_string(dir.join("registry.jsonl")).unwrap();
    fs::write(dir.join("partial.jsonl"), text.lines().next().unwrap().to_string() + "\n").unwrap();
    let err = fails(
        dir,
        &["route", "--library", "library.jsonl", "--target", "tasks/map00__p1.test.jsonl", "--registry", "partial.jsonl"],
        1,
    );
    assert!(err.starts_with("error[DanglingExpertId]"), "{err}");

    fs::remove_file(dir.join("map01__p0.elmp")).unwrap();
    let err = fails(dir, &["build-library", "--registry", "registry.jsonl", "--tasks-dir", "tasks", "--out", "again.jsonl"], 1);
    assert!(err.starts_with("error[DanglingExpertId]"), "{err}");
}

#[test]
fn zero_queries_is_an_invalid_count() {
    let tmp = setup();
    let err = fails(tmp.path(), &["route", "--library", "library.jsonl", "--target", "tasks/map00__p1.test.jsonl", "--Q", "0"], 1);
    assert!(err.starts_with("error[InvalidCount]"), "{err}");
}

#[test]
fn appended_expert_keeps_existing_bytes() {
    let tmp = setup();
    let dir = tmp.path();
    let before = fs::read(dir.join("library.jsonl")).unwrap();
    assert!(train(dir, "map00__p1", &[]).status.success());
    ok(
        dir,
        &["add-expert", "--library", "library.jsonl", "--registry", "registry.jsonl", "--expert", "map00__p1", "--task", "tasks/map00__p1.train.jsonl"],
    );
    let after = fs::read(dir.join("library.jsonl")).unwrap();
    assert!(after.starts_with(&before));
    assert_eq!(String::from_utf8(after).unwrap().lines().count(), 1 + 3 * 10);
}

#[test]
fn merge_coefficients() {
    let tmp = setup();
    let dir = tmp.path();
    let base = ["merge", "--base", "base.elmp", "--registry", "registry.jsonl", "--experts", "map00__p0", "map01__p0"];

    let mut args = base.to_vec();
    args.extend(["--lambdas", "0", "0", "--out", "zero.elmp"]);
    ok(dir, &args);
    let merged = load_params(dir.join("zero.elmp")).unwrap();
    assert!(merged.is_adapter());
    assert!(merged.iter().all(|(_, t)| t.data().iter().all(|&v| v == 0.0)));

    let mut args = base.to_vec();
    args.extend(["--lambdas", "1", "--out", "bad.elmp"]);
    fails(dir, &args, 1);

    let mut args = base.to_vec();
    args.extend(["--lambdas", "1", "1", "--search", "tasks/map00__p1.validation.jsonl", "--out", "x.elmp"]);
    fails(dir, &args, 2);

    let mut args = base.to_vec();
    args.extend(["--search", "tasks/map00__p1.validation.jsonl", "--grid", "0,1", "--out", "s.elmp"]);
    ok(dir, &args);
    let log = fs::read_to_string(dir.join("s.elmp.search.jsonl")).unwrap();
    // Grid {0, 1/2, 1} squared, then the chosen point.
    assert_eq!(log.lines().count(), 9 + 1);
    assert!(log.lines().last().unwrap().contains("\"chosen\":true"));
    let record: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("s.elmp.json")).unwrap()).unwrap();
    assert_eq!(record["search"]["evaluated"], 9);
    assert_eq!(record["lambdas"].as_array().unwrap().len(), 2);
}

#[test]
fn rank_experts_lists_every_expert() {
    let tmp = setup();
    let dir = tmp.path();
    let table = ok(
        dir,
        &[
            "rank-experts", "--base", "base.elmp", "--registry", "registry.jsonl", "--tasks", "tasks/map00__p1.test.jsonl",
            "--limit", "5", "--out", "rank.json",
        ],
    );
    assert!(table.contains("map00__p0") && table.contains("map01__p0"));
    let report = ok(
        dir,
        &["eval", "--base", "base.elmp", "--params", "map00__p0.elmp", "--tasks", "tasks/map00__p1.test.jsonl", "--limit", "5"],
    );
    let report: serde_json::Value = serde_json::from_str(&report).unwrap();
    assert!(report["provenance"]["inputs"]["params"].is_string());
}
