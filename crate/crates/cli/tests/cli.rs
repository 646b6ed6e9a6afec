use std::path::Path;
use std::process::{Command, Output};

fn biasaudit(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_biasaudit"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn assert_ok(o: &Output) {
    assert!(o.status.success(), "exit {:?}: {}", o.status.code(), String::from_utf8_lossy(&o.stderr));
}

const AXES: [&str; 4] = ["GEN", "RAC", "SO", "AGE"];

fn write_corpus(dir: &Path, n: usize) {
    let mut text = String::new();
    for i in 0..n {
        let axes: Vec<&str> = if i % 2 == 0 { vec![] } else { vec![AXES[i % 4]] };
        text.push_str(&serde_json::json!({"id": format!("r{i:03}"), "text": format!("row {i}"), "axes": axes}).to_string());
        text.push('\n');
    }
    std::fs::write(dir.join("raw.jsonl"), text).unwrap();
}

/// Predictions that miss every fifth biased row and flag every seventh unbiased one.
fn write_fixture(dir: &Path, instances: &Path) {
    let mut text = String::new();
    for line in std::fs::read_to_string(instances).unwrap().lines() {
        let row: serde_json::Value = serde_json::from_str(line).unwrap();
        let id = row["id"].as_str().unwrap();
        let i: usize = id[1..].parse().unwrap();
        let gold: Vec<String> = serde_json::from_value(row["axes"].clone()).unwrap();
        let pred = if gold.is_empty() {
            if i.is_multiple_of(7) { vec!["GEN".to_string()] } else { vec![] }
        } else if i.is_multiple_of(5) {
            vec![]
        } else {
            gold
        };
        let detector = serde_json::json!({"model": "fixture", "strategy": "none", "shots": 0});
        text.push_str(&serde_json::json!({"id": id, "axes": pred, "latency_ms": 12.0, "detector": detector}).to_string());
        text.push('\n');
    }
    std::fs::write(dir.join("fixture.jsonl"), text).unwrap();
}

#[test]
fn stage_commands_compose() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    write_corpus(dir, 200);

    assert_ok(&biasaudit(dir, &["--out", "stage1", "ingest", "--input", "raw.jsonl", "--dataset", "demo"]));
    assert_ok(&biasaudit(dir, &["--out", "stage2", "--seed", "4", "split", "--instances", "stage1/instances.jsonl"]));
    let split_a = std::fs::read(dir.join("stage2/instances.jsonl")).unwrap();
    assert_ok(&biasaudit(dir, &["--out", "stage2b", "--seed", "4", "split", "--instances", "stage1/instances.jsonl"]));
    assert_eq!(split_a, std::fs::read(dir.join("stage2b/instances.jsonl")).unwrap());

    let stats = biasaudit(dir, &["stats", "--instances", "stage2/instances.jsonl"]);
    assert_ok(&stats);
    let stats: serde_json::Value = serde_json::from_str(&stdout(&stats)).unwrap();
    assert!(stats.is_object());

    assert_ok(&biasaudit(dir, &["--out", "w", "weights", "--instances", "stage2/instances.jsonl"]));
    assert!(dir.join("w/weights.json").is_file());

    write_fixture(dir, &dir.join("stage2/instances.jsonl"));
    let scored = biasaudit(
        dir,
        &["--out", "scored", "score", "--instances", "stage2/instances.jsonl", "--predictions", "fixture.jsonl", "--resamples", "100"],
    );
    assert_ok(&scored);
    let md = stdout(&scored);
    assert!(md.contains("| fixture | fixture | 0-shot |"), "{md}");

    let rendered = biasaudit(dir, &["report", "--report", "scored/report.json"]);
    assert_ok(&rendered);
    assert_eq!(stdout(&rendered), std::fs::read_to_string(dir.join("scored/report.md")).unwrap());
    let csv = biasaudit(dir, &["report", "--report", "scored/report.json", "--format", "csv"]);
    assert_ok(&csv);
    assert!(stdout(&csv).starts_with("detector,group_kind,group,metric,point,ci_low,ci_high,n"));

    let disp = biasaudit(
        dir,
        &["disparity", "--instances", "stage2/instances.jsonl", "--predictions", "fixture.jsonl", "--pair", "GEN,RAC", "--fn-rule", "binary"],
    );
    assert_ok(&disp);
    let disp: serde_json::Value = serde_json::from_str(&stdout(&disp)).unwrap();
    assert_eq!(disp["options"]["fn_rule"], "binary");
    assert!(disp["delta_fnr"]["value"]["delta"].is_number());
}

#[test]
fn exit_codes_follow_error_kind() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let code = |args: &[&str]| biasaudit(dir, args).status.code();

    assert_eq!(code(&["frobnicate"]), Some(1));
    assert_eq!(code(&["--help"]), Some(0));
    assert_eq!(code(&["audit"]), Some(1));
    assert_eq!(code(&["--config", "nope.toml", "audit"]), Some(1));
    std::fs::write(dir.join("bad.toml"), "[split]\ntrain_fraction = 2.0\n").unwrap();
    assert_eq!(code(&["--config", "bad.toml", "audit"]), Some(1));
    assert_eq!(code(&["stats", "--instances", "missing.jsonl"]), Some(3));

    write_corpus(dir, 20);
    assert_ok(&biasaudit(dir, &["--out", "o", "ingest", "--input", "raw.jsonl", "--dataset", "demo"]));
    std::fs::write(dir.join("empty.jsonl"), "").unwrap();
    assert_eq!(code(&["score", "--instances", "o/instances.jsonl", "--predictions", "empty.jsonl"]), Some(3));
}
