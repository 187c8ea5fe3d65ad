use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn dptails(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dptails"))
        .args(args)
        .current_dir(dir)
        .env_remove("DPTAILS_SEED")
        .output()
        .unwrap()
}

fn write_scores(dir: &Path, name: &str) {
    let mut body = String::from("score,group\n");
    for i in 0..200 {
        let x = i as f64 / 200.0;
        body.push_str(&format!("{x},a\n{},b\n", x * 2.0 + 0.5));
    }
    fs::write(dir.join(name), body).unwrap();
}

#[test]
fn missing_input_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dptails(dir.path(), &["calibrate", "--input", "nope.csv", "--alpha", "1", "--out", "t.json"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.csv"));
}

#[test]
fn invalid_p_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    write_scores(dir.path(), "s.csv");
    let out = dptails(dir.path(), &["calibrate", "--input", "s.csv", "--alpha", "1", "--p", "1.5", "--out", "t.json"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn calibrate_without_p_records_the_optimized_value() {
    let dir = tempfile::tempdir().unwrap();
    write_scores(dir.path(), "s.csv");
    let out = dptails(dir.path(), &["calibrate", "--input", "s.csv", "--alpha", "1", "--out", "t.json"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("optimized p ="));
    let doc: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("t.json")).unwrap()).unwrap();
    let p = doc["params"]["p"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&p));
}

#[test]
fn unknown_group_reports_its_row() {
    let dir = tempfile::tempdir().unwrap();
    write_scores(dir.path(), "s.csv");
    assert!(dptails(dir.path(), &["calibrate", "--input", "s.csv", "--alpha", "1", "--p", "0.5", "--out", "t.json"])
        .status
        .success());
    fs::write(dir.path().join("new.csv"), "score,group\n0.1,a\n0.2,c\n").unwrap();
    let out = dptails(dir.path(), &["transform", "--input", "new.csv", "--transform", "t.json"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains('2'));
}

#[test]
fn transform_keeps_input_order() {
    let dir = tempfile::tempdir().unwrap();
    write_scores(dir.path(), "s.csv");
    assert!(dptails(dir.path(), &["calibrate", "--input", "s.csv", "--alpha", "1", "--p", "0.5", "--out", "t.json"])
        .status
        .success());
    let out = dptails(dir.path(), &["transform", "--input", "s.csv", "--transform", "t.json"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let groups: Vec<&str> = text.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(groups.len(), 400);
    assert!(groups.chunks(2).all(|c| c == ["a", "b"]));
}

#[test]
fn sweep_range_expands_to_three_rows_per_rep() {
    let dir = tempfile::tempdir().unwrap();
    let out = dptails(
        dir.path(),
        &["sweep", "--n", "300", "--m", "200", "--n-train", "200", "--alphas", "0:1:0.5", "--p", "0.5", "--reps", "2"],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("alpha,rep,seed,p,"));
    assert_eq!(lines.count(), 6);
}

#[test]
fn identical_groups_evaluate_as_fair() {
    let dir = tempfile::tempdir().unwrap();
    let mut body = String::from("score,group\n");
    for i in 0..100 {
        body.push_str(&format!("{i},a\n{i},b\n"));
    }
    fs::write(dir.path().join("same.csv"), body).unwrap();
    let out = dptails(dir.path(), &["evaluate", "--input", "same.csv", "--alpha", "20", "--p", "0.2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["ks"].as_f64(), Some(0.0));
    assert_eq!(report["tail_unfairness"].as_f64(), Some(0.0));
}

#[test]
fn verify_oracle_passes_and_catches_a_shift() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(dptails(dir.path(), &["verify-oracle", "--random", "3"]).status.code(), Some(0));
    assert_eq!(dptails(dir.path(), &["verify-oracle", "--random", "3", "--inject-shift", "0.05"]).status.code(), Some(1));
    assert_eq!(dptails(dir.path(), &["verify-oracle", "--step", "1e-3", "--tol", "1e-4"]).status.code(), Some(2));
}
