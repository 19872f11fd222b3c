use std::path::Path;
use std::process::{Command, Output};

fn lab(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_unlearn-lab"))
        .args(args)
        .arg("--out")
        .arg(dir)
        .output()
        .unwrap()
}

fn error_record(out: &Output) -> serde_json::Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().find(|l| l.starts_with('{')).expect("no JSON record on stderr");
    serde_json::from_str(line).unwrap()
}

#[test]
fn unknown_method_fails_with_a_json_record() {
    let dir = tempfile::tempdir().unwrap();
    let out = lab(dir.path(), &["unlearn", "--method", "forgetful+gdr"]);
    assert!(!out.status.success());
    let rec = error_record(&out);
    assert_eq!(rec["status"], "error");
    assert_eq!(rec["kind"], "unknown_method");
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn gen_corpus_refuses_to_overwrite_without_force() {
    let dir = tempfile::tempdir().unwrap();
    let first = lab(dir.path(), &["gen-corpus", "--seed", "5"]);
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
    let again = lab(dir.path(), &["gen-corpus", "--seed", "5"]);
    assert!(!again.status.success());
    assert_eq!(error_record(&again)["kind"], "output_exists");
    assert!(lab(dir.path(), &["gen-corpus", "--seed", "5", "--force"]).status.success());
}

#[test]
fn unknown_config_keys_are_fatal() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "seed = 1\n[train]\nlearning_rate = 0.1\n").unwrap();
    let out = lab(dir.path(), &["gen-corpus", "--config", cfg.to_str().unwrap()]);
    assert!(!out.status.success());
    assert_eq!(error_record(&out)["kind"], "config");
}

#[test]
fn forget_fraction_flag_reaches_the_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let out = lab(dir.path(), &["gen-corpus", "--forget-fraction", "0.05"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let bad = lab(dir.path(), &["gen-corpus", "--forget-fraction", "1.5", "--force"]);
    assert!(!bad.status.success());
    error_record(&bad);
}

#[test]
fn missing_inputs_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let out = lab(dir.path(), &["train"]);
    assert!(!out.status.success());
    assert_eq!(error_record(&out)["kind"], "missing_input");
}
