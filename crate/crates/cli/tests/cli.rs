use std::path::Path;
use std::process::{Command, Output};

const STAGES: [&str; 8] = [
    "sample",
    "estimate",
    "train-regressor",
    "confidence",
    "build-prefs",
    "train-dpo",
    "evaluate",
    "report",
];

fn confpref(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_confpref"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env_remove("RUST_LOG")
        .env("CONFPREF__CORPUS__TOY_QUESTIONS", "15")
        .env("CONFPREF__SAMPLING__N", "8")
        .env("CONFPREF__REGRESSOR__EPOCHS", "5")
        .output()
        .expect("binary runs")
}

fn stderr_json(o: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&o.stderr);
    let line = text.lines().last().expect("an error record on stderr");
    serde_json::from_str(line).expect("stderr record is JSON")
}

#[test]
fn missing_upstream_artifact_exits_2_and_names_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let o = confpref(dir.path(), &["estimate"]);
    assert_eq!(o.status.code(), Some(2));
    let rec = stderr_json(&o);
    assert_eq!(rec["error"], "missing_artifact");
    assert_eq!(rec["details"]["run_stage"], "sample");
}

#[test]
fn full_run_then_rerun_skips_and_outputs_validate() {
    let dir = tempfile::tempdir().unwrap();
    for s in STAGES {
        let o = confpref(dir.path(), &[s]);
        assert!(o.status.success(), "{s}: {}", String::from_utf8_lossy(&o.stderr));
        assert!(String::from_utf8_lossy(&o.stdout).contains("done"));
    }
    let o = confpref(dir.path(), &["report", "--format", "svg"]);
    assert!(o.status.success());
    assert!(dir.path().join("reliability.svg").exists());
    for s in STAGES {
        let o = confpref(dir.path(), &[s]);
        assert!(o.status.success());
        assert!(String::from_utf8_lossy(&o.stdout).contains("up to date"), "{s} reran");
    }
    let files: Vec<String> = ["samples.jsonl", "estimates.jsonl", "confidences.jsonl", "prefs.jsonl", "episodes.jsonl", "results.csv"]
        .iter()
        .map(|f| dir.path().join(f).display().to_string())
        .collect();
    let mut args = vec!["validate"];
    args.extend(files.iter().map(String::as_str));
    let o = confpref(dir.path(), &args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
}

#[test]
fn changed_config_needs_force() {
    let dir = tempfile::tempdir().unwrap();
    assert!(confpref(dir.path(), &["sample"]).status.success());
    let o = confpref(dir.path(), &["sample", "--seed", "9"]);
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(stderr_json(&o)["error"], "config_mismatch");
    let o = confpref(dir.path(), &["sample", "--seed", "9", "--force"]);
    assert!(o.status.success());
}

#[test]
fn validate_reports_violations() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("results.csv");
    std::fs::write(
        &p,
        "dataset,llm_correct_acc,llm_false_acc,average,both,either,n,parse_failures\nd,0.4,0.6,0.9,0.3,0.4,10,0\n",
    )
    .unwrap();
    let o = confpref(dir.path(), &["validate", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stdout).contains("average"));
}
