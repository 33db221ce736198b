use confpref::pipeline::{
    self, artifacts, read_manifest, Overrides, PipelineConfig, PipelineError, ReportFormat, Stage, StageOutcome,
};

fn config(out: &std::path::Path) -> PipelineConfig {
    let env = [
        ("CONFPREF__CORPUS__TOY_QUESTIONS", "12"),
        ("CONFPREF__SAMPLING__N", "6"),
        ("CONFPREF__REGRESSOR__EPOCHS", "4"),
    ]
    .map(|(k, v)| (k.to_string(), v.to_string()));
    let flags = Overrides {
        out_dir: Some(out.to_path_buf()),
        seed: Some(4),
    };
    PipelineConfig::load(None, env, &flags).unwrap()
}

#[test]
fn stages_run_skip_and_rerun_on_upstream_change() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    let first = pipeline::run_all(&cfg, false).unwrap();
    assert!(first.iter().all(|(_, o)| *o == StageOutcome::Ran));
    let second = pipeline::run_all(&cfg, false).unwrap();
    assert!(second.iter().all(|(_, o)| *o == StageOutcome::Skipped));

    let m = read_manifest(dir.path(), Stage::Estimate).unwrap().unwrap();
    assert_eq!(m.tool_version, pipeline::TOOL_VERSION);
    assert!(m.inputs.contains_key(artifacts::SAMPLES));

    // Forcing sampling rewrites identical bytes, so downstream still skips.
    assert_eq!(pipeline::run_stage(Stage::Sample, &cfg, true).unwrap(), StageOutcome::Ran);
    assert_eq!(pipeline::run_stage(Stage::Estimate, &cfg, false).unwrap(), StageOutcome::Skipped);

    // A changed upstream artifact reruns the consumer.
    let p = dir.path().join(artifacts::PREFS);
    let text = std::fs::read_to_string(&p).unwrap();
    let kept: String = text.lines().take(12).map(|l| format!("{l}\n")).collect();
    std::fs::write(&p, kept).unwrap();
    assert_eq!(pipeline::run_stage(Stage::TrainDpo, &cfg, false).unwrap(), StageOutcome::Ran);

    // A deleted output reruns its producer.
    std::fs::remove_file(dir.path().join(artifacts::RESULTS)).unwrap();
    assert_eq!(pipeline::run_stage(Stage::Evaluate, &cfg, false).unwrap(), StageOutcome::Ran);
}

#[test]
fn missing_input_names_the_producing_stage() {
    let dir = tempfile::tempdir().unwrap();
    let err = pipeline::run_stage(Stage::Confidence, &config(dir.path()), false).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    match &err {
        PipelineError::MissingArtifact { producer, .. } => assert_eq!(*producer, Some(Stage::Sample)),
        other => panic!("{other}"),
    }
    assert_eq!(err.to_json()["details"]["run_stage"], "sample");
}

#[test]
fn config_change_is_refused_without_force() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path());
    pipeline::run_stage(Stage::Sample, &cfg, false).unwrap();
    cfg.sampling.top_p = 0.9;
    let err = pipeline::run_stage(Stage::Sample, &cfg, false).unwrap_err();
    assert_eq!(err.exit_code(), 3);
    assert_eq!(pipeline::run_stage(Stage::Sample, &cfg, true).unwrap(), StageOutcome::Ran);
}

#[test]
fn outputs_validate_and_reports_render() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    pipeline::run_all(&cfg, false).unwrap();
    pipeline::run_stage(Stage::Report(ReportFormat::Svg), &cfg, false).unwrap();
    for name in [
        artifacts::SAMPLES,
        artifacts::ESTIMATES,
        artifacts::CONFIDENCES,
        artifacts::PREFS,
        artifacts::EPISODES,
        artifacts::RESULTS,
    ] {
        let v = pipeline::validate_artifact(&dir.path().join(name)).unwrap();
        assert!(v.is_empty(), "{name}: {v:?}");
    }
    let report = std::fs::read_to_string(dir.path().join(artifacts::REPORT_CSV)).unwrap();
    assert!(report.starts_with("# matching rule:"));
    assert!(report.contains("config,bce,ratio_variant,log-literal"));
    let svg = std::fs::read_to_string(dir.path().join(artifacts::REPORT_SVG)).unwrap();
    assert!(svg.contains("<polyline"));
    let history = std::fs::read_to_string(dir.path().join(artifacts::TRAINING_HISTORY)).unwrap();
    assert!(history.starts_with("step,loss,mean_margin"));
}
