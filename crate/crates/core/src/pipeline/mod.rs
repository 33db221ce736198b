//! Stage runner over on-disk artifacts.
//!
//! Each stage reads artifacts from the output directory, writes its own
//! atomically, and records a manifest at `manifests/<stage>.json` with the
//! SHA-256 of every input and output, a hash of the configuration sections
//! it depends on, its wall time and the tool version. A stage whose inputs,
//! outputs and configuration hash all match its manifest is skipped.
//!
//! | stage | reads | writes |
//! |---|---|---|
//! | `sample` | corpus file (optional) | `corpus.jsonl`, `samples.jsonl` |
//! | `estimate` | `corpus.jsonl`, `samples.jsonl` | `estimates.jsonl` |
//! | `train-regressor` | `corpus.jsonl`, `samples.jsonl`, `estimates.jsonl` | `regressor.bin`, `regressor.json` |
//! | `confidence` | `corpus.jsonl`, `samples.jsonl`, `regressor.bin` | `confidences.jsonl` |
//! | `build-prefs` | `corpus.jsonl`, `confidences.jsonl` | `prefs.jsonl`, `thresholds.json` |
//! | `train-dpo` | `prefs.jsonl` | `training_history.csv`, `dpo_manifest.json`, `policy.json` |
//! | `evaluate` | `corpus.jsonl`, `confidences.jsonl`, `estimates.jsonl` | `episodes.jsonl`, `results.csv`, `calibration.csv`, `calibration.json` |
//! | `report` | `results.csv`, `calibration.json` | `report.csv` or `reliability.svg` |

mod config;
mod stages;
mod validate;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use config::{
    apply_env, ArgumentKind, BackendConfig, BackendKind, CorpusConfig, EstimatorConfig, EvalConfig,
    JudgeKind, Overrides, PipelineConfig, PrefsConfig, SamplingConfig, ENV_PREFIX,
};
pub use validate::{validate_artifact, ArtifactKind};

use crate::error::Error;
use crate::io;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Artifact file names inside the output directory.
pub mod artifacts {
    pub const CORPUS: &str = "corpus.jsonl";
    pub const SAMPLES: &str = "samples.jsonl";
    pub const ESTIMATES: &str = "estimates.jsonl";
    pub const REGRESSOR: &str = "regressor.bin";
    pub const REGRESSOR_REPORT: &str = "regressor.json";
    pub const CONFIDENCES: &str = "confidences.jsonl";
    pub const PREFS: &str = "prefs.jsonl";
    pub const THRESHOLDS: &str = "thresholds.json";
    pub const TRAINING_HISTORY: &str = "training_history.csv";
    pub const DPO_MANIFEST: &str = "dpo_manifest.json";
    pub const POLICY: &str = "policy.json";
    pub const EPISODES: &str = "episodes.jsonl";
    pub const RESULTS: &str = "results.csv";
    pub const CALIBRATION_CSV: &str = "calibration.csv";
    pub const CALIBRATION_JSON: &str = "calibration.json";
    pub const REPORT_CSV: &str = "report.csv";
    pub const REPORT_SVG: &str = "reliability.svg";
    pub const MANIFESTS: &str = "manifests";
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReportFormat {
    Csv,
    Svg,
}

impl FromStr for ReportFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "svg" => Ok(ReportFormat::Svg),
            other => Err(Error::invalid(format!("unknown report format {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Sample,
    Estimate,
    TrainRegressor,
    Confidence,
    BuildPrefs,
    TrainDpo,
    Evaluate,
    Report(ReportFormat),
}

impl Stage {
    /// All stages in dependency order, with the CSV report.
    pub const ALL: [Stage; 8] = [
        Stage::Sample,
        Stage::Estimate,
        Stage::TrainRegressor,
        Stage::Confidence,
        Stage::BuildPrefs,
        Stage::TrainDpo,
        Stage::Evaluate,
        Stage::Report(ReportFormat::Csv),
    ];

    /// Command name.
    pub fn name(self) -> &'static str {
        match self {
            Stage::Sample => "sample",
            Stage::Estimate => "estimate",
            Stage::TrainRegressor => "train-regressor",
            Stage::Confidence => "confidence",
            Stage::BuildPrefs => "build-prefs",
            Stage::TrainDpo => "train-dpo",
            Stage::Evaluate => "evaluate",
            Stage::Report(_) => "report",
        }
    }

    /// Manifest file stem; the two report formats are tracked separately.
    pub fn manifest_name(self) -> String {
        match self {
            Stage::Report(ReportFormat::Csv) => "report-csv".into(),
            Stage::Report(ReportFormat::Svg) => "report-svg".into(),
            s => s.name().into(),
        }
    }

    /// Artifacts read from the output directory.
    pub fn inputs(self) -> &'static [&'static str] {
        use artifacts::*;
        match self {
            Stage::Sample => &[],
            Stage::Estimate => &[CORPUS, SAMPLES],
            Stage::TrainRegressor => &[CORPUS, SAMPLES, ESTIMATES],
            Stage::Confidence => &[CORPUS, SAMPLES, REGRESSOR],
            Stage::BuildPrefs => &[CORPUS, CONFIDENCES],
            Stage::TrainDpo => &[PREFS],
            Stage::Evaluate => &[CORPUS, CONFIDENCES, ESTIMATES],
            Stage::Report(_) => &[RESULTS, CALIBRATION_JSON],
        }
    }

    pub fn outputs(self) -> &'static [&'static str] {
        use artifacts::*;
        match self {
            Stage::Sample => &[CORPUS, SAMPLES],
            Stage::Estimate => &[ESTIMATES],
            Stage::TrainRegressor => &[REGRESSOR, REGRESSOR_REPORT],
            Stage::Confidence => &[CONFIDENCES],
            Stage::BuildPrefs => &[PREFS, THRESHOLDS],
            Stage::TrainDpo => &[TRAINING_HISTORY, DPO_MANIFEST, POLICY],
            Stage::Evaluate => &[EPISODES, RESULTS, CALIBRATION_CSV, CALIBRATION_JSON],
            Stage::Report(ReportFormat::Csv) => &[REPORT_CSV],
            Stage::Report(ReportFormat::Svg) => &[REPORT_SVG],
        }
    }

    /// The stage that writes `artifact`.
    pub fn producer(artifact: &str) -> Option<Stage> {
        Stage::ALL
            .into_iter()
            .chain([Stage::Report(ReportFormat::Svg)])
            .find(|s| s.outputs().contains(&artifact))
    }

    /// Hash of the configuration this stage's outputs depend on.
    pub fn config_hash(self, cfg: &PipelineConfig) -> Result<String, Error> {
        // Every stage rebuilds the backend from the corpus, so the seed,
        // corpus and backend sections are always included.
        let common = serde_json::json!({
            "seed": cfg.seed,
            "corpus": cfg.corpus,
            "backend": cfg.backend,
        });
        let own = match self {
            Stage::Sample => serde_json::json!({ "sampling": cfg.sampling }),
            Stage::Estimate => {
                serde_json::json!({ "estimators": cfg.estimators, "alpha": cfg.bce.alpha })
            }
            Stage::TrainRegressor => serde_json::json!({ "regressor": cfg.regressor_config() }),
            Stage::Confidence => serde_json::json!({ "bce": cfg.bce }),
            Stage::BuildPrefs => serde_json::json!({ "prefs": cfg.prefs }),
            Stage::TrainDpo => serde_json::json!({ "dpo": cfg.dpo_config() }),
            Stage::Evaluate => serde_json::json!({ "eval": cfg.eval, "alpha": cfg.bce.alpha }),
            Stage::Report(f) => serde_json::json!({
                "format": f,
                "variant": cfg.bce.variant,
                "predictive_normalized": cfg.estimators.predictive_normalized,
                "bins": cfg.eval.bins,
            }),
        };
        let doc = serde_json::json!({ "stage": self.manifest_name(), "common": common, "own": own });
        Ok(io::sha256_hex(&serde_json::to_vec(&doc)?))
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: String,
    pub tool_version: String,
    pub config_hash: String,
    /// Input path to SHA-256.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub wall_time_ms: u64,
    /// Stage-specific counts, such as dropped conversations.
    #[serde(default)]
    pub notes: BTreeMap<String, serde_json::Value>,
}

/// A failed stage, with the process exit code it maps to.
#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("{stage}: missing input {}{}", path.display(), hint(*producer))]
    MissingArtifact {
        stage: Stage,
        path: PathBuf,
        producer: Option<Stage>,
    },

    #[error("{stage}: configuration changed since the recorded run (manifest {recorded}, now {current}); rerun with --force to overwrite")]
    ConfigMismatch {
        stage: Stage,
        recorded: String,
        current: String,
    },

    #[error("{stage}: {source}")]
    Failed {
        stage: Stage,
        #[source]
        source: Error,
    },
}

fn hint(producer: Option<Stage>) -> String {
    match producer {
        Some(s) => format!("; run `{s}` first"),
        None => String::new(),
    }
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::MissingArtifact { .. } => 2,
            PipelineError::ConfigMismatch { .. } => 3,
            PipelineError::Failed { .. } => 1,
        }
    }

    /// Machine-readable record for stderr.
    pub fn to_json(&self) -> serde_json::Value {
        let (kind, stage, extra) = match self {
            PipelineError::MissingArtifact { stage, path, producer } => (
                "missing_artifact",
                stage,
                serde_json::json!({
                    "path": path.display().to_string(),
                    "run_stage": producer.map(|s| s.name()),
                }),
            ),
            PipelineError::ConfigMismatch { stage, recorded, current } => (
                "config_mismatch",
                stage,
                serde_json::json!({ "recorded": recorded, "current": current }),
            ),
            PipelineError::Failed { stage, source } => (
                "stage_failed",
                stage,
                serde_json::json!({ "cause": format!("{source:?}") }),
            ),
        };
        serde_json::json!({
            "error": kind,
            "stage": stage.name(),
            "exit_code": self.exit_code(),
            "message": self.to_string(),
            "details": extra,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageOutcome {
    Ran,
    /// Inputs, outputs and configuration matched the manifest.
    Skipped,
}

fn manifest_path(out: &Path, stage: Stage) -> PathBuf {
    out.join(artifacts::MANIFESTS)
        .join(format!("{}.json", stage.manifest_name()))
}

pub fn read_manifest(out: &Path, stage: Stage) -> Result<Option<StageManifest>, Error> {
    let p = manifest_path(out, stage);
    if !p.exists() {
        return Ok(None);
    }
    let bytes = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
    Ok(Some(serde_json::from_slice(&bytes)?))
}

fn hash_all(paths: &[(String, PathBuf)]) -> Result<BTreeMap<String, String>, Error> {
    paths
        .iter()
        .map(|(k, p)| Ok((k.clone(), io::sha256_file(p)?)))
        .collect()
}

fn input_paths(stage: Stage, cfg: &PipelineConfig) -> Vec<(String, PathBuf)> {
    let mut v: Vec<(String, PathBuf)> = stage
        .inputs()
        .iter()
        .map(|a| (a.to_string(), cfg.out_dir.join(a)))
        .collect();
    if stage == Stage::Sample {
        if let Some(p) = &cfg.corpus.path {
            v.push((p.display().to_string(), p.clone()));
        }
    }
    v
}

/// Runs `stage` unless its manifest shows it is up to date. `force` reruns
/// regardless and overwrites a manifest recorded under another
/// configuration.
pub fn run_stage(stage: Stage, cfg: &PipelineConfig, force: bool) -> Result<StageOutcome, PipelineError> {
    let failed = |source: Error| PipelineError::Failed { stage, source };
    let out = cfg.out_dir.as_path();
    let inputs = input_paths(stage, cfg);
    for (name, p) in &inputs {
        if !p.exists() {
            return Err(PipelineError::MissingArtifact {
                stage,
                path: p.clone(),
                producer: Stage::producer(name),
            });
        }
    }
    let config_hash = stage.config_hash(cfg).map_err(failed)?;
    let input_hashes = hash_all(&inputs).map_err(failed)?;
    let outputs: Vec<(String, PathBuf)> = stage
        .outputs()
        .iter()
        .map(|a| (a.to_string(), out.join(a)))
        .collect();
    if !force {
        if let Some(m) = read_manifest(out, stage).map_err(failed)? {
            if m.config_hash != config_hash {
                return Err(PipelineError::ConfigMismatch {
                    stage,
                    recorded: m.config_hash,
                    current: config_hash,
                });
            }
            let outputs_current = outputs.iter().all(|(_, p)| p.exists())
                && hash_all(&outputs).map_err(failed)? == m.outputs;
            if m.inputs == input_hashes && outputs_current {
                log::info!("{stage}: up to date, skipped");
                return Ok(StageOutcome::Skipped);
            }
        }
    }
    log::info!("{stage}: running");
    let start = Instant::now();
    let notes = stages::run(stage, cfg).map_err(failed)?;
    let manifest = StageManifest {
        stage: stage.manifest_name(),
        tool_version: TOOL_VERSION.to_string(),
        config_hash,
        inputs: input_hashes,
        outputs: hash_all(&outputs).map_err(failed)?,
        wall_time_ms: start.elapsed().as_millis() as u64,
        notes,
    };
    let bytes = serde_json::to_vec_pretty(&manifest).map_err(|e| failed(e.into()))?;
    io::write_atomic(&manifest_path(out, stage), &bytes).map_err(failed)?;
    log::info!("{stage}: done in {} ms", manifest.wall_time_ms);
    Ok(StageOutcome::Ran)
}

/// Runs every stage in order.
pub fn run_all(cfg: &PipelineConfig, force: bool) -> Result<Vec<(Stage, StageOutcome)>, PipelineError> {
    Stage::ALL
        .into_iter()
        .map(|s| run_stage(s, cfg, force).map(|o| (s, o)))
        .collect()
}
