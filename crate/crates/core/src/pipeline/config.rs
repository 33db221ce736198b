//! Pipeline configuration.
//!
//! A single TOML file, optionally overridden by environment variables and
//! then by command-line flags (flags > env > file). An environment variable
//! `CONFPREF__SECTION__KEY=value` sets `key` in `[section]`;
//! `CONFPREF__SEED=3` sets the top-level `seed`. Values are parsed as TOML
//! literals (`0.5`, `true`, `"text"`, `[1, 2]`) and fall back to plain
//! strings. Relative paths in the file are resolved against the file's
//! directory.
//!
//! ```toml
//! seed = 0
//! out_dir = "out"
//!
//! [corpus]
//! # path = "questions.jsonl"   # omitted: a seeded toy corpus
//! toy_questions = 30
//! regressor_fraction = 0.2
//!
//! [backend]
//! kind = "mock"
//! feature_dim = 16
//! dialogue = "calibrated"
//!
//! [sampling]
//! n = 20
//! top_p = 0.6
//! temperature = 0.9
//! max_tokens = 60
//!
//! [estimators]
//! judge = "extracted-answer-match"
//! weighting = "count"
//! predictive_normalized = true
//!
//! [regressor]
//! epochs = 40
//!
//! [bce]
//! alpha = 0.7
//! gamma = 0.3
//! variant = "log-literal"
//!
//! [prefs]
//! stance_source = "backend"
//!
//! [dpo]
//! beta = 0.1
//! learning_rate = 1e-5
//! batch_size = 4
//! epochs = 2
//!
//! [eval]
//! bins = 10
//! scenarios = ["llm_correct", "llm_false"]
//! arguments = "backend"
//! dataset = "toy"
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backend::{DecodingParams, DialogueStyle};
use crate::bce::{AnswerSource, BceConfig};
use crate::corpus::REGRESSOR_FRACTION;
use crate::dpo::DpoConfig;
use crate::error::{Error, Result};
use crate::estimators::{ClusterWeighting, EquivalenceJudge};
use crate::eval::{Scenario, DEFAULT_BINS};
use crate::prefs::StanceSource;
use crate::regressor::RegressorConfig;

pub const ENV_PREFIX: &str = "CONFPREF__";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub path: Option<PathBuf>,
    pub toy_questions: usize,
    pub regressor_fraction: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            path: None,
            toy_questions: 30,
            regressor_fraction: REGRESSOR_FRACTION,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    /// The seeded toy-world mock built over the corpus.
    #[default]
    Mock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub feature_dim: usize,
    pub dialogue: DialogueStyle,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Mock,
            feature_dim: 16,
            dialogue: DialogueStyle::Calibrated,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    pub n: usize,
    pub top_p: f64,
    pub temperature: f64,
    pub max_tokens: usize,
    /// Store features as base64 little-endian f32 instead of JSON arrays.
    pub compact_features: bool,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        let d = DecodingParams::default();
        Self {
            n: crate::backend::DEFAULT_SAMPLES,
            top_p: d.top_p,
            temperature: d.temperature,
            max_tokens: d.max_tokens,
            compact_features: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum JudgeKind {
    NormalizedExactMatch,
    #[default]
    ExtractedAnswerMatch,
}

impl JudgeKind {
    pub fn judge(self) -> EquivalenceJudge {
        match self {
            JudgeKind::NormalizedExactMatch => EquivalenceJudge::NormalizedExactMatch,
            JudgeKind::ExtractedAnswerMatch => EquivalenceJudge::ExtractedAnswerMatch,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorConfig {
    pub judge: JudgeKind,
    pub weighting: ClusterWeighting,
    pub predictive_normalized: bool,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            judge: JudgeKind::ExtractedAnswerMatch,
            weighting: ClusterWeighting::Count,
            predictive_normalized: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrefsConfig {
    pub stance_source: StanceSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArgumentKind {
    /// Generated by the backend from the solution and follow-up prompts.
    #[default]
    Backend,
    /// Fixed solution texts for the gold answer and a distractor.
    Scripted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub bins: usize,
    pub scenarios: Vec<Scenario>,
    pub arguments: ArgumentKind,
    pub dataset: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            bins: DEFAULT_BINS,
            scenarios: Scenario::ALL.to_vec(),
            arguments: ArgumentKind::Backend,
            dataset: "toy".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Every random stream of every stage derives from this seed.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub corpus: CorpusConfig,
    pub backend: BackendConfig,
    pub sampling: SamplingConfig,
    pub estimators: EstimatorConfig,
    pub regressor: RegressorConfig,
    pub bce: BceConfig,
    pub prefs: PrefsConfig,
    pub dpo: DpoConfig,
    pub eval: EvalConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("out"),
            corpus: CorpusConfig::default(),
            backend: BackendConfig::default(),
            sampling: SamplingConfig::default(),
            estimators: EstimatorConfig::default(),
            regressor: RegressorConfig::default(),
            bce: BceConfig::default(),
            prefs: PrefsConfig::default(),
            dpo: DpoConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Values given on the command line.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out_dir: Option<PathBuf>,
    pub seed: Option<u64>,
}

fn parse_env_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Applies `CONFPREF__...` variables to a raw config table. Variables are
/// applied in name order.
pub fn apply_env(table: &mut toml::Table, vars: impl IntoIterator<Item = (String, String)>) -> Result<()> {
    let mut vars: Vec<(String, String)> = vars
        .into_iter()
        .filter(|(k, _)| k.starts_with(ENV_PREFIX))
        .collect();
    vars.sort();
    for (key, raw) in vars {
        let path: Vec<String> = key[ENV_PREFIX.len()..]
            .split("__")
            .map(|p| p.to_ascii_lowercase())
            .collect();
        if path.iter().any(String::is_empty) {
            return Err(Error::invalid(format!("malformed override variable {key}")));
        }
        let mut cur = &mut *table;
        for part in &path[..path.len() - 1] {
            let entry = cur
                .entry(part.clone())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            cur = entry
                .as_table_mut()
                .ok_or_else(|| Error::invalid(format!("{key}: {part} is not a section")))?;
        }
        cur.insert(path[path.len() - 1].clone(), parse_env_value(&raw));
    }
    Ok(())
}

impl PipelineConfig {
    /// Loads the file (if any), applies `env`, then `flags`.
    pub fn load(
        path: Option<&Path>,
        env: impl IntoIterator<Item = (String, String)>,
        flags: &Overrides,
    ) -> Result<Self> {
        let (mut table, base) = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                let table: toml::Table = text
                    .parse()
                    .map_err(|e: toml::de::Error| Error::format(p.display().to_string(), e.to_string()))?;
                (table, p.parent().map(Path::to_path_buf).unwrap_or_default())
            }
            None => (toml::Table::new(), PathBuf::new()),
        };
        apply_env(&mut table, env)?;
        let mut cfg: PipelineConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::format("config", e.to_string()))?;
        if let Some(p) = &cfg.corpus.path {
            if p.is_relative() {
                cfg.corpus.path = Some(base.join(p));
            }
        }
        if cfg.out_dir.is_relative() && path.is_some() {
            cfg.out_dir = base.join(&cfg.out_dir);
        }
        if let Some(o) = &flags.out_dir {
            cfg.out_dir = o.clone();
        }
        if let Some(s) = flags.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.bce.validate()?;
        self.regressor.validate()?;
        self.dpo.validate()?;
        self.decoding().validate()?;
        if self.sampling.n == 0 {
            return Err(Error::invalid("sampling.n must be at least 1"));
        }
        if !(self.corpus.regressor_fraction > 0.0 && self.corpus.regressor_fraction < 1.0) {
            return Err(Error::invalid("corpus.regressor_fraction must be in (0, 1)"));
        }
        if self.bce.answer_source != AnswerSource::MostLikelySample {
            return Err(Error::invalid(
                "the pipeline scores the most likely sample; supplied answers need the library API",
            ));
        }
        if self.eval.bins == 0 || self.eval.scenarios.is_empty() {
            return Err(Error::invalid("eval.bins and eval.scenarios must be non-empty"));
        }
        Ok(())
    }

    pub fn decoding(&self) -> DecodingParams {
        DecodingParams {
            top_p: self.sampling.top_p,
            temperature: self.sampling.temperature,
            max_tokens: self.sampling.max_tokens,
            seed: self.seed,
        }
    }

    /// Regressor settings with the shared α and a seed derived from the run.
    pub fn regressor_config(&self) -> RegressorConfig {
        RegressorConfig {
            alpha: self.bce.alpha,
            seed: crate::seed::mix(&[self.seed, 1]),
            ..self.regressor.clone()
        }
    }

    pub fn dpo_config(&self) -> DpoConfig {
        DpoConfig {
            seed: crate::seed::mix(&[self.seed, 2]),
            ..self.dpo.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn defaults_validate() {
        let c = PipelineConfig::load(None, [], &Overrides::default()).unwrap();
        assert_eq!(c.sampling.n, 20);
        assert_eq!(c.sampling.max_tokens, 60);
        assert_eq!((c.bce.alpha, c.bce.gamma), (0.7, 0.3));
    }

    #[test]
    fn precedence_is_flags_env_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "seed = 1\n[bce]\ngamma = 0.5\n[sampling]\nn = 4\n").unwrap();
        let e = env(&[("CONFPREF__SEED", "2"), ("CONFPREF__BCE__GAMMA", "0.25"), ("OTHER", "x")]);
        let flags = Overrides { seed: Some(3), out_dir: None };
        let c = PipelineConfig::load(Some(&path), e.clone(), &flags).unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.bce.gamma, 0.25);
        assert_eq!(c.sampling.n, 4);
        let c = PipelineConfig::load(Some(&path), e, &Overrides::default()).unwrap();
        assert_eq!(c.seed, 2);
        assert_eq!(c.out_dir, dir.path().join("out"));
    }

    #[test]
    fn env_strings_and_enums() {
        let e = env(&[("CONFPREF__BCE__VARIANT", "exponentiated"), ("CONFPREF__EVAL__DATASET", "mine")]);
        let c = PipelineConfig::load(None, e, &Overrides::default()).unwrap();
        assert_eq!(c.bce.variant, crate::bce::RatioVariant::Exponentiated);
        assert_eq!(c.eval.dataset, "mine");
    }

    #[test]
    fn invalid_values_are_rejected() {
        let e = env(&[("CONFPREF__BCE__ALPHA", "0")]);
        assert!(PipelineConfig::load(None, e, &Overrides::default()).is_err());
        let e = env(&[("CONFPREF__SAMPLING__BOGUS", "1")]);
        assert!(PipelineConfig::load(None, e, &Overrides::default()).is_err());
    }
}
