use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::artifacts::*;
use super::{ArgumentKind, PipelineConfig, ReportFormat, Stage};
use crate::backend::{read_samples, sample_responses, write_samples, MockBackend, SampleSet};
use crate::bce::{estimate_for_set, read_confidences, write_confidences, ConfidenceEstimate};
use crate::corpus::{read_corpus, split_corpus, toy_backend, toy_corpus, write_corpus, LabeledQuestion};
use crate::dpo::{self, DpoBatch, TabularPolicy};
use crate::error::{Error, Result};
use crate::estimators::{
    self, cluster_weighted, predictive_entropy, read_estimates, semantic_entropy, write_estimates,
    EquivalenceJudge, EstimateRow, Estimator, EstimatorResult,
};
use crate::eval::{self, report, ArgumentSource, CalibrationReport, ScriptedArguments, MATCHING_RULE};
use crate::io;
use crate::prefs::{self, Conversation};
use crate::regressor::{self, RegressorModel, TrainingExample};
use crate::seed;

type Notes = BTreeMap<String, Value>;

// Stream labels for seeds derived from the run seed.
const TOY_CORPUS_STREAM: u64 = 3;
const TABLE_STREAM: u64 = 4;
const SPLIT_STREAM: u64 = 5;
const VERBALIZED_STREAM: u64 = 6;
const PREFS_STREAM: u64 = 7;
const EVAL_STREAM: u64 = 8;

pub(super) fn run(stage: Stage, cfg: &PipelineConfig) -> Result<Notes> {
    match stage {
        Stage::Sample => sample(cfg),
        Stage::Estimate => estimate(cfg),
        Stage::TrainRegressor => train_regressor(cfg),
        Stage::Confidence => confidence(cfg),
        Stage::BuildPrefs => build_prefs(cfg),
        Stage::TrainDpo => train_dpo(cfg),
        Stage::Evaluate => evaluate(cfg),
        Stage::Report(f) => report_stage(cfg, f),
    }
}

fn path(cfg: &PipelineConfig, name: &str) -> PathBuf {
    cfg.out_dir.join(name)
}

fn backend(cfg: &PipelineConfig, corpus: &[LabeledQuestion]) -> Result<MockBackend> {
    toy_backend(
        corpus,
        seed::mix(&[cfg.seed, TABLE_STREAM]),
        cfg.backend.feature_dim,
        cfg.backend.dialogue,
    )
}

fn load_corpus(cfg: &PipelineConfig) -> Result<Vec<LabeledQuestion>> {
    read_corpus(&path(cfg, CORPUS))
}

/// (regressor part, preference part).
fn split(cfg: &PipelineConfig, corpus: &[LabeledQuestion]) -> (Vec<LabeledQuestion>, Vec<LabeledQuestion>) {
    split_corpus(
        corpus,
        cfg.corpus.regressor_fraction,
        seed::mix(&[cfg.seed, SPLIT_STREAM]),
    )
}

fn by_id<T>(rows: Vec<T>, key: impl Fn(&T) -> &str) -> BTreeMap<String, T> {
    rows.into_iter().map(|r| (key(&r).to_string(), r)).collect()
}

fn lookup<'a, T>(map: &'a BTreeMap<String, T>, id: &str, what: &str) -> Result<&'a T> {
    map.get(id)
        .ok_or_else(|| Error::format(what, format!("no entry for question {id}")))
}

fn write_json<T: Serialize>(p: &std::path::Path, v: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(v)?;
    bytes.push(b'\n');
    io::write_atomic(p, &bytes)
}

fn sample(cfg: &PipelineConfig) -> Result<Notes> {
    let corpus = match &cfg.corpus.path {
        Some(p) => read_corpus(p)?,
        None => toy_corpus(cfg.corpus.toy_questions, seed::mix(&[cfg.seed, TOY_CORPUS_STREAM])),
    };
    if corpus.is_empty() {
        return Err(Error::invalid("the corpus is empty"));
    }
    let backend = backend(cfg, &corpus)?;
    let params = cfg.decoding();
    let sets = corpus
        .iter()
        .map(|q| sample_responses(&backend, &q.question_id, &q.question, cfg.sampling.n, &params))
        .collect::<Result<Vec<_>>>()?;
    write_corpus(&path(cfg, CORPUS), &corpus)?;
    write_samples(&path(cfg, SAMPLES), &sets, cfg.sampling.compact_features)?;
    Ok(BTreeMap::from([
        ("questions".into(), json!(corpus.len())),
        ("samples_per_question".into(), json!(cfg.sampling.n)),
    ]))
}

fn estimate(cfg: &PipelineConfig) -> Result<Notes> {
    let corpus = load_corpus(cfg)?;
    let backend = backend(cfg, &corpus)?;
    let sets = by_id(read_samples(&path(cfg, SAMPLES))?, |s: &SampleSet| &s.question_id);
    let judge = cfg.estimators.judge.judge();
    let alpha = cfg.bce.alpha;
    let ptrue = estimators::PTrue::register(&backend)?;
    let mut rows = Vec::new();
    let mut missing_scores = 0usize;
    for q in &corpus {
        let set = lookup(&sets, &q.question_id, SAMPLES)?;
        let clustering = cluster_weighted(set, &judge, cfg.estimators.weighting)?;
        let answer = &set.records[set.most_likely_index()?].text;
        let verbal = estimators::verbalized_confidence(
            &backend,
            &q.question,
            answer,
            seed::mix(&[cfg.seed, VERBALIZED_STREAM, seed::stable_hash(&q.question_id)]),
        )?;
        missing_scores += usize::from(verbal.is_missing());
        for result in [
            EstimatorResult::entropy(Estimator::SemanticEntropy, semantic_entropy(&clustering), alpha)?,
            EstimatorResult::entropy(
                Estimator::PredictiveEntropy,
                predictive_entropy(set, cfg.estimators.predictive_normalized)?,
                alpha,
            )?,
            ptrue.estimate(&q.question, answer)?,
            verbal,
        ] {
            rows.push(EstimateRow {
                question_id: q.question_id.clone(),
                result,
            });
        }
    }
    write_estimates(&path(cfg, ESTIMATES), &rows)?;
    Ok(BTreeMap::from([
        ("rows".into(), json!(rows.len())),
        ("unparsed_verbalized_scores".into(), json!(missing_scores)),
    ]))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RegressorReport {
    train_questions: Vec<String>,
    feature_dim: usize,
    param_count: usize,
    val_mse: f64,
    history: Vec<f64>,
    config: regressor::RegressorConfig,
}

fn train_regressor(cfg: &PipelineConfig) -> Result<Notes> {
    let corpus = load_corpus(cfg)?;
    let (reg_part, _) = split(cfg, &corpus);
    if reg_part.is_empty() {
        return Err(Error::invalid("the regressor split is empty; use a larger corpus"));
    }
    let sets = by_id(read_samples(&path(cfg, SAMPLES))?, |s: &SampleSet| &s.question_id);
    let se: BTreeMap<String, f64> = read_estimates(&path(cfg, ESTIMATES))?
        .into_iter()
        .filter(|r| r.result.estimator == Estimator::SemanticEntropy)
        .map(|r| (r.question_id, r.result.value))
        .collect();
    let mut dataset = Vec::new();
    for q in &reg_part {
        let set = lookup(&sets, &q.question_id, SAMPLES)?;
        dataset.push(TrainingExample {
            features: set.records.iter().map(|r| r.feature.clone()).collect(),
            target_se: *lookup(&se, &q.question_id, ESTIMATES)?,
        });
    }
    let config = cfg.regressor_config();
    let model = regressor::train(&dataset, &config)?;
    model.save(&path(cfg, REGRESSOR))?;
    let rep = RegressorReport {
        train_questions: reg_part.iter().map(|q| q.question_id.clone()).collect(),
        feature_dim: model.feature_dim,
        param_count: model.param_count(),
        val_mse: model.val_mse,
        history: model.history.clone(),
        config,
    };
    write_json(&path(cfg, REGRESSOR_REPORT), &rep)?;
    Ok(BTreeMap::from([
        ("examples".into(), json!(dataset.len())),
        ("val_mse".into(), json!(model.val_mse)),
    ]))
}

fn confidence(cfg: &PipelineConfig) -> Result<Notes> {
    let corpus = load_corpus(cfg)?;
    let (_, pref_part) = split(cfg, &corpus);
    let sets = by_id(read_samples(&path(cfg, SAMPLES))?, |s: &SampleSet| &s.question_id);
    let model = RegressorModel::load(&path(cfg, REGRESSOR))?;
    let rows = pref_part
        .iter()
        .map(|q| estimate_for_set(lookup(&sets, &q.question_id, SAMPLES)?, None, &model, &cfg.bce))
        .collect::<Result<Vec<_>>>()?;
    write_confidences(&path(cfg, CONFIDENCES), &rows)?;
    Ok(BTreeMap::from([
        ("rows".into(), json!(rows.len())),
        ("variant".into(), json!(cfg.bce.variant.label())),
    ]))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub(super) struct ThresholdsFile {
    pub thresholds: prefs::ThresholdSpec,
    pub confidences: usize,
    pub retained: Vec<String>,
    pub dropped: Vec<String>,
}

fn build_prefs(cfg: &PipelineConfig) -> Result<Notes> {
    let corpus = load_corpus(cfg)?;
    let backend = backend(cfg, &corpus)?;
    let gold = by_id(corpus.clone(), |q: &LabeledQuestion| &q.question_id);
    let rows = read_confidences(&path(cfg, CONFIDENCES))?;
    let confs: Vec<f64> = rows.iter().map(|r| r.confidence_qa).collect();
    let spec = prefs::compute_thresholds(&confs)?;
    let run_seed = seed::mix(&[cfg.seed, PREFS_STREAM]);
    let (mut pairs, mut retained, mut dropped) = (Vec::new(), Vec::new(), Vec::new());
    for r in &rows {
        let q = lookup(&gold, &r.question_id, CORPUS)?;
        let Some((s, a_correct)) = prefs::generate_opposing_statement(
            &backend,
            &q.question_id,
            &q.question,
            &r.answer_text,
            &q.gold,
            run_seed,
        )?
        else {
            dropped.push(q.question_id.clone());
            continue;
        };
        let conv = Conversation {
            question_id: q.question_id.clone(),
            q: q.question.clone(),
            a: r.answer_text.clone(),
            s,
            gold: Some(q.gold.clone()),
            a_is_correct: Some(a_correct),
        };
        let cands = prefs::generate_candidates(&backend, &conv, cfg.prefs.stance_source, run_seed)?;
        let band = prefs::assign_band(r.confidence_qa, &spec);
        pairs.extend(prefs::build_pairs(&conv, &cands, band, r.confidence_qa)?);
        retained.push(q.question_id.clone());
    }
    prefs::write_prefs(&path(cfg, PREFS), &pairs)?;
    let duplicates = pairs.iter().filter(|p| p.duplicate).count();
    let file = ThresholdsFile {
        thresholds: spec,
        confidences: rows.len(),
        retained,
        dropped,
    };
    write_json(&path(cfg, THRESHOLDS), &file)?;
    Ok(BTreeMap::from([
        ("pairs".into(), json!(pairs.len())),
        ("duplicate_pairs".into(), json!(duplicates)),
        ("retained_conversations".into(), json!(file.retained.len())),
        ("dropped_conversations".into(), json!(file.dropped)),
    ]))
}

fn train_dpo(cfg: &PipelineConfig) -> Result<Notes> {
    let prefs_path = path(cfg, PREFS);
    let lines = prefs::read_prefs(&prefs_path)?;
    let batch = DpoBatch::from_prefs(&lines);
    let skipped = lines.len() - batch.items.len();
    let policy = TabularPolicy::for_batch(&batch)?;
    let config = cfg.dpo_config();
    let run = match dpo::train(policy, &batch, &config) {
        Ok(run) => run,
        Err(Error::Diverged { step, loss, limit, history }) => {
            let partial: Vec<dpo::StepRecord> = history
                .iter()
                .enumerate()
                .map(|(i, l)| dpo::StepRecord {
                    step: i,
                    loss: *l,
                    mean_margin: f64::NAN,
                })
                .collect();
            dpo::write_history(&path(cfg, TRAINING_HISTORY), &partial)?;
            return Err(Error::Diverged { step, loss, limit, history });
        }
        Err(e) => return Err(e),
    };
    dpo::write_history(&path(cfg, TRAINING_HISTORY), &run.history)?;
    write_json(&path(cfg, POLICY), &run.policy)?;
    let manifest = json!({
        "dataset": PREFS,
        "dataset_sha256": io::sha256_file(&prefs_path)?,
        "pairs": batch.items.len(),
        "skipped_duplicate_pairs": skipped,
        "config": config,
        "policy": "tabular",
        "policy_params": run.policy.len(),
        "steps": run.history.len(),
        "initial_loss": run.initial_loss,
        "final_loss": run.final_loss,
        "initial_margin": run.initial_margin,
        "final_margin": run.final_margin,
    });
    write_json(&path(cfg, DPO_MANIFEST), &manifest)?;
    Ok(BTreeMap::from([
        ("steps".into(), json!(run.history.len())),
        ("final_loss".into(), json!(run.final_loss)),
    ]))
}

/// The highest-mass answer of the mock that does not match `gold`.
fn distractor(backend: &MockBackend, q: &LabeledQuestion) -> Result<String> {
    let judge = EquivalenceJudge::ExtractedAnswerMatch;
    let mut best: Option<(String, f64)> = None;
    if let Some(t) = backend.table(&q.question) {
        for (ans, m) in t.answer_masses() {
            if !judge.equivalent(&ans, &q.gold)? && best.as_ref().map_or(true, |b| m > b.1) {
                best = Some((ans.to_uppercase(), m));
            }
        }
    }
    Ok(best.map_or_else(|| format!("not {}", q.gold), |b| b.0))
}

/// Confidence scores and correctness labels for one calibration method.
fn method_scores(
    rows: &[ConfidenceEstimate],
    estimates: &[EstimateRow],
    gold: &BTreeMap<String, LabeledQuestion>,
) -> Result<Vec<(String, Vec<f64>, Vec<bool>)>> {
    let judge = EquivalenceJudge::ExtractedAnswerMatch;
    let mut correct = BTreeMap::new();
    for r in rows {
        let q = lookup(gold, &r.question_id, CORPUS)?;
        correct.insert(r.question_id.clone(), judge.equivalent(&r.answer_text, &q.gold)?);
    }
    let mut out = vec![
        (
            "bce".to_string(),
            rows.iter().map(|r| r.confidence_qa).collect(),
            rows.iter().map(|r| correct[&r.question_id]).collect(),
        ),
        (
            "regressor".to_string(),
            rows.iter().map(|r| r.confidence_q).collect(),
            rows.iter().map(|r| correct[&r.question_id]).collect(),
        ),
    ];
    for est in [
        Estimator::SemanticEntropy,
        Estimator::PredictiveEntropy,
        Estimator::PTrue,
        Estimator::Verbalized,
    ] {
        let (mut c, mut y) = (Vec::new(), Vec::new());
        for e in estimates.iter().filter(|e| e.result.estimator == est) {
            if let (Some(conf), Some(ok)) = (e.result.confidence, correct.get(&e.question_id)) {
                c.push(conf);
                y.push(*ok);
            }
        }
        if !c.is_empty() {
            out.push((est.name().to_string(), c, y));
        }
    }
    Ok(out)
}

fn evaluate(cfg: &PipelineConfig) -> Result<Notes> {
    let corpus = load_corpus(cfg)?;
    let backend = backend(cfg, &corpus)?;
    let gold = by_id(corpus.clone(), |q: &LabeledQuestion| &q.question_id);
    let run_seed = seed::mix(&[cfg.seed, EVAL_STREAM]);
    let mut episodes = Vec::new();
    for q in &corpus {
        let args = match cfg.eval.arguments {
            ArgumentKind::Backend => ArgumentSource::Backend(&backend),
            ArgumentKind::Scripted => {
                ArgumentSource::Scripted(ScriptedArguments::for_answers(&q.gold, &distractor(&backend, q)?))
            }
        };
        for &scenario in &cfg.eval.scenarios {
            episodes.push(eval::run_episode(&backend, q, scenario, &args, run_seed)?);
        }
    }
    eval::write_episodes(&path(cfg, EPISODES), &episodes)?;
    let result = eval::compute_metrics(&cfg.eval.dataset, &episodes)?;
    io::write_atomic(&path(cfg, RESULTS), &report::results_csv(std::slice::from_ref(&result))?)?;

    let rows = read_confidences(&path(cfg, CONFIDENCES))?;
    let estimates = read_estimates(&path(cfg, ESTIMATES))?;
    let mut reports: Vec<(String, CalibrationReport)> = Vec::new();
    for (name, c, y) in method_scores(&rows, &estimates, &gold)? {
        reports.push((name, eval::reliability_curve(&c, &y, cfg.eval.bins)?));
    }
    io::write_atomic(&path(cfg, CALIBRATION_CSV), &report::calibration_csv(&reports)?)?;
    write_json(&path(cfg, CALIBRATION_JSON), &reports)?;
    Ok(BTreeMap::from([
        ("episodes".into(), json!(episodes.len())),
        ("parse_failures".into(), json!(result.parse_failures)),
        ("average".into(), json!(result.average)),
    ]))
}

#[derive(Serialize)]
struct ReportRow<'a> {
    section: &'a str,
    name: &'a str,
    metric: &'a str,
    value: String,
}

fn report_stage(cfg: &PipelineConfig, format: ReportFormat) -> Result<Notes> {
    let results = report::read_results_csv(&path(cfg, RESULTS))?;
    let bytes = std::fs::read(path(cfg, CALIBRATION_JSON)).map_err(|e| Error::io(path(cfg, CALIBRATION_JSON), e))?;
    let reports: Vec<(String, CalibrationReport)> = serde_json::from_slice(&bytes)?;
    let variant = cfg.bce.variant.label();
    match format {
        ReportFormat::Csv => {
            let mut rows = vec![
                ("config", "bce", "ratio_variant", variant.to_string()),
                ("config", "bce", "gamma", cfg.bce.gamma.to_string()),
                ("config", "bce", "alpha", cfg.bce.alpha.to_string()),
                (
                    "config",
                    "predictive_entropy",
                    "length_normalized",
                    cfg.estimators.predictive_normalized.to_string(),
                ),
                ("config", "calibration", "bins", cfg.eval.bins.to_string()),
            ];
            for (_, r) in &results {
                for (metric, v) in [
                    ("llm_correct_acc", r.llm_correct_acc),
                    ("llm_false_acc", r.llm_false_acc),
                    ("average", r.average),
                    ("both", r.both),
                    ("either", r.either),
                ] {
                    rows.push(("benchmark", r.dataset.as_str(), metric, v.to_string()));
                }
                rows.push(("benchmark", r.dataset.as_str(), "n", r.n.to_string()));
                rows.push(("benchmark", r.dataset.as_str(), "parse_failures", r.parse_failures.to_string()));
            }
            for (name, rep) in &reports {
                rows.push(("calibration", name.as_str(), "ece", rep.ece.to_string()));
                rows.push((
                    "calibration",
                    name.as_str(),
                    "auroc",
                    rep.auroc.map(|a| a.to_string()).unwrap_or_default(),
                ));
            }
            let mut out = format!("# matching rule: {MATCHING_RULE}\n").into_bytes();
            let mut w = csv::Writer::from_writer(Vec::new());
            for (section, name, metric, value) in &rows {
                w.serialize(ReportRow {
                    section,
                    name,
                    metric,
                    value: value.clone(),
                })
                .map_err(|e| Error::format("report", e.to_string()))?;
            }
            out.extend(w.into_inner().map_err(|e| Error::format("report", e.to_string()))?);
            io::write_atomic(&path(cfg, REPORT_CSV), &out)?;
        }
        ReportFormat::Svg => {
            let svg = report::reliability_svg(&reports, &format!("reliability ({variant} ratio)"));
            io::write_atomic(&path(cfg, REPORT_SVG), svg.as_bytes())?;
        }
    }
    Ok(BTreeMap::from([("methods".into(), json!(reports.len()))]))
}
