//! Reference-free uncertainty estimators.
//!
//! Semantic entropy clusters the sampled responses with an
//! [`EquivalenceJudge`] (union-find closure, so the relation is transitive)
//! and takes the entropy of the cluster weights. Predictive entropy is the
//! negated mean log-probability of the samples. P(True) and verbalized
//! confidence are single-shot baselines that query the backend directly.
//!
//! # Score parser
//!
//! Verbalized replies are parsed with the regular expression
//!
//! ```text
//! (?i)score:\s*([0-9]+)
//! ```
//!
//! The first match wins. Captured integers above 100 and replies without a
//! match yield a missing result (value `null` in `estimates.jsonl`), never 0.

pub mod judge;

use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::backend::{length_normalized_logprob, Backend, SampleSet};
use crate::error::{Error, Result};
use crate::io;
use crate::prompts;
use crate::regressor::confidence_from_se;

pub use judge::{extract_answer, normalize_answer, EquivalenceJudge, JudgeClient};

/// Regular expression for the verbalized score reply.
pub const SCORE_PATTERN: &str = r"(?i)score:\s*([0-9]+)";

/// How cluster weights are formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterWeighting {
    /// |c| / n.
    #[default]
    Count,
    /// Proportional to the summed exp(P') of the members.
    Probability,
}

/// A partition of record indices with one weight per cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticClustering {
    /// Clusters ordered by their smallest member; members ascending.
    pub clusters: Vec<Vec<usize>>,
    pub weights: Vec<f64>,
}

impl SemanticClustering {
    /// Builds a clustering from explicit weights (for analysis and tests).
    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::invalid("no clusters"));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::invalid("cluster weights must be finite and nonnegative"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("cluster weights sum to {total}")));
        }
        Ok(Self {
            clusters: (0..weights.len()).map(|i| vec![i]).collect(),
            weights,
        })
    }
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn find(&mut self, mut x: usize) -> usize {
        while self.0[x] != x {
            self.0[x] = self.0[self.0[x]];
            x = self.0[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.0[ra.max(rb)] = ra.min(rb);
        }
    }
}

/// Groups the records of `samples` into semantic equivalence classes with
/// count weights.
pub fn cluster(samples: &SampleSet, judge: &EquivalenceJudge) -> Result<SemanticClustering> {
    cluster_weighted(samples, judge, ClusterWeighting::Count)
}

pub fn cluster_weighted(
    samples: &SampleSet,
    judge: &EquivalenceJudge,
    weighting: ClusterWeighting,
) -> Result<SemanticClustering> {
    let texts: Vec<&str> = samples.records.iter().map(|r| r.text.as_str()).collect();
    let n = texts.len();
    if n == 0 {
        return Err(Error::invalid(format!(
            "sample set {} is empty",
            samples.question_id
        )));
    }
    let mut uf = UnionFind((0..n).collect());
    let keys: Option<Vec<String>> = texts.iter().map(|t| judge.key(t)).collect();
    for i in 0..n {
        for j in (i + 1)..n {
            if uf.find(i) == uf.find(j) {
                continue;
            }
            let same = match &keys {
                Some(k) => k[i] == k[j],
                None => judge.equivalent(texts[i], texts[j])?,
            };
            if same {
                uf.union(i, j);
            }
        }
    }
    let mut clusters: Vec<Vec<usize>> = Vec::new();
    let mut slot = vec![usize::MAX; n];
    for i in 0..n {
        let root = uf.find(i);
        if slot[root] == usize::MAX {
            slot[root] = clusters.len();
            clusters.push(Vec::new());
        }
        clusters[slot[root]].push(i);
    }
    let weights = match weighting {
        ClusterWeighting::Count => clusters
            .iter()
            .map(|c| c.len() as f64 / n as f64)
            .collect(),
        ClusterWeighting::Probability => {
            let p: Vec<f64> = samples
                .records
                .iter()
                .map(|r| length_normalized_logprob(r).map(f64::exp))
                .collect::<Result<_>>()?;
            let mass: Vec<f64> = clusters
                .iter()
                .map(|c| c.iter().map(|i| p[*i]).sum())
                .collect();
            let total: f64 = mass.iter().sum();
            mass.into_iter().map(|m| m / total).collect()
        }
    };
    Ok(SemanticClustering { clusters, weights })
}

/// −Σ w ln w over the cluster weights (terms with w = 0 contribute 0).
pub fn semantic_entropy(clustering: &SemanticClustering) -> f64 {
    let h: f64 = clustering
        .weights
        .iter()
        .filter(|w| **w > 0.0)
        .map(|w| -w * w.ln())
        .sum();
    h.max(0.0)
}

/// −mean(P') over the records, or −mean(ln P) when `normalized` is false.
pub fn predictive_entropy(samples: &SampleSet, normalized: bool) -> Result<f64> {
    if samples.records.is_empty() {
        return Err(Error::invalid(format!(
            "sample set {} is empty",
            samples.question_id
        )));
    }
    let mut total = 0.0;
    for r in &samples.records {
        total += if normalized {
            length_normalized_logprob(r)?
        } else {
            let lp = r.sequence_logprob();
            if !lp.is_finite() {
                return Err(Error::NonFinite(format!("sequence log-probability {lp}")));
            }
            lp
        };
    }
    // Adding 0.0 turns a -0.0 into +0.0.
    Ok((-total / samples.records.len() as f64).max(0.0) + 0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    SemanticEntropy,
    PredictiveEntropy,
    PTrue,
    Verbalized,
}

impl Estimator {
    pub fn name(self) -> &'static str {
        match self {
            Estimator::SemanticEntropy => "semantic_entropy",
            Estimator::PredictiveEntropy => "predictive_entropy",
            Estimator::PTrue => "p_true",
            Estimator::Verbalized => "verbalized",
        }
    }
}

/// One estimator output. A missing verbalized score has `value` NaN, written
/// as `null`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatorResult {
    pub estimator: Estimator,
    #[serde(serialize_with = "nan_as_null", deserialize_with = "null_as_nan")]
    pub value: f64,
    pub confidence: Option<f64>,
}

fn nan_as_null<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_nan() {
        s.serialize_none()
    } else {
        s.serialize_f64(*v)
    }
}

fn null_as_nan<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}

impl EstimatorResult {
    /// Entropy-valued result with confidence e^(−α·value).
    pub fn entropy(estimator: Estimator, value: f64, alpha: f64) -> Result<Self> {
        Ok(Self {
            estimator,
            value,
            confidence: Some(confidence_from_se(value, alpha)?),
        })
    }

    pub fn is_missing(&self) -> bool {
        self.value.is_nan()
    }
}

/// P(True) estimator bound to a backend whose vocabulary has the token `True`.
pub struct PTrue<'a> {
    backend: &'a dyn Backend,
    true_id: u32,
}

impl<'a> PTrue<'a> {
    /// Fails when the backend has no `True` token.
    pub fn register(backend: &'a dyn Backend) -> Result<Self> {
        let true_id = backend.token_id("True").ok_or_else(|| Error::MissingToken {
            backend: backend.descriptor().name.clone(),
            token: "True".into(),
        })?;
        Ok(Self { backend, true_id })
    }

    pub fn estimate(&self, question: &str, answer: &str) -> Result<EstimatorResult> {
        let p = self
            .backend
            .next_token_probability(&prompts::p_true(question, answer), self.true_id)
            .map_err(|e| Error::Backend {
                question_id: question.to_string(),
                message: e.message,
                retriable: e.retriable,
            })?;
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Contract(format!("P(True) = {p} outside [0, 1]")));
        }
        Ok(EstimatorResult {
            estimator: Estimator::PTrue,
            value: p,
            confidence: Some(p),
        })
    }
}

/// Convenience wrapper around [`PTrue::register`] and [`PTrue::estimate`].
pub fn p_true(backend: &dyn Backend, question: &str, answer: &str) -> Result<EstimatorResult> {
    PTrue::register(backend)?.estimate(question, answer)
}

fn score_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(SCORE_PATTERN).expect("score pattern compiles"))
}

/// Score in [0, 1] from a reply, or `None` when it cannot be parsed.
pub fn parse_score(reply: &str) -> Option<f64> {
    let caps = score_regex().captures(reply)?;
    let score: u32 = caps[1].parse().ok()?;
    (score <= 100).then(|| f64::from(score) / 100.0)
}

pub fn verbalized_confidence(
    backend: &dyn Backend,
    question: &str,
    answer: &str,
    seed: u64,
) -> Result<EstimatorResult> {
    let reply = backend
        .complete(&prompts::verbalized_score(question, answer), seed)
        .map_err(|e| Error::Backend {
            question_id: question.to_string(),
            message: e.message,
            retriable: e.retriable,
        })?;
    let score = parse_score(&reply);
    if score.is_none() {
        log::warn!("unparseable verbalized score reply: {reply:?}");
    }
    Ok(EstimatorResult {
        estimator: Estimator::Verbalized,
        value: score.unwrap_or(f64::NAN),
        confidence: score,
    })
}

/// One line of `estimates.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateRow {
    pub question_id: String,
    #[serde(flatten)]
    pub result: EstimatorResult,
}

pub fn write_estimates(path: &Path, rows: &[EstimateRow]) -> Result<()> {
    io::write_jsonl(path, rows)
}

pub fn read_estimates(path: &Path) -> Result<Vec<EstimateRow>> {
    io::read_jsonl(path)
}
