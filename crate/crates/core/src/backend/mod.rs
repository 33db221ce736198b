//! Generation backend contract and Monte Carlo response sampling.
//!
//! A [`Backend`] produces sampled continuations carrying per-token natural-log
//! probabilities and one hidden-state feature vector (the configured layer at
//! the last generated token). [`sample_responses`] draws the `n` records that
//! every confidence estimator consumes; [`MockBackend`] is a fully enumerable
//! backend used as the test oracle substrate.

mod mock;

use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::prompts;
use crate::seed;

pub use mock::{
    DialogueStyle, DistributionTable, FeatureRule, MockBackend, MockBackendBuilder, Script,
    EOS_TOKEN,
};

/// Default number of Monte Carlo samples per question.
pub const DEFAULT_SAMPLES: usize = 20;

/// Empty generations are redrawn this many times before giving up.
pub const MAX_EMPTY_RETRIES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodingParams {
    pub top_p: f64,
    pub temperature: f64,
    /// Truncation bound K on generated tokens.
    pub max_tokens: usize,
    pub seed: u64,
}

impl Default for DecodingParams {
    fn default() -> Self {
        Self {
            top_p: 0.6,
            temperature: 0.9,
            max_tokens: 60,
            seed: 0,
        }
    }
}

impl DecodingParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::invalid(format!("top_p {} not in (0, 1]", self.top_p)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::invalid(format!(
                "temperature {} must be positive",
                self.temperature
            )));
        }
        if self.max_tokens == 0 {
            return Err(Error::invalid("max_tokens must be at least 1"));
        }
        Ok(())
    }
}

/// One sampled continuation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub token_ids: Vec<u32>,
    /// Natural-log conditional probability of each emitted token.
    pub token_logprobs: Vec<f64>,
    /// Hidden state at the feature layer for the last generated token.
    #[serde(deserialize_with = "deserialize_feature")]
    pub feature: Vec<f32>,
    pub text: String,
    /// Generation stopped at the token bound rather than end-of-sequence.
    pub truncated: bool,
}

impl GenerationRecord {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Sum of token log-probabilities, i.e. ln P(sequence).
    pub fn sequence_logprob(&self) -> f64 {
        self.token_logprobs.iter().sum()
    }

    fn check(&self, feature_dim: usize, max_tokens: usize) -> Result<()> {
        if self.token_logprobs.len() != self.token_ids.len() {
            return Err(Error::Contract(format!(
                "{} token ids but {} log-probabilities",
                self.token_ids.len(),
                self.token_logprobs.len()
            )));
        }
        if self.token_ids.len() > max_tokens {
            return Err(Error::Contract(format!(
                "record has {} tokens, bound is {max_tokens}",
                self.token_ids.len()
            )));
        }
        if let Some(lp) = self.token_logprobs.iter().find(|lp| !(**lp <= 0.0)) {
            return Err(Error::Contract(format!("token log-probability {lp} is not <= 0")));
        }
        if self.feature.len() != feature_dim {
            return Err(Error::Contract(format!(
                "feature has dimension {}, backend declares {feature_dim}",
                self.feature.len()
            )));
        }
        Ok(())
    }
}

/// Length-normalized log-probability P' = ln P / length, over the emitted
/// tokens only (prompt excluded, truncated records included as emitted).
pub fn length_normalized_logprob(record: &GenerationRecord) -> Result<f64> {
    if record.token_logprobs.is_empty() {
        return Err(Error::invalid("length-normalized log-probability of an empty record"));
    }
    let sum = record.sequence_logprob();
    if !sum.is_finite() {
        return Err(Error::NonFinite(format!("sequence log-probability {sum}")));
    }
    Ok((sum / record.token_logprobs.len() as f64).min(0.0))
}

/// The `n` responses drawn for one question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSet {
    pub question_id: String,
    pub question: String,
    pub decoding: DecodingParams,
    pub records: Vec<GenerationRecord>,
}

impl SampleSet {
    pub fn n(&self) -> usize {
        self.records.len()
    }

    pub fn features(&self) -> Vec<&[f32]> {
        self.records.iter().map(|r| r.feature.as_slice()).collect()
    }

    pub fn normalized_logprobs(&self) -> Result<Vec<f64>> {
        self.records.iter().map(length_normalized_logprob).collect()
    }

    /// Index of the record with the highest P' (lowest index on ties).
    pub fn most_likely_index(&self) -> Result<usize> {
        let lps = self.normalized_logprobs()?;
        let mut best = 0;
        for (i, lp) in lps.iter().enumerate() {
            if *lp > lps[best] {
                best = i;
            }
        }
        if lps.is_empty() {
            return Err(Error::invalid("empty sample set"));
        }
        Ok(best)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub name: String,
    pub layer_count: usize,
    pub feature_layer: usize,
    pub feature_dim: usize,
    pub vocab_size: usize,
}

impl BackendDescriptor {
    pub fn validate(&self) -> Result<()> {
        if self.feature_layer >= self.layer_count {
            return Err(Error::invalid(format!(
                "feature layer {} outside 0..{}",
                self.feature_layer, self.layer_count
            )));
        }
        if self.feature_dim == 0 || self.vocab_size == 0 {
            return Err(Error::invalid("feature_dim and vocab_size must be positive"));
        }
        Ok(())
    }
}

/// round(0.8 * layer_count), clamped to a valid index: 26 for 32 layers.
pub fn default_feature_layer(layer_count: usize) -> usize {
    let idx = (0.8 * layer_count as f64).round() as usize;
    idx.min(layer_count.saturating_sub(1))
}

/// Whether a backend instance tolerates concurrent calls.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Concurrency {
    Reentrant,
    SingleCaller,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{message}")]
pub struct BackendError {
    pub message: String,
    pub retriable: bool,
}

impl BackendError {
    pub fn retriable(message: impl Into<String>) -> Self {
        Self {
            message: message.into(),
            retriable: true,
        }
    }

    pub fn fatal(message: impl Into<String>) -> Self {
        Self {
            message: message.into(),
            retriable: false,
        }
    }
}

/// A language model that can be sampled and queried.
///
/// Real models plug in from outside by implementing this trait; the pipeline
/// calls each instance serially unless it reports [`Concurrency::Reentrant`].
pub trait Backend {
    fn descriptor(&self) -> &BackendDescriptor;

    fn concurrency(&self) -> Concurrency {
        Concurrency::SingleCaller
    }

    /// Draws one continuation of `prompt` under `params`, using `seed` as the
    /// only source of randomness.
    fn sample(
        &self,
        prompt: &str,
        params: &DecodingParams,
        seed: u64,
    ) -> Result<GenerationRecord, BackendError>;

    /// Free-text completion.
    fn complete(&self, prompt: &str, seed: u64) -> Result<String, BackendError>;

    /// Probability that the first generated token after `prompt` is `token_id`.
    fn next_token_probability(&self, prompt: &str, token_id: u32) -> Result<f64, BackendError>;

    fn token_id(&self, token: &str) -> Option<u32>;
}

/// Seed for record `index` of a question, attempt `attempt`.
pub fn record_seed(run_seed: u64, question_id: &str, index: usize, attempt: usize) -> u64 {
    seed::mix(&[
        run_seed,
        seed::stable_hash(question_id),
        index as u64,
        attempt as u64,
    ])
}

/// Samples `n` responses to the initial-response prompt for `question`.
///
/// Empty generations are redrawn up to [`MAX_EMPTY_RETRIES`] times. Backend
/// failures surface as [`Error::Backend`] carrying the question id.
pub fn sample_responses(
    backend: &dyn Backend,
    question_id: &str,
    question: &str,
    n: usize,
    params: &DecodingParams,
) -> Result<SampleSet> {
    params.validate()?;
    if n == 0 {
        return Err(Error::invalid("n must be at least 1"));
    }
    let prompt = prompts::initial_response(question);
    let feature_dim = backend.descriptor().feature_dim;
    let mut records = Vec::with_capacity(n);
    for index in 0..n {
        let mut attempt = 0;
        let record = loop {
            let seed = record_seed(params.seed, question_id, index, attempt);
            let record = backend
                .sample(&prompt, params, seed)
                .map_err(|e| Error::Backend {
                    question_id: question_id.to_string(),
                    message: e.message,
                    retriable: e.retriable,
                })?;
            if !record.is_empty() {
                break record;
            }
            attempt += 1;
            log::warn!("empty generation for {question_id} record {index}, attempt {attempt}");
            if attempt > MAX_EMPTY_RETRIES {
                return Err(Error::EmptyGeneration {
                    question_id: question_id.to_string(),
                    attempts: attempt,
                });
            }
        };
        record.check(feature_dim, params.max_tokens)?;
        records.push(record);
    }
    Ok(SampleSet {
        question_id: question_id.to_string(),
        question: question.to_string(),
        decoding: *params,
        records,
    })
}

#[derive(Deserialize)]
#[serde(untagged)]
enum FeatureWire {
    Plain(Vec<f32>),
    Compact(String),
}

fn deserialize_feature<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f32>, D::Error> {
    match FeatureWire::deserialize(d)? {
        FeatureWire::Plain(v) => Ok(v),
        FeatureWire::Compact(s) => io::decode_f32_base64(&s).map_err(serde::de::Error::custom),
    }
}

/// Serializes sample sets as `samples.jsonl`. With `compact`, feature vectors
/// become base64 strings of little-endian f32 values.
pub fn samples_to_jsonl(sets: &[SampleSet], compact: bool) -> Result<Vec<u8>> {
    if !compact {
        return io::to_jsonl(sets);
    }
    let rows = sets
        .iter()
        .map(|set| {
            let mut value = serde_json::to_value(set)?;
            if let Some(records) = value.get_mut("records").and_then(|r| r.as_array_mut()) {
                for (rec, src) in records.iter_mut().zip(&set.records) {
                    rec["feature"] = serde_json::Value::String(io::encode_f32_base64(&src.feature));
                }
            }
            Ok(value)
        })
        .collect::<Result<Vec<_>>>()?;
    io::to_jsonl(&rows)
}

pub fn write_samples(path: &Path, sets: &[SampleSet], compact: bool) -> Result<()> {
    io::write_atomic(path, &samples_to_jsonl(sets, compact)?)
}

pub fn read_samples(path: &Path) -> Result<Vec<SampleSet>> {
    io::read_jsonl(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    fn record(lps: &[f64]) -> GenerationRecord {
        GenerationRecord {
            token_ids: (0..lps.len() as u32).collect(),
            token_logprobs: lps.to_vec(),
            feature: vec![0.0; 2],
            text: String::new(),
            truncated: false,
        }
    }

    #[test]
    fn normalized_logprob_examples() {
        assert_eq!(length_normalized_logprob(&record(&[-0.5, -1.5])).unwrap(), -1.0);
        assert_eq!(length_normalized_logprob(&record(&[0.0])).unwrap(), 0.0);
        assert_eq!(
            length_normalized_logprob(&record(&[-2.0, -2.0, -2.0])).unwrap(),
            length_normalized_logprob(&record(&[-2.0])).unwrap()
        );
        assert!(length_normalized_logprob(&record(&[])).is_err());
    }

    #[test]
    fn decoding_defaults_and_validation() {
        let d = DecodingParams::default();
        assert_eq!((d.top_p, d.temperature, d.max_tokens), (0.6, 0.9, 60));
        assert!(DecodingParams { top_p: 0.0, ..d }.validate().is_err());
        assert!(DecodingParams { top_p: 1.5, ..d }.validate().is_err());
        assert!(DecodingParams { temperature: 0.0, ..d }.validate().is_err());
        assert!(DecodingParams { max_tokens: 0, ..d }.validate().is_err());
    }

    #[test]
    fn feature_layer_default_matches_32_layer_models() {
        assert_eq!(default_feature_layer(32), 26);
        assert_eq!(default_feature_layer(1), 0);
    }

    struct Flaky {
        desc: BackendDescriptor,
        empties_left: Cell<usize>,
        fail: bool,
    }

    impl Backend for Flaky {
        fn descriptor(&self) -> &BackendDescriptor {
            &self.desc
        }
        fn sample(&self, _: &str, _: &DecodingParams, _: u64) -> Result<GenerationRecord, BackendError> {
            if self.fail {
                return Err(BackendError::retriable("connection reset"));
            }
            if self.empties_left.get() > 0 {
                self.empties_left.set(self.empties_left.get() - 1);
                return Ok(GenerationRecord { token_ids: vec![], token_logprobs: vec![], ..record(&[]) });
            }
            Ok(record(&[-0.1]))
        }
        fn complete(&self, _: &str, _: u64) -> Result<String, BackendError> {
            Ok(String::new())
        }
        fn next_token_probability(&self, _: &str, _: u32) -> Result<f64, BackendError> {
            Ok(0.0)
        }
        fn token_id(&self, _: &str) -> Option<u32> {
            None
        }
    }

    fn flaky(empties: usize, fail: bool) -> Flaky {
        Flaky {
            desc: BackendDescriptor {
                name: "flaky".into(),
                layer_count: 2,
                feature_layer: 1,
                feature_dim: 2,
                vocab_size: 4,
            },
            empties_left: Cell::new(empties),
            fail,
        }
    }

    #[test]
    fn empty_generations_are_resampled_then_rejected() {
        let p = DecodingParams::default();
        let ok = sample_responses(&flaky(MAX_EMPTY_RETRIES, false), "q1", "Q", 1, &p).unwrap();
        assert_eq!(ok.n(), 1);
        let err = sample_responses(&flaky(MAX_EMPTY_RETRIES + 1, false), "q1", "Q", 1, &p).unwrap_err();
        assert!(matches!(err, Error::EmptyGeneration { attempts, .. } if attempts == MAX_EMPTY_RETRIES + 1));
    }

    #[test]
    fn backend_failure_carries_question_id() {
        let err = sample_responses(&flaky(0, true), "q42", "Q", 2, &DecodingParams::default()).unwrap_err();
        match err {
            Error::Backend { question_id, retriable, .. } => {
                assert_eq!(question_id, "q42");
                assert!(retriable);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn samples_jsonl_accepts_both_feature_encodings() {
        let set = SampleSet {
            question_id: "q".into(),
            question: "Q".into(),
            decoding: DecodingParams::default(),
            records: vec![GenerationRecord { feature: vec![0.5, -1.25], ..record(&[-0.5]) }],
        };
        for compact in [false, true] {
            let bytes = samples_to_jsonl(std::slice::from_ref(&set), compact).unwrap();
            let text = String::from_utf8(bytes).unwrap();
            assert_eq!(text.contains("\"feature\":["), !compact);
            let back: SampleSet = serde_json::from_str(text.trim()).unwrap();
            assert_eq!(back, set);
        }
    }
}
