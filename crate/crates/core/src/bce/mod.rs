//! Bilateral confidence: question-side confidence from the regressor combined
//! with the answer-side cumulative probability ratio.
//!
//! For an answer with length-normalized log-probability `P'` and samples
//! `P'_1..P'_n`,
//!
//! ```text
//! rho = (P' + sum_i 1(P'_i < P') * P'_i) / (P' + sum_j P'_j)
//! Confidence(q, a) = rho^gamma * Confidence(q)
//! ```
//!
//! The indicator is strict, so samples tying the answer count only in the
//! denominator. When the denominator is exactly 0 (every value is 0) the
//! ratio is 1. The log-literal variant evaluates the formula on the
//! log-probabilities themselves; the exponentiated variant evaluates it on
//! `exp(P')`, the per-token geometric-mean probabilities.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backend::{length_normalized_logprob, GenerationRecord, SampleSet};
use crate::error::{Error, Result};
use crate::io;
use crate::regressor::{confidence_from_se, predict_se, RegressorModel, DEFAULT_ALPHA};

pub const DEFAULT_GAMMA: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RatioVariant {
    #[default]
    LogLiteral,
    Exponentiated,
}

impl RatioVariant {
    pub fn label(self) -> &'static str {
        match self {
            RatioVariant::LogLiteral => "log-literal",
            RatioVariant::Exponentiated => "exponentiated",
        }
    }
}

/// Which response is scored as the answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnswerSource {
    /// The sample with the highest P'.
    #[default]
    MostLikelySample,
    /// A separately decoded answer passed by the caller.
    Supplied,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BceConfig {
    pub gamma: f64,
    pub alpha: f64,
    pub variant: RatioVariant,
    pub answer_source: AnswerSource,
}

impl Default for BceConfig {
    fn default() -> Self {
        Self {
            gamma: DEFAULT_GAMMA,
            alpha: DEFAULT_ALPHA,
            variant: RatioVariant::LogLiteral,
            answer_source: AnswerSource::MostLikelySample,
        }
    }
}

impl BceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::invalid(format!("gamma {} must be >= 0", self.gamma)));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::invalid(format!("alpha {} must be > 0", self.alpha)));
        }
        Ok(())
    }
}

/// One line of `confidences.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceEstimate {
    pub question_id: String,
    pub answer_text: String,
    pub p_prime: f64,
    pub rho_hat: f64,
    pub confidence_q: f64,
    pub confidence_qa: f64,
    pub variant: RatioVariant,
    pub n_samples: usize,
}

fn finite(values: impl IntoIterator<Item = f64>) -> Result<()> {
    match values.into_iter().find(|v| !v.is_finite()) {
        Some(v) => Err(Error::NonFinite(format!("ratio input {v}"))),
        None => Ok(()),
    }
}

/// The ratio formula on positive masses: (a + Σ_{m_i < a} m_i) / (a + Σ m_j).
pub fn mass_ratio(answer: f64, masses: &[f64]) -> Result<f64> {
    finite(std::iter::once(answer).chain(masses.iter().copied()))?;
    if answer <= 0.0 || masses.iter().any(|m| *m <= 0.0) {
        return Err(Error::invalid("masses must be positive"));
    }
    let below: f64 = masses.iter().filter(|m| **m < answer).sum();
    let total: f64 = masses.iter().sum();
    Ok(((answer + below) / (answer + total)).min(1.0))
}

/// Cumulative probability ratio of an answer against its samples.
pub fn cumulative_prob_ratio(p_prime: f64, samples: &[f64], variant: RatioVariant) -> Result<f64> {
    finite(std::iter::once(p_prime).chain(samples.iter().copied()))?;
    if p_prime > 0.0 || samples.iter().any(|s| *s > 0.0) {
        return Err(Error::invalid("log-probabilities must be <= 0"));
    }
    match variant {
        RatioVariant::LogLiteral => {
            let below: f64 = samples.iter().filter(|s| **s < p_prime).sum();
            let total: f64 = samples.iter().sum();
            let den = p_prime + total;
            if den == 0.0 {
                return Ok(1.0);
            }
            Ok(((p_prime + below) / den).min(1.0))
        }
        RatioVariant::Exponentiated => {
            // Comparisons stay on the log scale so exp() rounding cannot
            // create or break ties.
            let a = p_prime.exp();
            let below: f64 = samples
                .iter()
                .filter(|s| **s < p_prime)
                .map(|s| s.exp())
                .sum();
            let total: f64 = samples.iter().map(|s| s.exp()).sum();
            Ok(((a + below) / (a + total)).min(1.0))
        }
    }
}

/// ρ̂^γ · Confidence(q).
pub fn answer_confidence(rho_hat: f64, confidence_q: f64, gamma: f64) -> Result<f64> {
    if !(rho_hat > 0.0 && rho_hat <= 1.0) {
        return Err(Error::invalid(format!("rho_hat {rho_hat} not in (0, 1]")));
    }
    if !(confidence_q > 0.0 && confidence_q <= 1.0) {
        return Err(Error::invalid(format!("confidence_q {confidence_q} not in (0, 1]")));
    }
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(Error::invalid(format!("gamma {gamma} must be >= 0")));
    }
    Ok(rho_hat.powf(gamma) * confidence_q)
}

/// Full bilateral estimate for `answer` given the question's samples.
pub fn estimate_bilateral(
    samples: &SampleSet,
    answer: &GenerationRecord,
    model: &RegressorModel,
    config: &BceConfig,
) -> Result<ConfidenceEstimate> {
    config.validate()?;
    if samples.records.is_empty() {
        return Err(Error::invalid(format!(
            "sample set {} is empty",
            samples.question_id
        )));
    }
    if answer.feature.len() != model.feature_dim {
        return Err(Error::DimensionMismatch {
            index: 0,
            expected: model.feature_dim,
            found: answer.feature.len(),
        });
    }
    let se = predict_se(model, &samples.features())?;
    let confidence_q = confidence_from_se(se, config.alpha)?;
    let p_prime = length_normalized_logprob(answer)?;
    let sample_lps = samples.normalized_logprobs()?;
    let rho_hat = cumulative_prob_ratio(p_prime, &sample_lps, config.variant)?;
    let confidence_qa = answer_confidence(rho_hat, confidence_q, config.gamma)?;
    Ok(ConfidenceEstimate {
        question_id: samples.question_id.clone(),
        answer_text: answer.text.clone(),
        p_prime,
        rho_hat,
        confidence_q,
        confidence_qa,
        variant: config.variant,
        n_samples: samples.n(),
    })
}

/// Estimate using the answer selected by `config.answer_source`; `supplied`
/// is required for [`AnswerSource::Supplied`].
pub fn estimate_for_set(
    samples: &SampleSet,
    supplied: Option<&GenerationRecord>,
    model: &RegressorModel,
    config: &BceConfig,
) -> Result<ConfidenceEstimate> {
    let answer = match (config.answer_source, supplied) {
        (AnswerSource::Supplied, Some(a)) => a,
        (AnswerSource::Supplied, None) => {
            return Err(Error::invalid(format!(
                "no supplied answer for {}",
                samples.question_id
            )))
        }
        (AnswerSource::MostLikelySample, _) => &samples.records[samples.most_likely_index()?],
    };
    estimate_bilateral(samples, answer, model, config)
}

pub fn write_confidences(path: &Path, rows: &[ConfidenceEstimate]) -> Result<()> {
    io::write_jsonl(path, rows)
}

pub fn read_confidences(path: &Path) -> Result<Vec<ConfidenceEstimate>> {
    io::read_jsonl(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const LL: RatioVariant = RatioVariant::LogLiteral;

    #[test]
    fn hand_cases() {
        assert_eq!(cumulative_prob_ratio(-0.5, &[-1.0, -2.0], LL).unwrap(), 1.0);
        assert_eq!(cumulative_prob_ratio(-1.0, &[-2.0, -0.5], LL).unwrap(), 6.0 / 7.0);
        assert_eq!(cumulative_prob_ratio(-1.0, &[-1.0, -1.0], LL).unwrap(), 1.0 / 3.0);
        assert_eq!(cumulative_prob_ratio(0.0, &[0.0, 0.0], LL).unwrap(), 1.0);
        assert!(cumulative_prob_ratio(f64::NAN, &[-1.0], LL).is_err());
    }

    #[test]
    fn answer_confidence_examples() {
        assert_eq!(answer_confidence(1.0, 0.8, 0.3).unwrap(), 0.8);
        assert_eq!(answer_confidence(0.3, 0.8, 0.0).unwrap(), 0.8);
        assert!((answer_confidence(0.8571, 0.6243, 0.3).unwrap() - 0.5961).abs() < 1e-4);
        assert!(answer_confidence(0.0, 0.8, 0.3).is_err());
    }

    proptest! {
        #[test]
        fn log_literal_in_unit_interval(
            p in -10.0f64..=0.0,
            s in proptest::collection::vec(-10.0f64..=0.0, 0..12),
        ) {
            let r = cumulative_prob_ratio(p, &s, LL).unwrap();
            prop_assert!(r > 0.0 && r <= 1.0, "rho = {}", r);
        }

        #[test]
        fn mass_ratio_in_unit_interval(
            a in 1e-6f64..10.0,
            m in proptest::collection::vec(1e-6f64..10.0, 0..12),
        ) {
            let r = mass_ratio(a, &m).unwrap();
            prop_assert!(r > 0.0 && r <= 1.0);
        }

        #[test]
        fn better_sample_never_raises_rho(
            p in -10.0f64..-0.01,
            s in proptest::collection::vec(-10.0f64..=0.0, 0..10),
            frac in 0.0f64..=1.0,
        ) {
            let better = p * frac; // in [p, 0]
            let mut more = s.clone();
            more.push(better);
            for v in [LL, RatioVariant::Exponentiated] {
                let before = cumulative_prob_ratio(p, &s, v).unwrap();
                let after = cumulative_prob_ratio(p, &more, v).unwrap();
                prop_assert!(after <= before + 1e-15);
            }
        }

        #[test]
        fn exponentiated_is_monotone_in_answer(
            s in proptest::collection::vec(-10.0f64..=0.0, 0..10),
            a in -10.0f64..=0.0,
            b in -10.0f64..=0.0,
        ) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let v = RatioVariant::Exponentiated;
            prop_assert!(
                cumulative_prob_ratio(lo, &s, v).unwrap()
                    <= cumulative_prob_ratio(hi, &s, v).unwrap() + 1e-12
            );
        }
    }
}
