//! Schema and invariant checks for artifact files.

use std::path::Path;

use super::artifacts;
use super::stages::ThresholdsFile;
use crate::backend::read_samples;
use crate::bce::read_confidences;
use crate::error::{Error, Result};
use crate::estimators::{read_estimates, Estimator};
use crate::eval::{read_episodes, report};
use crate::prefs::{read_prefs, validate_prefs, Violation};

/// Tolerance for the identities checked in results files.
pub const RESULTS_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArtifactKind {
    Samples,
    Estimates,
    Confidences,
    Prefs,
    Episodes,
    Results,
}

impl ArtifactKind {
    /// Kind from the canonical file name.
    pub fn from_path(path: &Path) -> Option<Self> {
        let name = path.file_name()?.to_str()?;
        Some(match name {
            artifacts::SAMPLES => ArtifactKind::Samples,
            artifacts::ESTIMATES => ArtifactKind::Estimates,
            artifacts::CONFIDENCES => ArtifactKind::Confidences,
            artifacts::PREFS => ArtifactKind::Prefs,
            artifacts::EPISODES => ArtifactKind::Episodes,
            artifacts::RESULTS => ArtifactKind::Results,
            _ => return None,
        })
    }
}

fn in_unit(v: f64) -> bool {
    (0.0..=1.0).contains(&v)
}

/// Checks one artifact and returns its violations (empty when valid).
/// A file that does not parse is an error rather than a violation. Prefs
/// files are also checked against a `thresholds.json` beside them.
pub fn validate_artifact(path: &Path) -> Result<Vec<Violation>> {
    let kind = ArtifactKind::from_path(path)
        .ok_or_else(|| Error::invalid(format!("cannot tell the artifact kind of {}", path.display())))?;
    let mut out = Vec::new();
    let mut bad = |line: usize, rule: String| out.push(Violation { line, rule });
    match kind {
        ArtifactKind::Samples => {
            for (i, set) in read_samples(path)?.iter().enumerate() {
                let n = set.records.len();
                if n == 0 {
                    bad(i + 1, "empty sample set".into());
                }
                for r in &set.records {
                    if r.token_ids.len() != r.token_logprobs.len() {
                        bad(i + 1, "token ids and logprobs differ in length".into());
                    }
                    if r.token_logprobs.iter().any(|l| !(*l <= 0.0)) {
                        bad(i + 1, "a token logprob is positive or NaN".into());
                    }
                }
            }
        }
        ArtifactKind::Estimates => {
            for (i, row) in read_estimates(path)?.iter().enumerate() {
                let r = &row.result;
                let entropy = matches!(r.estimator, Estimator::SemanticEntropy | Estimator::PredictiveEntropy);
                if entropy && !(r.value >= 0.0) {
                    bad(i + 1, format!("{} = {} is negative", r.estimator.name(), r.value));
                }
                if r.confidence.is_some_and(|c| !in_unit(c)) {
                    bad(i + 1, "confidence outside [0, 1]".into());
                }
            }
        }
        ArtifactKind::Confidences => {
            for (i, r) in read_confidences(path)?.iter().enumerate() {
                if !(r.rho_hat > 0.0 && r.rho_hat <= 1.0) {
                    bad(i + 1, format!("rho_hat {} outside (0, 1]", r.rho_hat));
                }
                if !(r.confidence_q > 0.0 && r.confidence_q <= 1.0) {
                    bad(i + 1, format!("confidence_q {} outside (0, 1]", r.confidence_q));
                }
                if !(r.confidence_qa > 0.0 && r.confidence_qa <= r.confidence_q) {
                    bad(i + 1, format!("confidence_qa {} outside (0, confidence_q]", r.confidence_qa));
                }
            }
        }
        ArtifactKind::Prefs => {
            let lines = read_prefs(path)?;
            let sibling = path.with_file_name(artifacts::THRESHOLDS);
            let thresholds = if sibling.exists() {
                let bytes = std::fs::read(&sibling).map_err(|e| Error::io(&sibling, e))?;
                Some(serde_json::from_slice::<ThresholdsFile>(&bytes)?.thresholds)
            } else {
                None
            };
            out.extend(validate_prefs(&lines, thresholds.as_ref()));
        }
        ArtifactKind::Episodes => {
            for (i, e) in read_episodes(path)?.iter().enumerate() {
                if e.parse_failure != e.final_answer.is_none() {
                    bad(i + 1, "parse_failure disagrees with final_answer".into());
                }
                if e.parse_failure && e.final_correct {
                    bad(i + 1, "an unparsed reply is marked correct".into());
                }
            }
        }
        ArtifactKind::Results => {
            out.extend(report::validate_results(
                &report::read_results_csv(path)?,
                RESULTS_TOLERANCE,
            ));
        }
    }
    Ok(out)
}
