//! Answer extraction, normalization and pairwise equivalence.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const ANSWER_MARKER: &str = "the answer is";
const ARTICLES: [&str; 3] = ["a", "an", "the"];

/// Text after the last case-insensitive `the answer is`, up to the end of
/// that line, with surrounding whitespace and trailing sentence punctuation
/// removed. `None` when the marker is absent or nothing follows it.
pub fn extract_answer(text: &str) -> Option<String> {
    let lower = text.to_lowercase();
    // Lowercasing can change byte lengths outside ASCII; fall back to the
    // lowered text in that case so indices stay valid.
    let source = if lower.len() == text.len() { text } else { lower.as_str() };
    let start = lower.rfind(ANSWER_MARKER)? + ANSWER_MARKER.len();
    let rest = &source[start..];
    let line = rest.split('\n').next().unwrap_or(rest);
    let trimmed = line
        .trim_start_matches(|c: char| c == ':' || c.is_whitespace())
        .trim_end_matches(|c: char| c.is_whitespace() || ".,;!?\"'".contains(c))
        .trim();
    if trimmed.is_empty() {
        None
    } else {
        Some(trimmed.to_string())
    }
}

/// Lowercases, replaces punctuation with spaces (a `.` between two digits is
/// kept), drops the articles `a`, `an`, `the` unless that would leave nothing,
/// and collapses whitespace.
pub fn normalize_answer(text: &str) -> String {
    let chars: Vec<char> = text.to_lowercase().chars().collect();
    let mut cleaned = String::with_capacity(chars.len());
    for (i, c) in chars.iter().enumerate() {
        let decimal_point = *c == '.'
            && i > 0
            && chars[i - 1].is_ascii_digit()
            && chars.get(i + 1).is_some_and(|n| n.is_ascii_digit());
        if c.is_alphanumeric() || c.is_whitespace() || decimal_point {
            cleaned.push(*c);
        } else {
            cleaned.push(' ');
        }
    }
    let words: Vec<&str> = cleaned.split_whitespace().collect();
    let content: Vec<&str> = words
        .iter()
        .copied()
        .filter(|w| !ARTICLES.contains(w))
        .collect();
    if content.is_empty() {
        words.join(" ")
    } else {
        content.join(" ")
    }
}

/// Equivalence oracle for an out-of-process judge (for example an
/// entailment model behind an HTTP endpoint).
pub trait JudgeClient: Send + Sync {
    fn equivalent(&self, left: &str, right: &str) -> std::result::Result<bool, String>;
}

/// Criterion deciding whether two sampled responses mean the same thing.
#[derive(Clone, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EquivalenceJudge {
    NormalizedExactMatch,
    #[default]
    ExtractedAnswerMatch,
    External {
        endpoint: String,
        #[serde(skip)]
        client: Option<Arc<dyn JudgeClient>>,
    },
}

impl fmt::Debug for EquivalenceJudge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EquivalenceJudge::NormalizedExactMatch => f.write_str("NormalizedExactMatch"),
            EquivalenceJudge::ExtractedAnswerMatch => f.write_str("ExtractedAnswerMatch"),
            EquivalenceJudge::External { endpoint, client } => f
                .debug_struct("External")
                .field("endpoint", endpoint)
                .field("connected", &client.is_some())
                .finish(),
        }
    }
}

impl EquivalenceJudge {
    /// Canonical key for the match-based judges; `None` for external ones.
    pub fn key(&self, text: &str) -> Option<String> {
        match self {
            EquivalenceJudge::NormalizedExactMatch => Some(normalize_answer(text)),
            EquivalenceJudge::ExtractedAnswerMatch => Some(normalize_answer(
                &extract_answer(text).unwrap_or_else(|| text.to_string()),
            )),
            EquivalenceJudge::External { .. } => None,
        }
    }

    pub fn equivalent(&self, left: &str, right: &str) -> Result<bool> {
        match self {
            EquivalenceJudge::External { endpoint, client } => {
                let client = client.as_ref().ok_or_else(|| Error::JudgeUnavailable {
                    endpoint: endpoint.clone(),
                })?;
                if left == right {
                    return Ok(true);
                }
                // Query both directions so the relation is symmetric.
                let fwd = client.equivalent(left, right);
                let bwd = client.equivalent(right, left);
                match (fwd, bwd) {
                    (Ok(a), Ok(b)) => Ok(a && b),
                    (Err(e), _) | (_, Err(e)) => {
                        log::warn!("judge {endpoint} failed: {e}");
                        Err(Error::JudgeUnavailable {
                            endpoint: endpoint.clone(),
                        })
                    }
                }
            }
            _ => Ok(self.key(left) == self.key(right)),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            EquivalenceJudge::NormalizedExactMatch => "normalized-exact-match",
            EquivalenceJudge::ExtractedAnswerMatch => "extracted-answer-match",
            EquivalenceJudge::External { .. } => "external",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extraction_takes_the_last_marker() {
        assert_eq!(
            extract_answer("The answer is A. Wait, the answer is B.").as_deref(),
            Some("B")
        );
        assert_eq!(extract_answer("The Answer Is: 3.5.").as_deref(), Some("3.5"));
        assert_eq!(extract_answer("no marker here"), None);
        assert_eq!(extract_answer("the answer is ."), None);
    }

    #[test]
    fn normalization() {
        assert_eq!(normalize_answer("(B)"), "b");
        assert_eq!(normalize_answer("The Eiffel Tower!"), "eiffel tower");
        assert_eq!(normalize_answer("3.14"), "3.14");
        assert_eq!(normalize_answer("end."), "end");
        // A bare multiple-choice letter `A` is not an article.
        assert_eq!(normalize_answer("A"), "a");
        assert_eq!(normalize_answer("a"), normalize_answer("(A)"));
    }

    #[test]
    fn extracted_answer_match_ignores_reasoning() {
        let j = EquivalenceJudge::ExtractedAnswerMatch;
        assert!(j.equivalent("Since x, the answer is (B).", "so the answer is b").unwrap());
        assert!(!j.equivalent("the answer is B", "the answer is C").unwrap());
    }

    #[test]
    fn disconnected_external_judge_names_endpoint() {
        let j = EquivalenceJudge::External {
            endpoint: "http://judge.local/nli".into(),
            client: None,
        };
        let err = j.equivalent("x", "y").unwrap_err();
        assert!(err.to_string().contains("http://judge.local/nli"), "{err}");
    }
}
