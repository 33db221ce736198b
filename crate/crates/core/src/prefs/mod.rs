//! Conversational preference data.
//!
//! Each retained conversation `{q, a, s}` (question, model answer, opposing
//! statement) gets five stance candidates `r1..r5`, from persisting with the
//! original answer to fully adopting the opposing one. Confidence(q, a)
//! places the conversation in a band, and the band's positive and negative
//! candidate sets yield 3 × 2 = 6 chosen/rejected pairs.
//!
//! | band | condition            | positive     | negative |
//! |------|----------------------|--------------|----------|
//! | high | conf > t1            | r1, r2, r3   | r4, r5   |
//! | mid  | t2 < conf <= t1      | r2, r3, r4   | r1, r5   |
//! | low  | conf <= t2           | r3, r4, r5   | r1, r2   |
//!
//! `t1` and `t2` are nearest-rank percentiles (66.7th and 33.3rd) over every
//! confidence of the corpus: with `N` values sorted ascending, the p-th
//! percentile is the value at 1-based rank `ceil(p * N)`, computed in integer
//! arithmetic as `ceil(667 * N / 1000)` and `ceil(333 * N / 1000)`.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backend::Backend;
use crate::error::{Error, Result};
use crate::estimators::judge::{extract_answer, EquivalenceJudge};
use crate::io;
use crate::prompts::{self, Role};
use crate::seed;

/// Regenerations of an opposing statement after the first attempt.
pub const OPPOSING_RETRIES: usize = 3;

pub const PERCENTILE_METHOD: &str = "nearest-rank";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conversation {
    pub question_id: String,
    pub q: String,
    pub a: String,
    pub s: String,
    pub gold: Option<String>,
    pub a_is_correct: Option<bool>,
}

impl Conversation {
    /// The conversation rendered as a generation prompt with the chat-turn
    /// template (see [`crate::prompts`]).
    pub fn prompt(&self) -> String {
        prompts::render_chat_prompt(&[
            (Role::User, &self.q),
            (Role::Assistant, &self.a),
            (Role::User, &self.s),
        ])
    }
}

/// Candidate replies r1..r5 in stance order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StanceCandidates(pub [String; 5]);

impl StanceCandidates {
    /// Candidate for stance `level` in 1..=5.
    pub fn get(&self, level: usize) -> &str {
        &self.0[level - 1]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSpec {
    pub t1: f64,
    pub t2: f64,
    pub method: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Band {
    High,
    Mid,
    Low,
}

impl Band {
    pub fn positive(self) -> [usize; 3] {
        match self {
            Band::High => [1, 2, 3],
            Band::Mid => [2, 3, 4],
            Band::Low => [3, 4, 5],
        }
    }

    pub fn negative(self) -> [usize; 2] {
        match self {
            Band::High => [4, 5],
            Band::Mid => [1, 5],
            Band::Low => [1, 2],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Band::High => "high",
            Band::Mid => "mid",
            Band::Low => "low",
        }
    }
}

impl fmt::Display for Band {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

fn rank(per_mille: usize, n: usize) -> usize {
    (per_mille * n).div_ceil(1000).clamp(1, n)
}

/// Nearest-rank 66.7th and 33.3rd percentiles of `confidences`.
pub fn compute_thresholds(confidences: &[f64]) -> Result<ThresholdSpec> {
    if confidences.is_empty() {
        return Err(Error::invalid("no confidences to threshold"));
    }
    if let Some(c) = confidences.iter().find(|c| !c.is_finite()) {
        return Err(Error::NonFinite(format!("confidence {c}")));
    }
    let mut sorted = confidences.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    Ok(ThresholdSpec {
        t1: sorted[rank(667, n) - 1],
        t2: sorted[rank(333, n) - 1],
        method: PERCENTILE_METHOD.to_string(),
    })
}

pub fn assign_band(confidence_qa: f64, spec: &ThresholdSpec) -> Band {
    if confidence_qa > spec.t1 {
        Band::High
    } else if confidence_qa > spec.t2 {
        Band::Mid
    } else {
        Band::Low
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub question_id: String,
    pub q: String,
    pub a: String,
    pub s: String,
    pub r_w: String,
    pub r_l: String,
    pub band: Band,
    pub confidence_qa: f64,
    pub pair_index: usize,
    pub chosen_stance: usize,
    pub rejected_stance: usize,
    /// Chosen and rejected texts are identical.
    pub duplicate: bool,
}

/// The six pairs of a conversation, chosen-major: for each positive stance
/// in ascending order, each negative stance in ascending order.
pub fn build_pairs(
    conv: &Conversation,
    cands: &StanceCandidates,
    band: Band,
    confidence_qa: f64,
) -> Result<Vec<PreferencePair>> {
    if let Some(level) = (1..=5).find(|l| cands.get(*l).trim().is_empty()) {
        return Err(Error::invalid(format!(
            "conversation {} has an empty candidate r{level}",
            conv.question_id
        )));
    }
    let mut out = Vec::with_capacity(6);
    for w in band.positive() {
        for l in band.negative() {
            let (r_w, r_l) = (cands.get(w), cands.get(l));
            if r_w == r_l {
                log::warn!(
                    "{}: candidates r{w} and r{l} are identical",
                    conv.question_id
                );
            }
            out.push(PreferencePair {
                question_id: conv.question_id.clone(),
                q: conv.q.clone(),
                a: conv.a.clone(),
                s: conv.s.clone(),
                r_w: r_w.to_string(),
                r_l: r_l.to_string(),
                band,
                confidence_qa,
                pair_index: out.len(),
                chosen_stance: w,
                rejected_stance: l,
                duplicate: r_w == r_l,
            });
        }
    }
    Ok(out)
}

/// Generates an opposing statement `s` for answer `a`: an incorrect
/// solution when `a` matches `gold`, otherwise the correct one. Statements
/// that agree with `a` are regenerated up to [`OPPOSING_RETRIES`] times;
/// `Ok(None)` means the conversation is dropped.
pub fn generate_opposing_statement(
    backend: &dyn Backend,
    question_id: &str,
    q: &str,
    a: &str,
    gold: &str,
    run_seed: u64,
) -> Result<Option<(String, bool)>> {
    let judge = EquivalenceJudge::ExtractedAnswerMatch;
    let a_correct = judge.equivalent(a, gold)?;
    let prompt = if a_correct {
        prompts::incorrect_solution(q, gold)
    } else {
        prompts::correct_solution(q, gold)
    };
    for attempt in 0..=OPPOSING_RETRIES {
        let s = backend
            .complete(
                &prompt,
                seed::mix(&[run_seed, seed::stable_hash(question_id), attempt as u64]),
            )
            .map_err(|e| Error::Backend {
                question_id: question_id.to_string(),
                message: e.message,
                retriable: e.retriable,
            })?;
        if !s.trim().is_empty() && !judge.equivalent(&s, a)? {
            return Ok(Some((s, a_correct)));
        }
        log::info!("{question_id}: opposing statement attempt {attempt} agrees with the answer");
    }
    log::warn!(
        "{question_id}: dropped, opposing statement still agrees with the answer after {OPPOSING_RETRIES} regenerations"
    );
    Ok(None)
}

/// Where stance candidates come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StanceSource {
    /// The five stance prompts, sent to the backend.
    #[default]
    Backend,
    /// Deterministic fill-in texts from [`template_stance`].
    Template,
}

/// Deterministic stance text for `level` given the original and opposing
/// viewpoints. Levels 1, 2 and 5 end with an extractable answer.
pub fn template_stance(level: usize, viewpoint1: &str, viewpoint2: &str) -> String {
    let a1 = extract_answer(viewpoint1).unwrap_or_else(|| viewpoint1.trim().to_string());
    let a2 = extract_answer(viewpoint2).unwrap_or_else(|| viewpoint2.trim().to_string());
    match level {
        1 => format!("I stand by my answer. The reasoning holds up on review. The answer is {a1}."),
        2 => format!("I see why you might say {a2}, and it is a fair point to raise. Still, after weighing it, the answer is {a1}."),
        3 => format!("Both views have merit. {a1} fits one reading of the question and {a2} fits another, so the key detail decides it."),
        4 => format!("You make a strong case, and {a2} now seems more likely to me than {a1}."),
        5 => format!("You are right and I was mistaken. The answer is {a2}."),
        _ => panic!("stance level {level} out of range"),
    }
}

pub fn generate_candidates(
    backend: &dyn Backend,
    conv: &Conversation,
    source: StanceSource,
    run_seed: u64,
) -> Result<StanceCandidates> {
    let mut out: [String; 5] = Default::default();
    for level in 1..=5 {
        out[level - 1] = match source {
            StanceSource::Template => template_stance(level, &conv.a, &conv.s),
            StanceSource::Backend => backend
                .complete(
                    &prompts::stance(level, &conv.q, &conv.a, &conv.s),
                    seed::mix(&[run_seed, seed::stable_hash(&conv.question_id), level as u64]),
                )
                .map_err(|e| Error::Backend {
                    question_id: conv.question_id.clone(),
                    message: e.message,
                    retriable: e.retriable,
                })?,
        };
    }
    Ok(StanceCandidates(out))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairMeta {
    pub band: Band,
    pub confidence_qa: f64,
    pub pair_index: usize,
    pub chosen_stance: usize,
    pub rejected_stance: usize,
    pub duplicate: bool,
}

/// One line of `prefs.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrefsLine {
    pub question_id: String,
    pub prompt: String,
    pub chosen: String,
    pub rejected: String,
    pub meta: PairMeta,
}

impl From<&PreferencePair> for PrefsLine {
    fn from(p: &PreferencePair) -> Self {
        let conv = Conversation {
            question_id: p.question_id.clone(),
            q: p.q.clone(),
            a: p.a.clone(),
            s: p.s.clone(),
            gold: None,
            a_is_correct: None,
        };
        PrefsLine {
            question_id: p.question_id.clone(),
            prompt: conv.prompt(),
            chosen: p.r_w.clone(),
            rejected: p.r_l.clone(),
            meta: PairMeta {
                band: p.band,
                confidence_qa: p.confidence_qa,
                pair_index: p.pair_index,
                chosen_stance: p.chosen_stance,
                rejected_stance: p.rejected_stance,
                duplicate: p.duplicate,
            },
        }
    }
}

pub fn write_prefs(path: &Path, pairs: &[PreferencePair]) -> Result<()> {
    let lines: Vec<PrefsLine> = pairs.iter().map(PrefsLine::from).collect();
    io::write_jsonl(path, &lines)
}

pub fn read_prefs(path: &Path) -> Result<Vec<PrefsLine>> {
    io::read_jsonl(path)
}

/// A rule broken by one line of a preference file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub line: usize,
    pub rule: String,
}

/// Band-consistency and shape checks over prefs lines (line numbers are
/// 1-based). Thresholds, when given, also check each band against its
/// confidence.
pub fn validate_prefs(lines: &[PrefsLine], thresholds: Option<&ThresholdSpec>) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut per_question: std::collections::BTreeMap<&str, Vec<usize>> = Default::default();
    for (i, l) in lines.iter().enumerate() {
        let line = i + 1;
        let m = &l.meta;
        let mut bad = |rule: String| out.push(Violation { line, rule });
        if !m.band.positive().contains(&m.chosen_stance) {
            bad(format!(
                "band {}: chosen r{} is not in the positive set {:?}",
                m.band,
                m.chosen_stance,
                m.band.positive()
            ));
        }
        if !m.band.negative().contains(&m.rejected_stance) {
            bad(format!(
                "band {}: rejected r{} is not in the negative set {:?}",
                m.band,
                m.rejected_stance,
                m.band.negative()
            ));
        }
        if !(m.confidence_qa > 0.0 && m.confidence_qa <= 1.0) {
            bad(format!("confidence_qa {} outside (0, 1]", m.confidence_qa));
        }
        if (l.chosen == l.rejected) != m.duplicate {
            bad("duplicate flag does not match the texts".to_string());
        }
        if let Some(t) = thresholds {
            let expect = assign_band(m.confidence_qa, t);
            if expect != m.band {
                bad(format!(
                    "confidence_qa {} belongs to band {expect}, labeled {}",
                    m.confidence_qa, m.band
                ));
            }
        }
        if prompts::parse_chat(&l.prompt).len() != 3 {
            bad("prompt is not a three-turn conversation".to_string());
        }
        per_question.entry(&l.question_id).or_default().push(line);
    }
    for (qid, ls) in per_question {
        if ls.len() != 6 {
            out.push(Violation {
                line: ls[0],
                rule: format!("question {qid} has {} pairs, expected 6", ls.len()),
            });
        }
    }
    out.sort_by_key(|v| v.line);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv() -> Conversation {
        Conversation {
            question_id: "q".into(),
            q: "Q?".into(),
            a: "The answer is B.".into(),
            s: "Solution: no. The answer is C.".into(),
            gold: Some("B".into()),
            a_is_correct: Some(true),
        }
    }

    fn cands() -> StanceCandidates {
        StanceCandidates(std::array::from_fn(|i| format!("r{}", i + 1)))
    }

    #[test]
    fn nine_value_thresholds() {
        let v: Vec<f64> = (1..=9).map(|i| i as f64 / 10.0).collect();
        let t = compute_thresholds(&v).unwrap();
        assert_eq!((t.t1, t.t2), (0.7, 0.3));
        assert_eq!(t.method, "nearest-rank");
    }

    #[test]
    fn constant_corpus_is_all_low() {
        let t = compute_thresholds(&[0.5; 7]).unwrap();
        assert_eq!((t.t1, t.t2), (0.5, 0.5));
        assert_eq!(assign_band(0.5, &t), Band::Low);
    }

    #[test]
    fn boundaries_follow_the_inequalities() {
        let t = ThresholdSpec { t1: 0.7, t2: 0.3, method: PERCENTILE_METHOD.into() };
        assert_eq!(assign_band(0.7000001, &t), Band::High);
        assert_eq!(assign_band(0.7, &t), Band::Mid);
        assert_eq!(assign_band(0.3, &t), Band::Low);
        assert!(compute_thresholds(&[]).is_err());
    }

    #[test]
    fn high_band_pairs_in_order() {
        let pairs = build_pairs(&conv(), &cands(), Band::High, 0.9).unwrap();
        let got: Vec<_> = pairs.iter().map(|p| (p.chosen_stance, p.rejected_stance)).collect();
        assert_eq!(got, vec![(1, 4), (1, 5), (2, 4), (2, 5), (3, 4), (3, 5)]);
        assert!(pairs.iter().enumerate().all(|(i, p)| p.pair_index == i));
    }

    #[test]
    fn mid_band_extremes_are_only_rejected() {
        let pairs = build_pairs(&conv(), &cands(), Band::Mid, 0.5).unwrap();
        assert_eq!(pairs.len(), 6);
        assert!(pairs.iter().all(|p| p.r_w != "r1" && p.r_w != "r5"));
    }

    #[test]
    fn empty_candidate_drops_conversation() {
        let mut c = cands();
        c.0[3] = " ".into();
        assert!(build_pairs(&conv(), &c, Band::Low, 0.1).is_err());
    }

    #[test]
    fn validator_flags_injected_fault() {
        let pairs = build_pairs(&conv(), &cands(), Band::High, 0.9).unwrap();
        let mut lines: Vec<PrefsLine> = pairs.iter().map(PrefsLine::from).collect();
        assert!(validate_prefs(&lines, None).is_empty());
        lines[2].meta.chosen_stance = 4;
        let v = validate_prefs(&lines, None);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].line, 3);
        assert!(v[0].rule.contains("band high"), "{}", v[0].rule);
    }

    #[test]
    fn template_stances_extract_as_intended() {
        let (v1, v2) = ("The answer is B.", "The answer is C.");
        assert_eq!(extract_answer(&template_stance(1, v1, v2)).as_deref(), Some("B"));
        assert_eq!(extract_answer(&template_stance(2, v1, v2)).as_deref(), Some("B"));
        assert_eq!(extract_answer(&template_stance(5, v1, v2)).as_deref(), Some("C"));
    }
}
