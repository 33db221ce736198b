//! Labeled question corpora, the regressor/preference split, and a seeded
//! toy corpus with matching mock distributions.
//!
//! Corpus files are JSONL, one object per question:
//!
//! ```text
//! {"question_id": "q0001", "question": "...", "gold": "B"}
//! ```

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::{DialogueStyle, DistributionTable, MockBackend};
use crate::error::{Error, Result};
use crate::io;
use crate::seed;

/// Fraction of the corpus used for regressor training; the rest builds
/// preferences.
pub const REGRESSOR_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledQuestion {
    pub question_id: String,
    pub question: String,
    pub gold: String,
}

pub fn read_corpus(path: &Path) -> Result<Vec<LabeledQuestion>> {
    let rows: Vec<LabeledQuestion> = io::read_jsonl(path)?;
    let mut seen = std::collections::BTreeSet::new();
    for r in &rows {
        if !seen.insert(r.question_id.as_str()) {
            return Err(Error::format(
                path.display().to_string(),
                format!("duplicate question_id {}", r.question_id),
            ));
        }
    }
    Ok(rows)
}

pub fn write_corpus(path: &Path, rows: &[LabeledQuestion]) -> Result<()> {
    io::write_jsonl(path, rows)
}

/// Deterministic split into (regressor part, preference part). Order within
/// each part follows the input.
pub fn split_corpus(
    corpus: &[LabeledQuestion],
    regressor_fraction: f64,
    split_seed: u64,
) -> (Vec<LabeledQuestion>, Vec<LabeledQuestion>) {
    let mut keys: Vec<(u64, usize)> = corpus
        .iter()
        .enumerate()
        .map(|(i, q)| (seed::mix(&[split_seed, seed::stable_hash(&q.question_id)]), i))
        .collect();
    keys.sort();
    let n_reg = (corpus.len() as f64 * regressor_fraction).round() as usize;
    let mut in_reg = vec![false; corpus.len()];
    for (_, i) in keys.iter().take(n_reg) {
        in_reg[*i] = true;
    }
    let (mut reg, mut prefs) = (Vec::new(), Vec::new());
    for (q, r) in corpus.iter().zip(in_reg) {
        if r {
            reg.push(q.clone())
        } else {
            prefs.push(q.clone())
        }
    }
    (reg, prefs)
}

const LETTERS: [&str; 4] = ["A", "B", "C", "D"];
const TOPICS: [&str; 8] = [
    "which planet is largest",
    "which metal conducts best",
    "which river is longest",
    "which gas plants absorb",
    "which number is prime",
    "which animal is a mammal",
    "which year came first",
    "which shape has most sides",
];
const PHRASINGS: [&str; 3] = [
    "the answer is",
    "Step by step , the answer is",
    "Checking each option , so the answer is",
];

/// `n` multiple-choice questions with seeded gold letters.
pub fn toy_corpus(n: usize, corpus_seed: u64) -> Vec<LabeledQuestion> {
    let mut rng = ChaCha8Rng::seed_from_u64(corpus_seed);
    (0..n)
        .map(|i| {
            let gold = LETTERS[rng.gen_range(0..4)];
            let topic = TOPICS[i % TOPICS.len()];
            LabeledQuestion {
                question_id: format!("toy-{i:04}"),
                question: format!("Question {i}: {topic}? Options: (A) (B) (C) (D)"),
                gold: gold.to_string(),
            }
        })
        .collect()
}

/// Mock distribution for one toy question. Difficulty varies per question:
/// the mass on the gold letter ranges from near-certain to below chance, and
/// the model's favorite is sometimes a distractor.
pub fn toy_table(q: &LabeledQuestion, table_seed: u64) -> DistributionTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed::mix(&[
        table_seed,
        seed::stable_hash(&q.question_id),
    ]));
    let mut letters: Vec<&str> = LETTERS.to_vec();
    letters.shuffle(&mut rng);
    // Concentration of the answer distribution.
    let sharpness = rng.gen_range(0.0..2.5f64);
    let raw: Vec<f64> = (0..4).map(|k| (-sharpness * k as f64).exp()).collect();
    // The favorite is the gold letter with probability 0.6.
    let gold_rank = if rng.gen_bool(0.6) { 0 } else { rng.gen_range(1..4) };
    let gold_pos = letters.iter().position(|l| *l == q.gold).unwrap_or(0);
    letters.swap(gold_pos, gold_rank);
    let total: f64 = raw.iter().sum();
    let mut entries = Vec::new();
    for (k, letter) in letters.iter().enumerate() {
        let mass = raw[k] / total;
        // Every letter appears under every phrasing, so nucleus truncation
        // at the first token does not single out the favorite.
        let split: Vec<f64> = (0..PHRASINGS.len()).map(|_| rng.gen_range(0.5..1.5)).collect();
        let s: f64 = split.iter().sum();
        for (j, w) in split.iter().enumerate() {
            entries.push((format!("{} {letter}", PHRASINGS[j]), mass * w / s));
        }
    }
    // Renormalize exactly so the table validates.
    let sum: f64 = entries.iter().map(|e| e.1).sum();
    DistributionTable::new(entries.into_iter().map(|(t, p)| (t, p / sum)))
}

/// Mock backend whose tables cover every question of `corpus`.
pub fn toy_backend(
    corpus: &[LabeledQuestion],
    table_seed: u64,
    feature_dim: usize,
    dialogue: DialogueStyle,
) -> Result<MockBackend> {
    let mut builder = MockBackend::builder()
        .name("toy-mock")
        .feature_dim(feature_dim)
        .dialogue(dialogue);
    for q in corpus {
        builder = builder.table(q.question.clone(), toy_table(q, table_seed));
    }
    builder.build()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let c = toy_corpus(30, 1);
        let (a, b) = split_corpus(&c, REGRESSOR_FRACTION, 9);
        assert_eq!(a.len(), 6);
        assert_eq!(b.len(), 24);
        assert_eq!(split_corpus(&c, REGRESSOR_FRACTION, 9), (a.clone(), b.clone()));
        assert!(a.iter().all(|q| !b.contains(q)));
    }

    #[test]
    fn toy_tables_validate() {
        for q in toy_corpus(50, 2) {
            toy_table(&q, 3).validate().unwrap();
        }
        assert!(toy_backend(&toy_corpus(10, 2), 3, 8, DialogueStyle::Calibrated).is_ok());
    }
}
