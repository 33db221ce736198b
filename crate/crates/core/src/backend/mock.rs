//! Deterministic mock language model.
//!
//! Each question owns a finite [`DistributionTable`] over whitespace-tokenized
//! continuations. Sequences are stored in a prefix trie, so the conditional
//! probability of every token (and of the implicit end-of-sequence token) is
//! known exactly and reported as its natural log. Free-text prompts are
//! answered by a small scripted "toy world" built on the same tables.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    default_feature_layer, Backend, BackendDescriptor, BackendError, Concurrency, DecodingParams,
    GenerationRecord,
};
use crate::error::{Error, Result};
use crate::estimators::judge::{extract_answer, normalize_answer};
use crate::prompts::{self, PromptKind, Role};
use crate::seed;

/// End-of-sequence token. It is emitted (and counted) when a continuation
/// finishes before the token bound, so token log-probabilities of a complete
/// sequence sum to its log-probability in the table.
pub const EOS_TOKEN: &str = "</s>";

const NORMALIZATION_TOLERANCE: f64 = 1e-9;

/// Probabilities over complete continuations for one question.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DistributionTable(pub BTreeMap<String, f64>);

impl DistributionTable {
    pub fn new<S: Into<String>>(entries: impl IntoIterator<Item = (S, f64)>) -> Self {
        let mut map = BTreeMap::new();
        for (k, p) in entries {
            *map.entry(k.into()).or_insert(0.0) += p;
        }
        Self(map)
    }

    pub fn validate(&self) -> Result<()> {
        if self.0.is_empty() {
            return Err(Error::invalid("distribution table is empty"));
        }
        for (seq, p) in &self.0 {
            if !(p.is_finite() && *p >= 0.0) {
                return Err(Error::invalid(format!("probability {p} for {seq:?}")));
            }
            if seq.split_whitespace().next().is_none() {
                return Err(Error::invalid("sequences need at least one token"));
            }
            if seq.split_whitespace().any(|t| t == EOS_TOKEN) {
                return Err(Error::invalid(format!("{seq:?} contains the end-of-sequence token")));
            }
        }
        let total: f64 = self.0.values().sum();
        if (total - 1.0).abs() > NORMALIZATION_TOLERANCE {
            return Err(Error::invalid(format!(
                "distribution sums to {total}, expected 1 within {NORMALIZATION_TOLERANCE:e}"
            )));
        }
        Ok(())
    }

    /// Probability mass per normalized extracted answer.
    pub fn answer_masses(&self) -> BTreeMap<String, f64> {
        let mut out = BTreeMap::new();
        for (text, p) in &self.0 {
            let key = normalize_answer(&extract_answer(text).unwrap_or_else(|| text.clone()));
            *out.entry(key).or_insert(0.0) += p;
        }
        out
    }

    fn mode(&self) -> Option<&str> {
        let mut best: Option<(&str, f64)> = None;
        for (text, p) in &self.0 {
            if best.map_or(true, |(_, bp)| *p > bp) {
                best = Some((text, *p));
            }
        }
        best.map(|(t, _)| t)
    }
}

#[derive(Debug, Clone)]
struct Node {
    mass: f64,
    eos: f64,
    children: BTreeMap<u32, usize>,
}

#[derive(Debug, Clone)]
struct Trie {
    table: DistributionTable,
    nodes: Vec<Node>,
}

impl Trie {
    fn build(table: DistributionTable, index: &BTreeMap<String, u32>) -> Self {
        let mut nodes = vec![Node {
            mass: 0.0,
            eos: 0.0,
            children: BTreeMap::new(),
        }];
        for (seq, p) in &table.0 {
            if *p == 0.0 {
                continue;
            }
            let mut cur = 0;
            nodes[0].mass += p;
            for tok in seq.split_whitespace() {
                let id = index[tok];
                let next = match nodes[cur].children.get(&id) {
                    Some(n) => *n,
                    None => {
                        nodes.push(Node {
                            mass: 0.0,
                            eos: 0.0,
                            children: BTreeMap::new(),
                        });
                        let n = nodes.len() - 1;
                        nodes[cur].children.insert(id, n);
                        n
                    }
                };
                cur = next;
                nodes[cur].mass += p;
            }
            nodes[cur].eos += p;
        }
        Trie { table, nodes }
    }

    /// (token, conditional probability, child node) at `node`; `None` token is EOS.
    fn options(&self, node: usize) -> Vec<(Option<u32>, f64, usize)> {
        let n = &self.nodes[node];
        let mut out = Vec::with_capacity(n.children.len() + 1);
        if n.eos > 0.0 {
            out.push((None, n.eos / n.mass, node));
        }
        for (tok, child) in &n.children {
            out.push((Some(*tok), self.nodes[*child].mass / n.mass, *child));
        }
        out
    }
}

/// Maps an emitted token sequence to its feature vector.
#[derive(Clone)]
pub enum FeatureRule {
    /// Fixed seeded random projection of the one-hot last content token
    /// (the last emitted token other than end-of-sequence).
    LastTokenProjection { seed: u64 },
    Custom(Arc<dyn Fn(&[u32]) -> Vec<f32> + Send + Sync>),
}

impl fmt::Debug for FeatureRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FeatureRule::LastTokenProjection { seed } => {
                f.debug_struct("LastTokenProjection").field("seed", seed).finish()
            }
            FeatureRule::Custom(_) => f.write_str("Custom(..)"),
        }
    }
}

/// How the mock behaves as the assistant in a multi-turn dialogue.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DialogueStyle {
    /// Always restates its first answer.
    Stubborn,
    /// Always adopts the user's latest claim.
    Sycophantic,
    /// Keeps its answer when its own table puts at least as much mass on it as
    /// on the user's claim.
    #[default]
    Calibrated,
}

/// Scripted overrides. Returning `None` falls back to the toy-world reply.
pub trait Script: Send + Sync {
    fn reply(&self, _prompt: &str, _seed: u64) -> Option<String> {
        None
    }

    /// Probability of the token `True` after a self-evaluation prompt.
    fn p_true(&self, _prompt: &str) -> Option<f64> {
        None
    }
}

pub struct MockBackend {
    descriptor: BackendDescriptor,
    vocab: Vec<String>,
    index: BTreeMap<String, u32>,
    tries: BTreeMap<String, Trie>,
    fallback: Option<Trie>,
    feature_rule: FeatureRule,
    dialogue: DialogueStyle,
    script: Option<Arc<dyn Script>>,
}

impl fmt::Debug for MockBackend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MockBackend")
            .field("descriptor", &self.descriptor)
            .field("questions", &self.tries.len())
            .field("dialogue", &self.dialogue)
            .finish_non_exhaustive()
    }
}

#[derive(Default)]
pub struct MockBackendBuilder {
    name: Option<String>,
    layer_count: Option<usize>,
    feature_layer: Option<usize>,
    feature_dim: Option<usize>,
    tables: BTreeMap<String, DistributionTable>,
    fallback: Option<DistributionTable>,
    feature_rule: Option<FeatureRule>,
    dialogue: DialogueStyle,
    script: Option<Arc<dyn Script>>,
}

impl MockBackendBuilder {
    pub fn name(mut self, name: impl Into<String>) -> Self {
        self.name = Some(name.into());
        self
    }

    pub fn layer_count(mut self, layers: usize) -> Self {
        self.layer_count = Some(layers);
        self
    }

    pub fn feature_layer(mut self, layer: usize) -> Self {
        self.feature_layer = Some(layer);
        self
    }

    pub fn feature_dim(mut self, dim: usize) -> Self {
        self.feature_dim = Some(dim);
        self
    }

    pub fn table(mut self, question: impl Into<String>, table: DistributionTable) -> Self {
        self.tables.insert(question.into(), table);
        self
    }

    /// Distribution used for questions without their own table.
    pub fn fallback(mut self, table: DistributionTable) -> Self {
        self.fallback = Some(table);
        self
    }

    pub fn feature_rule(mut self, rule: FeatureRule) -> Self {
        self.feature_rule = Some(rule);
        self
    }

    pub fn dialogue(mut self, style: DialogueStyle) -> Self {
        self.dialogue = style;
        self
    }

    pub fn script(mut self, script: Arc<dyn Script>) -> Self {
        self.script = Some(script);
        self
    }

    pub fn build(self) -> Result<MockBackend> {
        for (q, t) in &self.tables {
            t.validate()
                .map_err(|e| Error::invalid(format!("table for {q:?}: {e}")))?;
        }
        if let Some(t) = &self.fallback {
            t.validate()?;
        }
        let mut tokens: BTreeSet<String> = ["True", "False"].iter().map(|s| s.to_string()).collect();
        for t in self.tables.values().chain(self.fallback.iter()) {
            for seq in t.0.keys() {
                tokens.extend(seq.split_whitespace().map(str::to_string));
            }
        }
        let mut vocab = vec![EOS_TOKEN.to_string()];
        vocab.extend(tokens);
        let index: BTreeMap<String, u32> = vocab
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();

        let layer_count = self.layer_count.unwrap_or(32);
        let descriptor = BackendDescriptor {
            name: self.name.unwrap_or_else(|| "mock".into()),
            layer_count,
            feature_layer: self
                .feature_layer
                .unwrap_or_else(|| default_feature_layer(layer_count)),
            feature_dim: self.feature_dim.unwrap_or(16),
            vocab_size: vocab.len(),
        };
        descriptor.validate()?;

        let tries = self
            .tables
            .into_iter()
            .map(|(q, t)| (q, Trie::build(t, &index)))
            .collect();
        let fallback = self.fallback.map(|t| Trie::build(t, &index));
        Ok(MockBackend {
            descriptor,
            vocab,
            index,
            tries,
            fallback,
            feature_rule: self
                .feature_rule
                .unwrap_or(FeatureRule::LastTokenProjection { seed: 0 }),
            dialogue: self.dialogue,
            script: self.script,
        })
    }
}

impl MockBackend {
    pub fn builder() -> MockBackendBuilder {
        MockBackendBuilder::default()
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    /// The table used for `question`.
    pub fn table(&self, question: &str) -> Option<&DistributionTable> {
        self.trie(question).map(|t| &t.table)
    }

    fn trie(&self, question: &str) -> Option<&Trie> {
        self.tries.get(question).or(self.fallback.as_ref())
    }

    fn question_of(prompt: &str) -> &str {
        match PromptKind::classify(prompt) {
            PromptKind::InitialResponse => prompts::line_field(prompt, "\nQuestion: ").unwrap_or(prompt),
            _ => prompt,
        }
    }

    /// Every continuation in the support of `question` with its exact
    /// per-token log-probabilities (end-of-sequence included).
    pub fn enumerate(&self, question: &str) -> Vec<(String, Vec<f64>)> {
        let Some(trie) = self.trie(question) else {
            return Vec::new();
        };
        let mut out = Vec::new();
        let mut stack = vec![(0usize, Vec::<u32>::new(), Vec::<f64>::new())];
        while let Some((node, toks, lps)) = stack.pop() {
            for (tok, p, child) in trie.options(node) {
                let mut lps = lps.clone();
                lps.push(p.ln().min(0.0));
                match tok {
                    None => out.push((self.detokenize(&toks), lps)),
                    Some(t) => {
                        let mut toks = toks.clone();
                        toks.push(t);
                        stack.push((child, toks, lps));
                    }
                }
            }
        }
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    fn detokenize(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|id| **id != 0)
            .map(|id| self.vocab[*id as usize].as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }

    fn feature(&self, ids: &[u32]) -> Vec<f32> {
        match &self.feature_rule {
            FeatureRule::Custom(f) => f(ids),
            FeatureRule::LastTokenProjection { seed } => {
                let last = ids.iter().rev().copied().find(|id| *id != 0).unwrap_or(0);
                let mut rng = ChaCha8Rng::seed_from_u64(seed::mix(&[
                    *seed,
                    self.descriptor.feature_layer as u64,
                    u64::from(last),
                ]));
                (0..self.descriptor.feature_dim)
                    .map(|_| rng.gen_range(-1.0f32..1.0))
                    .collect()
            }
        }
    }

    /// Mass the question's table puts on `answer` (compared after extraction
    /// and normalization).
    fn belief(&self, question: &str, answer: &str) -> f64 {
        let key = normalize_answer(answer);
        self.trie(question)
            .and_then(|t| t.table.answer_masses().get(&key).copied())
            .unwrap_or(0.0)
    }

    fn toy_reply(&self, prompt: &str, seed: u64) -> String {
        match PromptKind::classify(prompt) {
            PromptKind::InitialResponse => {
                let q = Self::question_of(prompt);
                self.trie(q)
                    .and_then(|t| t.table.mode())
                    .unwrap_or("I am not sure.")
                    .to_string()
            }
            PromptKind::IncorrectSolution => {
                let q = prompts::line_field(prompt, "\nQuestion: ").unwrap_or_default();
                let gold = prompts::line_field(prompt, "\nCorrect answer: ").unwrap_or_default();
                let wrong = self.wrong_answer(q, gold, seed);
                format!("Solution: Reviewing the options, {wrong} looks right to me. The answer is {wrong}.")
            }
            PromptKind::CorrectSolution => {
                let gold = prompts::line_field(prompt, "\nCorrect answer: ").unwrap_or_default();
                format!("Solution: Checking each option in turn, {gold} is the one that holds. The answer is {gold}.")
            }
            PromptKind::Stance(level) => {
                let v1 = prompts::block_field(prompt, "\n\nViewpoint 1: ").unwrap_or_default();
                let v2 = prompts::block_field(prompt, "\n\nViewpoint 2: ").unwrap_or_default();
                crate::prefs::template_stance(level, v1, v2)
            }
            PromptKind::VerbalizedScore => {
                let q = prompts::block_field(prompt, "\n\nQuestion: ").unwrap_or_default();
                let a = prompts::block_field(prompt, "\n\nAnswer: ").unwrap_or_default();
                let m = self.belief(q, &extract_answer(a).unwrap_or_else(|| a.to_string()));
                // Verbalized scores run high, as self-reports tend to.
                format!("score: {}", (60.0 + 40.0 * m).round() as u32)
            }
            PromptKind::Chat => self.dialogue_reply(prompt),
            PromptKind::UserFollowup => {
                let transcript = prompt.split_once("\n\n").map_or("", |x| x.1);
                let turns = prompts::parse_chat(transcript);
                let claim = turns
                    .iter()
                    .filter(|(r, _)| *r == Role::User)
                    .nth(1)
                    .and_then(|(_, t)| extract_answer(t));
                match claim {
                    Some(c) => format!("I am confident in my view. The answer is {c}."),
                    None => "I still disagree with you.".to_string(),
                }
            }
            PromptKind::PTrue => "True".to_string(),
            PromptKind::Unknown => "I am not sure how to respond to that.".to_string(),
        }
    }

    fn wrong_answer(&self, question: &str, gold: &str, seed: u64) -> String {
        let gold_key = normalize_answer(gold);
        if let Some(t) = self.trie(question) {
            let mut masses: Vec<(String, f64)> = t.table.answer_masses().into_iter().collect();
            masses.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
            if let Some((k, _)) = masses.into_iter().find(|(k, _)| *k != gold_key && !k.is_empty()) {
                return k.to_uppercase();
            }
        }
        let letters: Vec<&str> = ["A", "B", "C", "D"]
            .into_iter()
            .filter(|l| normalize_answer(l) != gold_key)
            .collect();
        letters[(seed % letters.len() as u64) as usize].to_string()
    }

    fn dialogue_reply(&self, prompt: &str) -> String {
        let turns = prompts::parse_chat(prompt);
        let question = turns
            .iter()
            .find(|(r, _)| *r == Role::User)
            .map(|(_, t)| t.as_str())
            .unwrap_or_default();
        let own = turns
            .iter()
            .find(|(r, _)| *r == Role::Assistant)
            .and_then(|(_, t)| extract_answer(t));
        let claim = turns
            .iter()
            .rev()
            .find(|(r, _)| *r == Role::User)
            .and_then(|(_, t)| extract_answer(t));
        let hold = |a: &str| {
            format!("I have reconsidered, and I still believe my original answer is correct. The answer is {a}.")
        };
        let concede =
            |c: &str| format!("You make a good point and I was mistaken. The answer is {c}.");
        match (own, claim) {
            (Some(own), None) => hold(&own),
            (None, Some(claim)) => concede(&claim),
            (None, None) => "I cannot tell which answer is right.".to_string(),
            (Some(own), Some(claim)) => match self.dialogue {
                DialogueStyle::Stubborn => hold(&own),
                DialogueStyle::Sycophantic => concede(&claim),
                DialogueStyle::Calibrated => {
                    if self.belief(question, &own) >= self.belief(question, &claim) {
                        hold(&own)
                    } else {
                        concede(&claim)
                    }
                }
            },
        }
    }

    fn default_p_true(&self, prompt: &str) -> f64 {
        let q = prompts::line_field(prompt, "Question: ").unwrap_or_default();
        let a = prompts::line_field(prompt, "\nProposed Answer: ").unwrap_or_default();
        let m = self.belief(q, &extract_answer(a).unwrap_or_else(|| a.to_string()));
        m.sqrt()
    }
}

impl Backend for MockBackend {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn concurrency(&self) -> Concurrency {
        Concurrency::Reentrant
    }

    fn sample(
        &self,
        prompt: &str,
        params: &DecodingParams,
        seed: u64,
    ) -> Result<GenerationRecord, BackendError> {
        let question = Self::question_of(prompt);
        let trie = self
            .trie(question)
            .ok_or_else(|| BackendError::fatal(format!("no distribution for question {question:?}")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut node = 0;
        let mut ids = Vec::new();
        let mut lps = Vec::new();
        let mut finished = false;
        while ids.len() < params.max_tokens {
            let options = trie.options(node);
            let (tok, p, child) = pick(&options, params, &mut rng);
            ids.push(tok.unwrap_or(0));
            lps.push(p.ln().min(0.0));
            if tok.is_none() {
                finished = true;
                break;
            }
            node = child;
        }
        Ok(GenerationRecord {
            feature: self.feature(&ids),
            text: self.detokenize(&ids),
            token_ids: ids,
            token_logprobs: lps,
            truncated: !finished,
        })
    }

    fn complete(&self, prompt: &str, seed: u64) -> Result<String, BackendError> {
        if let Some(reply) = self.script.as_ref().and_then(|s| s.reply(prompt, seed)) {
            return Ok(reply);
        }
        Ok(self.toy_reply(prompt, seed))
    }

    fn next_token_probability(&self, prompt: &str, token_id: u32) -> Result<f64, BackendError> {
        let token = self
            .vocab
            .get(token_id as usize)
            .ok_or_else(|| BackendError::fatal(format!("token id {token_id} out of range")))?;
        if PromptKind::classify(prompt) == PromptKind::PTrue {
            let p = self
                .script
                .as_ref()
                .and_then(|s| s.p_true(prompt))
                .unwrap_or_else(|| self.default_p_true(prompt))
                .clamp(0.0, 1.0);
            return Ok(match token.as_str() {
                "True" => p,
                "False" => 1.0 - p,
                _ => 0.0,
            });
        }
        let question = Self::question_of(prompt);
        Ok(self
            .trie(question)
            .map(|t| {
                t.options(0)
                    .into_iter()
                    .find(|(tok, _, _)| tok.unwrap_or(0) == token_id)
                    .map_or(0.0, |(_, p, _)| p)
            })
            .unwrap_or(0.0))
    }

    fn token_id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }
}

/// Temperature then nucleus filtering over the exact conditionals, followed
/// by one categorical draw.
fn pick(
    options: &[(Option<u32>, f64, usize)],
    params: &DecodingParams,
    rng: &mut ChaCha8Rng,
) -> (Option<u32>, f64, usize) {
    let inv_t = 1.0 / params.temperature;
    let mut weighted: Vec<(usize, f64)> = options
        .iter()
        .enumerate()
        .map(|(i, (_, p, _))| (i, if inv_t == 1.0 { *p } else { p.powf(inv_t) }))
        .collect();
    let total: f64 = weighted.iter().map(|(_, w)| w).sum();
    if params.top_p < 1.0 {
        weighted.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let mut cum = 0.0;
        let mut keep = 0;
        for (_, w) in &weighted {
            cum += w / total;
            keep += 1;
            if cum >= params.top_p {
                break;
            }
        }
        weighted.truncate(keep);
        weighted.sort_by_key(|(i, _)| *i);
    }
    let kept: f64 = weighted.iter().map(|(_, w)| w).sum();
    let mut u = rng.gen::<f64>() * kept;
    for (i, w) in &weighted {
        if u < *w {
            return options[*i];
        }
        u -= w;
    }
    options[weighted.last().map_or(0, |(i, _)| *i)]
}
