//! Direct preference optimization over an abstract policy.
//!
//! For preference items `(x, y_w, y_l)` the loss is
//!
//! ```text
//! L = mean_i softplus(-beta * [(log pi(y_w|x) - log ref(y_w|x)) - (log pi(y_l|x) - log ref(y_l|x))])
//! ```
//!
//! which equals `-ln sigmoid(...)` and is evaluated in the overflow-free form
//! `softplus(t) = max(t, 0) + ln(1 + e^-|t|)`. [`TabularPolicy`] (a softmax
//! over an enumerated response set per prompt) makes every quantity exact, so
//! gradients can be verified against finite differences. Real models plug in
//! through [`Policy`]; LoRA settings are carried in
//! [`DpoConfig::lora_passthrough`] for such adapters and never interpreted
//! here.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::prefs::PrefsLine;

/// Largest toy policy accepted by [`dpo_gradient_check`].
pub const GRADIENT_CHECK_MAX_PARAMS: usize = 100;

/// Relative tolerance of [`dpo_gradient_check`].
pub const GRADIENT_CHECK_TOLERANCE: f64 = 1e-5;

/// Training aborts once a step loss exceeds this multiple of the first.
pub const DIVERGENCE_FACTOR: f64 = 10.0;

/// A conditional distribution over responses.
pub trait Policy {
    /// Natural-log probability of `response` given `prompt`.
    fn log_prob(&self, prompt: &str, response: &str) -> Result<f64>;
}

/// A policy with a flat parameter vector and exact log-probability gradients.
pub trait TrainablePolicy: Policy + Clone {
    fn params(&self) -> &[f64];
    fn set_params(&mut self, params: &[f64]);
    /// Adds `scale * d log_prob(response | prompt) / d params` into `grad`.
    fn accumulate_grad(&self, prompt: &str, response: &str, scale: f64, grad: &mut [f64]) -> Result<()>;
}

/// Per-prompt softmax over a fixed response list; parameters are the logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularPolicy {
    prompts: BTreeMap<String, (usize, Vec<String>)>,
    logits: Vec<f64>,
}

impl TabularPolicy {
    /// Uniform policy over the given responses of each prompt. Responses are
    /// deduplicated and sorted.
    pub fn uniform<'a>(table: impl IntoIterator<Item = (&'a str, Vec<&'a str>)>) -> Result<Self> {
        let mut merged: BTreeMap<String, std::collections::BTreeSet<String>> = BTreeMap::new();
        for (prompt, responses) in table {
            merged
                .entry(prompt.to_string())
                .or_default()
                .extend(responses.into_iter().map(str::to_string));
        }
        let mut prompts = BTreeMap::new();
        let mut offset = 0;
        for (prompt, responses) in merged {
            if responses.is_empty() {
                return Err(Error::invalid(format!("prompt {prompt:?} has no responses")));
            }
            let n = responses.len();
            prompts.insert(prompt, (offset, responses.into_iter().collect()));
            offset += n;
        }
        Ok(Self {
            prompts,
            logits: vec![0.0; offset],
        })
    }

    /// Uniform policy over every chosen and rejected response of `batch`.
    pub fn for_batch(batch: &DpoBatch) -> Result<Self> {
        let mut table: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
        for item in &batch.items {
            let e = table.entry(item.prompt.as_str()).or_default();
            e.push(&item.chosen);
            e.push(&item.rejected);
        }
        Self::uniform(table)
    }

    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }

    fn locate(&self, prompt: &str, response: &str) -> Result<(usize, usize, usize)> {
        let (offset, responses) = self
            .prompts
            .get(prompt)
            .ok_or_else(|| Error::invalid(format!("unknown prompt {prompt:?}")))?;
        let idx = responses
            .binary_search_by(|r| r.as_str().cmp(response))
            .map_err(|_| Error::invalid(format!("response {response:?} not in the policy")))?;
        Ok((*offset, responses.len(), idx))
    }

    fn log_softmax(&self, offset: usize, n: usize) -> Vec<f64> {
        let l = &self.logits[offset..offset + n];
        let max = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + l.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        l.iter().map(|v| v - lse).collect()
    }
}

impl Policy for TabularPolicy {
    fn log_prob(&self, prompt: &str, response: &str) -> Result<f64> {
        let (offset, n, idx) = self.locate(prompt, response)?;
        Ok(self.log_softmax(offset, n)[idx])
    }
}

impl TrainablePolicy for TabularPolicy {
    fn params(&self) -> &[f64] {
        &self.logits
    }

    fn set_params(&mut self, params: &[f64]) {
        self.logits.copy_from_slice(params);
    }

    fn accumulate_grad(&self, prompt: &str, response: &str, scale: f64, grad: &mut [f64]) -> Result<()> {
        let (offset, n, idx) = self.locate(prompt, response)?;
        for (j, lp) in self.log_softmax(offset, n).iter().enumerate() {
            let onehot = if j == idx { 1.0 } else { 0.0 };
            grad[offset + j] += scale * (onehot - lp.exp());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DpoItem {
    pub prompt: String,
    pub chosen: String,
    pub rejected: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DpoBatch {
    pub items: Vec<DpoItem>,
}

impl DpoBatch {
    pub fn new(items: Vec<DpoItem>) -> Result<Self> {
        if let Some(i) = items.iter().position(|it| it.chosen == it.rejected) {
            return Err(Error::invalid(format!("item {i}: chosen equals rejected")));
        }
        Ok(Self { items })
    }

    /// Items from prefs lines. Lines whose chosen and rejected texts are
    /// identical carry no preference and are skipped.
    pub fn from_prefs(lines: &[PrefsLine]) -> Self {
        let items = lines
            .iter()
            .filter(|l| {
                if l.chosen == l.rejected {
                    log::warn!("{}: skipping duplicate pair {}", l.question_id, l.meta.pair_index);
                }
                l.chosen != l.rejected
            })
            .map(|l| DpoItem {
                prompt: l.prompt.clone(),
                chosen: l.chosen.clone(),
                rejected: l.rejected.clone(),
            })
            .collect();
        Self { items }
    }
}

/// `softplus(t) = ln(1 + e^t)` without overflow.
pub fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

struct Terms {
    /// β times the reward margin.
    z: f64,
    /// log π(y_w) − log π(y_l) under the policy.
    margin: f64,
}

fn terms(policy: &dyn Policy, reference: &dyn Policy, item: &DpoItem, index: usize, beta: f64) -> Result<Terms> {
    let lw = policy.log_prob(&item.prompt, &item.chosen)?;
    let ll = policy.log_prob(&item.prompt, &item.rejected)?;
    let rw = reference.log_prob(&item.prompt, &item.chosen)?;
    let rl = reference.log_prob(&item.prompt, &item.rejected)?;
    if let Some(v) = [lw, ll, rw, rl].iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("log-probability {v} in item {index}")));
    }
    Ok(Terms {
        z: beta * ((lw - rw) - (ll - rl)),
        margin: lw - ll,
    })
}

/// Mean DPO loss of `batch`.
pub fn dpo_loss(policy: &dyn Policy, reference: &dyn Policy, batch: &DpoBatch, beta: f64) -> Result<f64> {
    if batch.items.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let mut total = 0.0;
    for (i, item) in batch.items.iter().enumerate() {
        total += softplus(-terms(policy, reference, item, i, beta)?.z);
    }
    Ok(total / batch.items.len() as f64)
}

/// Loss, mean margin and analytic gradient over `items`.
fn loss_and_grad<P: TrainablePolicy>(
    policy: &P,
    reference: &dyn Policy,
    items: &[&DpoItem],
    beta: f64,
) -> Result<(f64, f64, Vec<f64>)> {
    let mut grad = vec![0.0; policy.params().len()];
    let (mut loss, mut margin) = (0.0, 0.0);
    let m = items.len() as f64;
    for (i, item) in items.iter().enumerate() {
        let t = terms(policy, reference, item, i, beta)?;
        loss += softplus(-t.z);
        margin += t.margin;
        // d softplus(-z)/dz = -sigmoid(-z); dz/dθ = β(∇lw − ∇ll).
        let coef = -sigmoid(-t.z) * beta / m;
        policy.accumulate_grad(&item.prompt, &item.chosen, coef, &mut grad)?;
        policy.accumulate_grad(&item.prompt, &item.rejected, -coef, &mut grad)?;
    }
    Ok((loss / m, margin / m, grad))
}

/// Analytic gradient of [`dpo_loss`] with respect to the policy parameters.
pub fn dpo_gradient<P: TrainablePolicy>(
    policy: &P,
    reference: &dyn Policy,
    batch: &DpoBatch,
    beta: f64,
) -> Result<Vec<f64>> {
    if batch.items.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let items: Vec<&DpoItem> = batch.items.iter().collect();
    Ok(loss_and_grad(policy, reference, &items, beta)?.2)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientCheckReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub max_relative_error: f64,
    pub worst_coordinate: usize,
    pub passed: bool,
}

/// Compares the analytic gradient with central differences of step
/// `epsilon`. Relative error per coordinate is `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn dpo_gradient_check<P: TrainablePolicy>(
    policy: &P,
    reference: &dyn Policy,
    batch: &DpoBatch,
    beta: f64,
    epsilon: f64,
) -> Result<GradientCheckReport> {
    let n = policy.params().len();
    if n > GRADIENT_CHECK_MAX_PARAMS {
        return Err(Error::invalid(format!(
            "gradient check needs at most {GRADIENT_CHECK_MAX_PARAMS} parameters, policy has {n}"
        )));
    }
    let analytic = dpo_gradient(policy, reference, batch, beta)?;
    let mut probe = policy.clone();
    let base = policy.params().to_vec();
    let mut numeric = Vec::with_capacity(n);
    for i in 0..n {
        let mut p = base.clone();
        p[i] = base[i] + epsilon;
        probe.set_params(&p);
        let up = dpo_loss(&probe, reference, batch, beta)?;
        p[i] = base[i] - epsilon;
        probe.set_params(&p);
        let down = dpo_loss(&probe, reference, batch, beta)?;
        numeric.push((up - down) / (2.0 * epsilon));
    }
    let (mut worst, mut worst_i) = (0.0, 0);
    for (i, (a, g)) in analytic.iter().zip(&numeric).enumerate() {
        let rel = (a - g).abs() / a.abs().max(g.abs()).max(1e-8);
        if rel > worst {
            worst = rel;
            worst_i = i;
        }
    }
    Ok(GradientCheckReport {
        analytic,
        numeric,
        max_relative_error: worst,
        worst_coordinate: worst_i,
        passed: worst <= GRADIENT_CHECK_TOLERANCE,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DpoConfig {
    pub beta: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Adapter settings forwarded untouched to external trainers.
    pub lora_passthrough: BTreeMap<String, serde_json::Value>,
}

impl Default for DpoConfig {
    fn default() -> Self {
        let lora = [
            ("r", serde_json::json!(8)),
            ("alpha", serde_json::json!(16)),
            ("dropout", serde_json::json!(0.05)),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        Self {
            beta: 0.1,
            learning_rate: 1e-5,
            batch_size: 4,
            epochs: 2,
            seed: 0,
            lora_passthrough: lora,
        }
    }
}

impl DpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::invalid(format!("beta {} must be > 0", self.beta)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be > 0"));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::invalid("batch_size and epochs must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub mean_margin: f64,
}

#[derive(Debug, Clone)]
pub struct DpoRun<P> {
    pub policy: P,
    pub history: Vec<StepRecord>,
    /// Loss and mean margin over the whole dataset before and after training.
    pub initial_loss: f64,
    pub final_loss: f64,
    pub initial_margin: f64,
    pub final_margin: f64,
}

fn mean_margin(policy: &dyn Policy, batch: &DpoBatch) -> Result<f64> {
    let mut total = 0.0;
    for it in &batch.items {
        total += policy.log_prob(&it.prompt, &it.chosen)? - policy.log_prob(&it.prompt, &it.rejected)?;
    }
    Ok(total / batch.items.len() as f64)
}

/// Minibatch gradient descent on the DPO loss against a frozen copy of the
/// initial policy. A step loss above [`DIVERGENCE_FACTOR`] times the first
/// step's loss aborts with [`Error::Diverged`], which carries the loss
/// history so far.
pub fn train<P: TrainablePolicy>(policy: P, dataset: &DpoBatch, config: &DpoConfig) -> Result<DpoRun<P>> {
    config.validate()?;
    if dataset.items.is_empty() {
        return Err(Error::invalid("empty preference dataset"));
    }
    let reference = policy.clone();
    let mut policy = policy;
    let initial_loss = dpo_loss(&policy, &reference, dataset, config.beta)?;
    let initial_margin = mean_margin(&policy, dataset)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..dataset.items.len()).collect();
    let mut history = Vec::new();
    let mut first_loss = None;
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let items: Vec<&DpoItem> = chunk.iter().map(|i| &dataset.items[*i]).collect();
            let (loss, margin, grad) = loss_and_grad(&policy, &reference, &items, config.beta)?;
            let step = history.len();
            history.push(StepRecord {
                step,
                loss,
                mean_margin: margin,
            });
            let limit = DIVERGENCE_FACTOR * *first_loss.get_or_insert(loss);
            if !loss.is_finite() || loss > limit {
                return Err(Error::Diverged {
                    step,
                    loss,
                    limit,
                    history: history.iter().map(|h| h.loss).collect(),
                });
            }
            let updated: Vec<f64> = policy
                .params()
                .iter()
                .zip(&grad)
                .map(|(p, g)| p - config.learning_rate * g)
                .collect();
            policy.set_params(&updated);
        }
    }
    Ok(DpoRun {
        final_loss: dpo_loss(&policy, &reference, dataset, config.beta)?,
        final_margin: mean_margin(&policy, dataset)?,
        policy,
        history,
        initial_loss,
        initial_margin,
    })
}

/// `training_history.csv`: header `step,loss,mean_margin`.
pub fn history_csv(history: &[StepRecord]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for h in history {
        w.serialize(h).map_err(|e| Error::format("training history", e.to_string()))?;
    }
    w.into_inner()
        .map_err(|e| Error::format("training history", e.to_string()))
}

pub fn write_history(path: &Path, history: &[StepRecord]) -> Result<()> {
    io::write_atomic(path, &history_csv(history)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> (TabularPolicy, DpoBatch) {
        let batch = DpoBatch::new(vec![
            DpoItem { prompt: "p1".into(), chosen: "a".into(), rejected: "b".into() },
            DpoItem { prompt: "p1".into(), chosen: "a".into(), rejected: "c".into() },
            DpoItem { prompt: "p2".into(), chosen: "y".into(), rejected: "x".into() },
        ])
        .unwrap();
        let mut policy = TabularPolicy::uniform([("p1", vec!["a", "b", "c"]), ("p2", vec!["x", "y", "z"])]).unwrap();
        policy.set_params(&[0.3, -0.2, 0.1, 0.5, -0.4, 0.0]);
        (policy, batch)
    }

    #[test]
    fn identical_policies_give_ln2() {
        let (p, b) = toy();
        assert!((dpo_loss(&p, &p, &b, 0.1).unwrap() - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn softplus_is_stable() {
        assert_eq!(softplus(-1000.0), 0.0);
        assert_eq!(softplus(1000.0), 1000.0);
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-16);
    }

    #[test]
    fn gradient_check_on_toy_policy() {
        let (p, b) = toy();
        let reference = TabularPolicy::uniform([("p1", vec!["a", "b", "c"]), ("p2", vec!["x", "y", "z"])]).unwrap();
        let r = dpo_gradient_check(&p, &reference, &b, 0.7, 1e-5).unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn beta_zero_has_zero_gradient() {
        let (p, b) = toy();
        let r = p.clone();
        assert!(dpo_gradient(&p, &r, &b, 0.0).unwrap().iter().all(|g| *g == 0.0));
    }

    #[test]
    fn duplicate_pair_is_rejected() {
        let item = DpoItem { prompt: "p".into(), chosen: "a".into(), rejected: "a".into() };
        assert!(DpoBatch::new(vec![item]).is_err());
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let (p, _) = toy();
        assert!(train(p, &DpoBatch::default(), &DpoConfig::default()).is_err());
    }

    #[test]
    fn history_csv_layout() {
        let h = [StepRecord { step: 0, loss: 0.5, mean_margin: 0.25 }];
        assert_eq!(String::from_utf8(history_csv(&h).unwrap()).unwrap(), "step,loss,mean_margin\n0,0.5,0.25\n");
    }

    #[test]
    fn defaults_carry_lora_settings() {
        let c = DpoConfig::default();
        assert_eq!(c.lora_passthrough["r"], 8);
        assert_eq!(c.lora_passthrough["alpha"], 16);
        assert_eq!((c.learning_rate, c.batch_size, c.epochs), (1e-5, 4, 2));
    }
}
