//! Regressor from sampled hidden states to semantic entropy.
//!
//! The network embeds each of the `n` standardized feature vectors, runs a
//! pre-LN transformer encoder over the set (no positional encoding), pools,
//! and feeds a GELU MLP whose last width is 1. A softplus output keeps the
//! predicted entropy nonnegative. With mean pooling the vectors are put in a
//! canonical order first, so predictions are bit-identical under any
//! permutation of the inputs.
//!
//! # Model file
//!
//! ```text
//! bytes 0..8    magic "CPREGR\0\0"
//! bytes 8..12   format version, u32 little-endian
//! bytes 12..20  header length H, u64 little-endian
//! next H bytes  JSON header (feature_dim, config, standardization, val_mse, ...)
//! remainder     parameters, f32 little-endian, header.param_count values
//! ```

mod net;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;

use net::Net;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"CPREGR\0\0";

/// Default α mapping entropy to confidence.
pub const DEFAULT_ALPHA: f64 = 0.7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    Mean,
    Last,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegressorConfig {
    pub encoder_layers: usize,
    pub attention_heads: usize,
    /// Width of the encoder; inputs are linearly embedded to this size.
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub mlp_widths: Vec<usize>,
    pub pooling: Pooling,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Gradients are rescaled to at most this global L2 norm.
    pub clip_norm: f64,
    pub val_fraction: f64,
    pub seed: u64,
    pub alpha: f64,
}

impl Default for RegressorConfig {
    fn default() -> Self {
        Self {
            encoder_layers: 1,
            attention_heads: 4,
            model_dim: 32,
            ffn_dim: 64,
            mlp_widths: vec![4096, 64, 1],
            pooling: Pooling::Mean,
            learning_rate: 0.01,
            momentum: 0.9,
            batch_size: 16,
            epochs: 40,
            clip_norm: 1.0,
            val_fraction: 0.2,
            seed: 0,
            alpha: DEFAULT_ALPHA,
        }
    }
}

impl RegressorConfig {
    pub fn validate(&self) -> Result<()> {
        let w = &self.mlp_widths;
        if w.is_empty() || *w.last().unwrap() != 1 {
            return Err(Error::invalid("mlp_widths must end with 1"));
        }
        if w.windows(2).any(|p| p[0] <= p[1]) {
            return Err(Error::invalid(format!("mlp_widths {w:?} must be strictly decreasing")));
        }
        if self.attention_heads == 0 || self.model_dim % self.attention_heads != 0 {
            return Err(Error::invalid(format!(
                "model_dim {} is not divisible by {} heads",
                self.model_dim, self.attention_heads
            )));
        }
        if self.ffn_dim == 0 || self.batch_size == 0 {
            return Err(Error::invalid("ffn_dim and batch_size must be positive"));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::invalid(format!(
                "val_fraction {} not in (0, 1)",
                self.val_fraction
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum must be in [0, 1)"));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::invalid("alpha must be positive"));
        }
        Ok(())
    }
}

/// One training example: the `n` feature vectors of a question and its
/// semantic entropy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub features: Vec<Vec<f32>>,
    pub target_se: f64,
}

/// Per-dimension standardization statistics from the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    feature_dim: usize,
    config: RegressorConfig,
    standardization: Standardization,
    val_mse: f64,
    history: Vec<f64>,
    param_count: usize,
}

/// A trained regressor. Immutable; prediction is safe from many threads.
#[derive(Debug, Clone)]
pub struct RegressorModel {
    pub config: RegressorConfig,
    pub feature_dim: usize,
    pub standardization: Standardization,
    /// Mean squared error on the held-out split.
    pub val_mse: f64,
    /// Mean training-split loss after each epoch.
    pub history: Vec<f64>,
    net: Net,
    params: Vec<f64>,
}

/// e^(−α·se): 1 at se = 0, strictly decreasing.
pub fn confidence_from_se(se: f64, alpha: f64) -> Result<f64> {
    if !(se >= 0.0) || !se.is_finite() {
        return Err(Error::invalid(format!("entropy {se} must be finite and >= 0")));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::invalid(format!("alpha {alpha} must be positive")));
    }
    Ok((-alpha * se).exp())
}

fn check_dims(features: &[impl AsRef<[f32]>], dim: usize, index: usize) -> Result<()> {
    if features.is_empty() {
        return Err(Error::invalid(format!("example {index} has no feature vectors")));
    }
    for f in features {
        let f = f.as_ref();
        if f.len() != dim {
            return Err(Error::DimensionMismatch {
                index,
                expected: dim,
                found: f.len(),
            });
        }
        if f.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("feature value in example {index}")));
        }
    }
    Ok(())
}

impl Standardization {
    fn fit(examples: &[&TrainingExample], dim: usize) -> Self {
        let mut mean = vec![0.0; dim];
        let mut sq = vec![0.0; dim];
        let mut count = 0.0;
        for ex in examples {
            for f in &ex.features {
                count += 1.0;
                for (j, v) in f.iter().enumerate() {
                    let v = f64::from(*v);
                    mean[j] += v;
                    sq[j] += v * v;
                }
            }
        }
        let std = (0..dim)
            .map(|j| {
                mean[j] /= count;
                let var = (sq[j] / count - mean[j] * mean[j]).max(0.0);
                if var.sqrt() < 1e-8 {
                    1.0
                } else {
                    var.sqrt()
                }
            })
            .collect();
        Self { mean, std }
    }

    /// Standardized, flattened input in canonical order for mean pooling.
    fn apply(&self, features: &[impl AsRef<[f32]>], pooling: Pooling) -> Vec<f64> {
        let mut rows: Vec<Vec<f64>> = features
            .iter()
            .map(|f| {
                f.as_ref()
                    .iter()
                    .enumerate()
                    .map(|(j, v)| (f64::from(*v) - self.mean[j]) / self.std[j])
                    .collect()
            })
            .collect();
        if pooling == Pooling::Mean {
            rows.sort_by(|a, b| {
                a.iter()
                    .zip(b)
                    .map(|(x, y)| x.total_cmp(y))
                    .find(|o| o.is_ne())
                    .unwrap_or(std::cmp::Ordering::Equal)
            });
        }
        rows.concat()
    }
}

fn init_params(net: &Net, seed: u64, target_mean: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = vec![0.0; net.len];
    for &(off, fan_in, fan_out) in &net.matrices {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        for v in &mut p[off..off + fan_in * fan_out] {
            *v = rng.gen_range(-a..a);
        }
    }
    for &(off, len) in &net.gains {
        p[off..off + len].iter_mut().for_each(|v| *v = 1.0);
    }
    // Start the softplus output near the mean target.
    let m = target_mean.max(1e-3);
    p[net.output_bias()] = m.exp_m1().ln();
    p
}

struct Prepared {
    z: Vec<f64>,
    n: usize,
    target: f64,
}

fn mse(net: &Net, params: &[f64], data: &[Prepared]) -> f64 {
    let total: f64 = data
        .iter()
        .map(|ex| {
            let (pre, _) = net.forward(params, &ex.z, ex.n);
            let e = net::softplus(pre) - ex.target;
            e * e
        })
        .sum();
    total / data.len() as f64
}

/// Squared-error loss of one batch and its gradient (averaged over the batch).
fn batch_gradient(net: &Net, params: &[f64], batch: &[&Prepared]) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; params.len()];
    let mut loss = 0.0;
    for ex in batch {
        let (pre, cache) = net.forward(params, &ex.z, ex.n);
        let err = net::softplus(pre) - ex.target;
        loss += err * err;
        net.backward(params, &mut grad, &cache, 2.0 * err * net::sigmoid(pre));
    }
    let scale = 1.0 / batch.len() as f64;
    grad.iter_mut().for_each(|g| *g *= scale);
    (loss * scale, grad)
}

/// Splits `m` shuffled indices into (train, val). A single example is used
/// for both.
fn split(m: usize, val_fraction: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    if m == 1 {
        log::warn!("one training example: validating on the training example");
        return (vec![0], vec![0]);
    }
    let mut idx: Vec<usize> = (0..m).collect();
    idx.shuffle(rng);
    let n_val = ((m as f64 * val_fraction).round() as usize).clamp(1, m - 1);
    let val = idx.split_off(m - n_val);
    (idx, val)
}

/// Trains a regressor. Deterministic given `config.seed`.
pub fn train(dataset: &[TrainingExample], config: &RegressorConfig) -> Result<RegressorModel> {
    config.validate()?;
    let first = dataset
        .first()
        .ok_or_else(|| Error::invalid("training dataset is empty"))?;
    let dim = first
        .features
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::invalid("example 0 has no feature vectors"))?;
    for (i, ex) in dataset.iter().enumerate() {
        check_dims(&ex.features, dim, i)?;
        if !(ex.target_se >= 0.0 && ex.target_se.is_finite()) {
            return Err(Error::invalid(format!(
                "example {i} has target {} (must be finite and >= 0)",
                ex.target_se
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (train_idx, val_idx) = split(dataset.len(), config.val_fraction, &mut rng);
    let train_refs: Vec<&TrainingExample> = train_idx.iter().map(|i| &dataset[*i]).collect();
    let standardization = Standardization::fit(&train_refs, dim);
    let prep = |i: &usize| Prepared {
        z: standardization.apply(&dataset[*i].features, config.pooling),
        n: dataset[*i].features.len(),
        target: dataset[*i].target_se,
    };
    let train_set: Vec<Prepared> = train_idx.iter().map(prep).collect();
    let val_set: Vec<Prepared> = val_idx.iter().map(prep).collect();

    let net = Net::new(dim, config);
    let target_mean = train_set.iter().map(|e| e.target).sum::<f64>() / train_set.len() as f64;
    let mut params = init_params(&net, rng.gen(), target_mean);
    let mut velocity = vec![0.0; params.len()];
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for (step, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&Prepared> = chunk.iter().map(|i| &train_set[*i]).collect();
            let (loss, mut grad) = batch_gradient(&net, &params, &batch);
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss {loss} at epoch {epoch}, step {step} (lr {}, history {history:?})",
                    config.learning_rate
                )));
            }
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm > config.clip_norm {
                let s = config.clip_norm / norm;
                grad.iter_mut().for_each(|g| *g *= s);
            }
            for ((p, v), g) in params.iter_mut().zip(&mut velocity).zip(&grad) {
                *v = config.momentum * *v - config.learning_rate * g;
                *p += *v;
            }
        }
        let epoch_loss = mse(&net, &params, &train_set);
        if !epoch_loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "training loss {epoch_loss} after epoch {epoch} (history {history:?})"
            )));
        }
        log::debug!("regressor epoch {epoch}: train mse {epoch_loss:.6}");
        history.push(epoch_loss);
    }

    // The stored model is the f32 one; evaluate exactly what is persisted.
    params.iter_mut().for_each(|p| *p = f64::from(*p as f32));
    let val_mse = mse(&net, &params, &val_set);
    Ok(RegressorModel {
        config: config.clone(),
        feature_dim: dim,
        standardization,
        val_mse,
        history,
        net,
        params,
    })
}

impl RegressorModel {
    /// Output before the softplus map.
    pub fn raw_output(&self, features: &[impl AsRef<[f32]>]) -> Result<f64> {
        check_dims(features, self.feature_dim, 0)?;
        let z = self.standardization.apply(features, self.config.pooling);
        Ok(self.net.forward(&self.params, &z, features.len()).0)
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Overwrites the output bias (used to probe the output map).
    pub fn set_output_bias(&mut self, value: f64) {
        let b = self.net.output_bias();
        self.params[b] = f64::from(value as f32);
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            format_version: FORMAT_VERSION,
            feature_dim: self.feature_dim,
            config: self.config.clone(),
            standardization: self.standardization.clone(),
            val_mse: self.val_mse,
            history: self.history.clone(),
            param_count: self.params.len(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + json.len() + 4 * self.params.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for p in &self.params {
            out.extend_from_slice(&(*p as f32).to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::format("regressor model", m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic bytes"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(bad(&format!("unsupported format version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body)?;
        header.config.validate()?;
        let net = Net::new(header.feature_dim, &header.config);
        let block = &bytes[20 + hlen..];
        if header.param_count != net.len || block.len() != 4 * net.len {
            return Err(bad(&format!(
                "expected {} parameters, found {} bytes",
                net.len,
                block.len()
            )));
        }
        let params = block
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect();
        Ok(Self {
            config: header.config,
            feature_dim: header.feature_dim,
            standardization: header.standardization,
            val_mse: header.val_mse,
            history: header.history,
            net,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Predicted semantic entropy (nonnegative) for one question's features.
pub fn predict_se(model: &RegressorModel, features: &[impl AsRef<[f32]>]) -> Result<f64> {
    Ok(net::softplus(model.raw_output(features)?))
}

/// Analytic and central-difference gradients of the squared-error loss of
/// one example with respect to every parameter of a freshly initialized net.
#[doc(hidden)]
pub fn gradient_check(
    example: &TrainingExample,
    config: &RegressorConfig,
    epsilon: f64,
) -> Result<Vec<(f64, f64)>> {
    config.validate()?;
    let dim = example.features.first().map_or(0, Vec::len);
    check_dims(&example.features, dim, 0)?;
    let net = Net::new(dim, config);
    let mut params = init_params(&net, config.seed, 0.5);
    // Perturb biases and gains away from their initial constants.
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37);
    params.iter_mut().for_each(|p| *p += rng.gen_range(-0.1..0.1));
    let std = Standardization::fit(&[example], dim);
    let z = std.apply(&example.features, config.pooling);
    let n = example.features.len();
    let loss = |p: &[f64]| {
        let e = net::softplus(net.forward(p, &z, n).0) - example.target_se;
        e * e
    };
    let prepared = Prepared {
        z: z.clone(),
        n,
        target: example.target_se,
    };
    let (_, analytic) = batch_gradient(&net, &params, &[&prepared]);
    let mut out = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let orig = params[i];
        params[i] = orig + epsilon;
        let up = loss(&params);
        params[i] = orig - epsilon;
        let down = loss(&params);
        params[i] = orig;
        out.push((analytic[i], (up - down) / (2.0 * epsilon)));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RegressorConfig {
        RegressorConfig {
            model_dim: 8,
            attention_heads: 2,
            ffn_dim: 16,
            mlp_widths: vec![16, 4, 1],
            epochs: 5,
            batch_size: 4,
            ..RegressorConfig::default()
        }
    }

    fn example(seed: u64, n: usize, dim: usize) -> TrainingExample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        TrainingExample {
            features: (0..n)
                .map(|_| (0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
                .collect(),
            target_se: rng.gen_range(0.0..2.0),
        }
    }

    #[test]
    fn confidence_examples() {
        assert_eq!(confidence_from_se(0.0, 0.3).unwrap(), 1.0);
        assert!((confidence_from_se(0.6730, 0.7).unwrap() - 0.6243).abs() < 1e-4);
        assert!((confidence_from_se(2f64.ln(), 1.0).unwrap() - 0.5).abs() < 1e-15);
        assert!(confidence_from_se(-0.1, 0.7).is_err());
    }

    #[test]
    fn gradient_matches_central_differences() {
        let ex = example(3, 5, 8);
        for pooling in [Pooling::Mean, Pooling::Last] {
            let cfg = RegressorConfig { pooling, ..tiny() };
            let pairs = gradient_check(&ex, &cfg, 1e-5).unwrap();
            let worst = pairs
                .iter()
                .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
                .fold(0.0, f64::max);
            assert!(worst < 1e-4, "{pooling:?}: worst relative error {worst}");
        }
    }

    #[test]
    fn single_example_trains() {
        let model = train(&[example(1, 4, 8)], &tiny()).unwrap();
        assert_eq!(model.history.len(), 5);
        assert!(model.val_mse.is_finite());
    }

    #[test]
    fn dimension_mismatch_names_example() {
        let mut data = vec![example(1, 3, 8), example(2, 3, 8), example(3, 3, 8)];
        data[2].features[1].pop();
        match train(&data, &tiny()).unwrap_err() {
            Error::DimensionMismatch { index, expected, found } => {
                assert_eq!((index, expected, found), (2, 8, 7));
            }
            e => panic!("unexpected error {e}"),
        }
    }

    #[test]
    fn output_is_nonnegative_for_negative_preactivation() {
        let data: Vec<_> = (0..4).map(|s| example(s, 3, 8)).collect();
        let mut model = train(&data, &tiny()).unwrap();
        model.set_output_bias(-2.3);
        let pred = predict_se(&model, &data[0].features).unwrap();
        assert!(pred >= 0.0);
    }

    #[test]
    fn permutation_invariance_is_exact_with_mean_pooling() {
        let data: Vec<_> = (0..6).map(|s| example(s, 5, 8)).collect();
        let model = train(&data, &tiny()).unwrap();
        let mut f = data[0].features.clone();
        let a = predict_se(&model, &f).unwrap();
        f.reverse();
        f.swap(0, 2);
        assert_eq!(a, predict_se(&model, &f).unwrap());
    }

    #[test]
    fn model_file_round_trips() {
        let data: Vec<_> = (0..6).map(|s| example(s, 5, 8)).collect();
        let model = train(&data, &tiny()).unwrap();
        let back = RegressorModel::from_bytes(&model.to_bytes().unwrap()).unwrap();
        assert_eq!(back.param_count(), model.param_count());
        assert_eq!(
            predict_se(&model, &data[1].features).unwrap(),
            predict_se(&back, &data[1].features).unwrap()
        );
        let mut corrupt = model.to_bytes().unwrap();
        corrupt.pop();
        assert!(RegressorModel::from_bytes(&corrupt).is_err());
    }

    #[test]
    fn training_is_deterministic() {
        let data: Vec<_> = (0..8).map(|s| example(s, 4, 8)).collect();
        let a = train(&data, &tiny()).unwrap();
        let b = train(&data, &tiny()).unwrap();
        assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
    }
}
