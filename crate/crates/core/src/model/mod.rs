//! A small decoder-only transformer with an optional parallel adapter branch.
//!
//! Each layer computes
//!
//! ```text
//! u = SelfAtt(h) + h
//! h' = FFN(u) + u                 (base)
//! h' = FFN(u) + u + Adapter(u)    (with adapter)
//! ```
//!
//! with a causal mask and no normalization layers. Parameters are stored as
//! `f32` in a [`ParameterSet`]; all computation happens in `f64`.

mod forward;
mod gradcheck;
mod train;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::{ParamError, ParameterSet, ADAPTER_PREFIX};
use crate::tokenizer::{Tokenizer, EOS_ID};

pub use forward::Gradients;
pub use gradcheck::{finite_difference_check, gradient_check, relative_error, GradientCheck};
pub use train::{train_de, train_pe, EpochLog, TrainConfig, Trained};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("parameter shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("adapter shape mismatch: {0}")]
    AdapterShapeMismatch(String),
    #[error("sequence of {len} tokens exceeds the {max}-token limit")]
    SequenceTooLong { len: usize, max: usize },
    #[error("token id {id} outside vocabulary of {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("segment boundary {boundary} beyond sequence length {len}")]
    BadBoundary { boundary: usize, len: usize },
    #[error("empty target segment")]
    EmptyTarget,
    #[error("target segment needs at least one preceding token")]
    MissingPrefix,
    #[error("empty training task")]
    EmptyTask,
    #[error("invalid training config: {0}")]
    InvalidTrainConfig(String),
    #[error(transparent)]
    Params(#[from] ParamError),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

/// Architecture hyper-parameters. The feed-forward sub-layer's hidden width
/// equals `hidden_dim`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub adapter_dim: usize,
    pub num_heads: usize,
    pub vocab_size: usize,
    pub max_tokens: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_layers: 2,
            hidden_dim: 64,
            adapter_dim: 8,
            num_heads: 4,
            vocab_size: 512,
            max_tokens: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if self.num_layers == 0 || self.hidden_dim == 0 || self.num_heads == 0 {
            return fail("layers, hidden_dim and num_heads must be positive");
        }
        if !self.hidden_dim.is_multiple_of(self.num_heads) {
            return fail("hidden_dim must be divisible by num_heads");
        }
        if self.adapter_dim == 0 || self.adapter_dim >= self.hidden_dim {
            return fail("adapter_dim must satisfy 1 <= e < hidden_dim");
        }
        if self.max_tokens < 2 {
            return fail("max_tokens must be at least 2");
        }
        if self.vocab_size < 3 {
            return fail("vocab_size must be at least 3");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    pub fn tokenizer(&self) -> Tokenizer {
        Tokenizer::new(self.vocab_size)
    }

    /// Names and shapes of the base parameters, in storage order.
    pub fn base_schema(&self) -> Vec<(String, Vec<usize>)> {
        let (d, v, t) = (self.hidden_dim, self.vocab_size, self.max_tokens);
        let mut s = vec![
            ("embed.token".to_string(), vec![v, d]),
            ("embed.position".to_string(), vec![t, d]),
        ];
        for l in 0..self.num_layers {
            for proj in ["q", "k", "v", "o"] {
                s.push((format!("layers.{l}.attn.{proj}.weight"), vec![d, d]));
                s.push((format!("layers.{l}.attn.{proj}.bias"), vec![d]));
            }
            s.push((format!("layers.{l}.ffn.fc1.weight"), vec![d, d]));
            s.push((format!("layers.{l}.ffn.fc1.bias"), vec![d]));
            s.push((format!("layers.{l}.ffn.fc2.weight"), vec![d, d]));
            s.push((format!("layers.{l}.ffn.fc2.bias"), vec![d]));
        }
        s.push(("head.weight".to_string(), vec![d, v]));
        s.push(("head.bias".to_string(), vec![v]));
        s
    }

    /// Names and shapes of the adapter parameters, in storage order.
    pub fn adapter_schema(&self) -> Vec<(String, Vec<usize>)> {
        let (d, e) = (self.hidden_dim, self.adapter_dim);
        let mut s = Vec::with_capacity(4 * self.num_layers);
        for l in 0..self.num_layers {
            s.push((format!("{ADAPTER_PREFIX}layers.{l}.down.weight"), vec![d, e]));
            s.push((format!("{ADAPTER_PREFIX}layers.{l}.down.bias"), vec![e]));
            s.push((format!("{ADAPTER_PREFIX}layers.{l}.up.weight"), vec![e, d]));
            s.push((format!("{ADAPTER_PREFIX}layers.{l}.up.bias"), vec![d]));
        }
        s
    }
}

// Slot offsets inside a layer's block of base tensors.
pub(crate) const LAYER_SLOTS: usize = 12;
pub(crate) const WQ: usize = 0;
pub(crate) const BQ: usize = 1;
pub(crate) const WK: usize = 2;
pub(crate) const BK: usize = 3;
pub(crate) const WV: usize = 4;
pub(crate) const BV: usize = 5;
pub(crate) const WO: usize = 6;
pub(crate) const BO: usize = 7;
pub(crate) const W1: usize = 8;
pub(crate) const B1: usize = 9;
pub(crate) const W2: usize = 10;
pub(crate) const B2: usize = 11;

pub(crate) const ADAPTER_SLOTS: usize = 4;
pub(crate) const DOWN_W: usize = 0;
pub(crate) const DOWN_B: usize = 1;
pub(crate) const UP_W: usize = 2;
pub(crate) const UP_B: usize = 3;

/// Working copy of a parameter set in `f64`, laid out in schema order.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    pub(crate) tensors: Vec<Vec<f64>>,
}

impl Weights {
    fn from_params(params: &ParameterSet, schema: &[(String, Vec<usize>)]) -> std::result::Result<Self, String> {
        if params.len() != schema.len() {
            return Err(format!(
                "expected {} tensors, found {}",
                schema.len(),
                params.len()
            ));
        }
        let mut tensors = Vec::with_capacity(schema.len());
        for ((name, shape), (pname, t)) in schema.iter().zip(params.iter()) {
            if name != pname || shape.as_slice() != t.shape() {
                return Err(format!(
                    "expected `{name}` {shape:?}, found `{pname}` {:?}",
                    t.shape()
                ));
            }
            tensors.push(t.data().iter().map(|&v| v as f64).collect());
        }
        Ok(Self {
            names: schema.iter().map(|(n, _)| n.clone()).collect(),
            shapes: schema.iter().map(|(_, s)| s.clone()).collect(),
            tensors,
        })
    }

    pub(crate) fn zeros_like(&self) -> Self {
        Self {
            names: self.names.clone(),
            shapes: self.shapes.clone(),
            tensors: self.tensors.iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensor(&self, i: usize) -> &[f64] {
        &self.tensors[i]
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.tensors[i]
    }

    pub fn num_tensors(&self) -> usize {
        self.tensors.len()
    }

    /// Rounds back to `f32` storage.
    pub fn to_params(&self) -> Result<ParameterSet> {
        let mut p = ParameterSet::new();
        for ((name, shape), data) in self.names.iter().zip(&self.shapes).zip(&self.tensors) {
            p.insert(name.clone(), shape.clone(), data.iter().map(|&v| v as f32).collect())?;
        }
        Ok(p)
    }

    fn axpy(&mut self, alpha: f64, other: &Weights) {
        for (t, o) in self.tensors.iter_mut().zip(&other.tensors) {
            for (a, &b) in t.iter_mut().zip(o) {
                *a += alpha * b;
            }
        }
    }
}

/// Token ids split into an input segment `[0, boundary)` and a target segment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    ids: Vec<u32>,
    boundary: usize,
}

impl TokenSequence {
    pub fn new(ids: Vec<u32>, boundary: usize) -> Result<Self> {
        if boundary > ids.len() {
            return Err(ModelError::BadBoundary {
                boundary,
                len: ids.len(),
            });
        }
        Ok(Self { ids, boundary })
    }

    /// Whole sequence treated as input.
    pub fn prompt(ids: Vec<u32>) -> Self {
        let boundary = ids.len();
        Self { ids, boundary }
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn boundary(&self) -> usize {
        self.boundary
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// A base model with an optional adapter, ready for evaluation.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    pub(crate) base: Weights,
    pub(crate) adapter: Option<Weights>,
}

impl Model {
    pub fn new(config: ModelConfig, base: &ParameterSet, adapter: Option<&ParameterSet>) -> Result<Self> {
        config.validate()?;
        let base = Weights::from_params(base, &config.base_schema()).map_err(ModelError::ShapeMismatch)?;
        let adapter = adapter
            .map(|a| Weights::from_params(a, &config.adapter_schema()).map_err(ModelError::AdapterShapeMismatch))
            .transpose()?;
        Ok(Self { config, base, adapter })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn has_adapter(&self) -> bool {
        self.adapter.is_some()
    }

    pub fn base_weights(&self) -> &Weights {
        &self.base
    }

    pub fn adapter_weights(&self) -> Option<&Weights> {
        self.adapter.as_ref()
    }

    pub fn base_params(&self) -> Result<ParameterSet> {
        self.base.to_params()
    }

    pub fn adapter_params(&self) -> Result<Option<ParameterSet>> {
        self.adapter.as_ref().map(Weights::to_params).transpose()
    }

    fn check_tokens(&self, ids: &[u32]) -> Result<()> {
        if ids.len() > self.config.max_tokens {
            return Err(ModelError::SequenceTooLong {
                len: ids.len(),
                max: self.config.max_tokens,
            });
        }
        if let Some(&id) = ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(ModelError::TokenOutOfRange {
                id,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Logits for every position, `len x vocab` row-major.
    pub fn logits(&self, ids: &[u32]) -> Result<Vec<f64>> {
        self.check_tokens(ids)?;
        if ids.is_empty() {
            return Ok(Vec::new());
        }
        Ok(self.run(ids, 0..ids.len(), false).logits)
    }

    /// Residual stream after each layer, each `len x hidden` row-major.
    pub fn hidden_states(&self, ids: &[u32]) -> Result<Vec<Vec<f64>>> {
        self.check_tokens(ids)?;
        if ids.is_empty() {
            return Ok(vec![Vec::new(); self.config.num_layers]);
        }
        let fwd = self.run(ids, 0..0, true);
        Ok(fwd.cache.expect("cache requested").layer_outputs())
    }

    /// Sum of target-segment token log-probabilities.
    pub fn log_likelihood(&self, tokens: &TokenSequence) -> Result<f64> {
        Ok(-self.nll(tokens)?)
    }

    pub(crate) fn check_scored(&self, tokens: &TokenSequence) -> Result<()> {
        self.check_tokens(tokens.ids())?;
        if tokens.boundary() >= tokens.len() {
            return Err(ModelError::EmptyTarget);
        }
        if tokens.boundary() == 0 {
            return Err(ModelError::MissingPrefix);
        }
        Ok(())
    }

    pub(crate) fn nll(&self, tokens: &TokenSequence) -> Result<f64> {
        self.check_scored(tokens)?;
        let ids = tokens.ids();
        let rows = tokens.boundary() - 1..ids.len() - 1;
        let fwd = self.run(ids, rows.clone(), false);
        let v = self.config.vocab_size;
        Ok(rows
            .enumerate()
            .map(|(r, pos)| -log_softmax_at(&fwd.logits[r * v..(r + 1) * v], ids[pos + 1] as usize))
            .sum())
    }

    /// Appends argmax tokens until end-of-sequence, `max_len` tokens, or the
    /// context limit. The end-of-sequence token is not returned.
    pub fn greedy_decode(&self, prompt: &[u32], max_len: usize) -> Result<Vec<u32>> {
        if prompt.len() >= self.config.max_tokens {
            return Err(ModelError::SequenceTooLong {
                len: prompt.len(),
                max: self.config.max_tokens - 1,
            });
        }
        self.check_tokens(prompt)?;
        let mut ids = prompt.to_vec();
        let mut out = Vec::new();
        while out.len() < max_len && ids.len() < self.config.max_tokens && !ids.is_empty() {
            let last = ids.len() - 1;
            let fwd = self.run(&ids, last..ids.len(), false);
            let next = argmax(&fwd.logits) as u32;
            if next == EOS_ID {
                break;
            }
            ids.push(next);
            out.push(next);
        }
        Ok(out)
    }
}

/// Random base parameters.
pub fn init_base(config: &ModelConfig, seed: u64) -> Result<ParameterSet> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParameterSet::new();
    for (name, shape) in config.base_schema() {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = if name.ends_with(".bias") {
            vec![0.0; n]
        } else if name.starts_with("embed.") {
            (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect()
        } else {
            let bound = 1.0 / (shape[0] as f32).sqrt();
            (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
        };
        p.insert(name, shape, data)?;
    }
    Ok(p)
}

/// Fresh adapter: down-projection uniform in `±1/sqrt(d)`, everything else zero.
pub fn init_adapter(config: &ModelConfig, seed: u64) -> Result<ParameterSet> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xada9_7e12_0000_0000);
    let bound = 1.0 / (config.hidden_dim as f32).sqrt();
    let mut p = ParameterSet::new();
    for (name, shape) in config.adapter_schema() {
        let n: usize = shape.iter().product();
        let data = if name.ends_with("down.weight") {
            (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
        } else {
            vec![0.0; n]
        };
        p.insert(name, shape, data)?;
    }
    Ok(p)
}

/// Logits of the base model alone.
pub fn forward_base(config: &ModelConfig, params: &ParameterSet, tokens: &TokenSequence) -> Result<Vec<f64>> {
    Model::new(*config, params, None)?.logits(tokens.ids())
}

/// Logits with the adapter branch added in every layer.
pub fn forward_with_adapter(
    config: &ModelConfig,
    params: &ParameterSet,
    adapter: &ParameterSet,
    tokens: &TokenSequence,
) -> Result<Vec<f64>> {
    Model::new(*config, params, Some(adapter))?.logits(tokens.ids())
}

pub fn log_likelihood(
    config: &ModelConfig,
    params: &ParameterSet,
    adapter: Option<&ParameterSet>,
    tokens: &TokenSequence,
) -> Result<f64> {
    Model::new(*config, params, adapter)?.log_likelihood(tokens)
}

pub fn greedy_decode(
    config: &ModelConfig,
    params: &ParameterSet,
    adapter: Option<&ParameterSet>,
    prompt: &[u32],
    max_len: usize,
) -> Result<Vec<u32>> {
    Model::new(*config, params, adapter)?.greedy_decode(prompt, max_len)
}

pub(crate) fn log_softmax_at(row: &[f64], idx: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|&z| (z - max).exp()).sum();
    row[idx] - max - sum.ln()
}

/// Index of the largest value; ties go to the lowest index.
pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn small_config() -> ModelConfig {
        ModelConfig {
            num_layers: 2,
            hidden_dim: 8,
            adapter_dim: 2,
            num_heads: 2,
            vocab_size: 12,
            max_tokens: 8,
        }
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let mut c = small_config();
        c.num_heads = 3;
        assert!(c.validate().is_err());
        let mut c = small_config();
        c.adapter_dim = 8;
        assert!(c.validate().is_err());
        let mut c = small_config();
        c.max_tokens = 1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn single_token_gives_one_finite_row() {
        let cfg = small_config();
        let p = init_base(&cfg, 1).unwrap();
        let logits = forward_base(&cfg, &p, &TokenSequence::prompt(vec![3])).unwrap();
        assert_eq!(logits.len(), cfg.vocab_size);
        assert!(logits.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn shape_errors() {
        let cfg = small_config();
        let p = init_base(&cfg, 1).unwrap();
        let mut other = cfg;
        other.hidden_dim = 4;
        other.adapter_dim = 1;
        assert!(matches!(Model::new(other, &p, None), Err(ModelError::ShapeMismatch(_))));
        let bad_adapter = init_adapter(&other, 0).unwrap();
        assert!(matches!(
            Model::new(cfg, &p, Some(&bad_adapter)),
            Err(ModelError::AdapterShapeMismatch(_))
        ));
        let m = Model::new(cfg, &p, None).unwrap();
        assert!(matches!(m.logits(&[0; 9]), Err(ModelError::SequenceTooLong { .. })));
        assert!(matches!(m.logits(&[12]), Err(ModelError::TokenOutOfRange { .. })));
    }

    #[test]
    fn causal_mask_hides_the_future() {
        let cfg = small_config();
        let p = init_base(&cfg, 7).unwrap();
        let a = init_adapter(&cfg, 7).unwrap();
        let m = Model::new(cfg, &p, Some(&a)).unwrap();
        let x = m.logits(&[2, 5, 7, 3, 9]).unwrap();
        let y = m.logits(&[2, 5, 7, 11, 4]).unwrap();
        let v = cfg.vocab_size;
        assert_eq!(x[..3 * v], y[..3 * v]);
        assert_ne!(x[3 * v..], y[3 * v..]);
    }

    #[test]
    fn empty_target_rejected() {
        let cfg = small_config();
        let m = Model::new(cfg, &init_base(&cfg, 0).unwrap(), None).unwrap();
        let seq = TokenSequence::new(vec![0, 3], 2).unwrap();
        assert!(matches!(m.log_likelihood(&seq), Err(ModelError::EmptyTarget)));
        let seq = TokenSequence::new(vec![0, 3], 0).unwrap();
        assert!(matches!(m.log_likelihood(&seq), Err(ModelError::MissingPrefix)));
        assert!(TokenSequence::new(vec![0], 2).is_err());
    }

    /// Base parameters with every weight zero except the head bias.
    fn constant_head(cfg: &ModelConfig, bias: impl Fn(usize) -> f32) -> ParameterSet {
        let mut p = ParameterSet::new();
        for (name, shape) in cfg.base_schema() {
            let n: usize = shape.iter().product();
            let data = if name == "head.bias" {
                (0..n).map(&bias).collect()
            } else {
                vec![0.0; n]
            };
            p.insert(name, shape, data).unwrap();
        }
        p
    }

    #[test]
    fn certain_target_has_zero_log_likelihood() {
        let cfg = small_config();
        let p = constant_head(&cfg, |i| if i == 5 { 1000.0 } else { 0.0 });
        let seq = TokenSequence::new(vec![0, 3, 5], 2).unwrap();
        assert_eq!(log_likelihood(&cfg, &p, None, &seq).unwrap(), 0.0);
    }

    #[test]
    fn uniform_logits_give_log_quarter() {
        let mut cfg = small_config();
        cfg.vocab_size = 4;
        let p = constant_head(&cfg, |_| 0.0);
        let seq = TokenSequence::new(vec![0, 3], 1).unwrap();
        let ll = log_likelihood(&cfg, &p, None, &seq).unwrap();
        assert!((ll - (0.25f64).ln()).abs() < 1e-12);
        assert!((ll + 1.3863).abs() < 1e-4);
    }

    #[test]
    fn decoding_follows_forced_argmax() {
        let cfg = small_config();
        let p = constant_head(&cfg, |i| if i == 6 { 3.0 } else { 0.0 });
        assert_eq!(greedy_decode(&cfg, &p, None, &[0, 2], 0).unwrap(), Vec::<u32>::new());
        assert_eq!(greedy_decode(&cfg, &p, None, &[0, 2], 4).unwrap(), vec![6; 4]);
        // Context limit stops decoding.
        assert_eq!(greedy_decode(&cfg, &p, None, &[0, 2], 100).unwrap().len(), 6);
        assert!(greedy_decode(&cfg, &p, None, &[0; 8], 1).is_err());
        let eos = constant_head(&cfg, |i| if i == 0 { 3.0 } else { 0.0 });
        assert!(greedy_decode(&cfg, &eos, None, &[0, 2], 4).unwrap().is_empty());
    }

    #[test]
    fn adapter_init_is_identity() {
        let cfg = small_config();
        let p = init_base(&cfg, 3).unwrap();
        let a = init_adapter(&cfg, 3).unwrap();
        assert!(a.is_adapter());
        let seq = TokenSequence::prompt(vec![0, 4, 9, 2]);
        let base = forward_base(&cfg, &p, &seq).unwrap();
        let with = forward_with_adapter(&cfg, &p, &a, &seq).unwrap();
        assert!(base.iter().zip(&with).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[2.0]), 0);
    }
}
