//! RoBERTa-style bidirectional encoder.
//!
//! Post-layer-norm residual blocks with learned absolute positions, a tied
//! masked-language-modeling head and a per-token NER projection. All forward
//! code is generic over [`Real`] so it can be replayed in `f64` by
//! finite-difference checks; training instantiates it with `f32`.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::adapters::{self, AdapterStack};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::rng::RngStream;
use crate::tape::{Graph, Var};
use crate::tensor::{Real, Tensor};

pub const INIT_STD: f32 = 0.02;
pub const DEFAULT_LAYER_NORM_EPS: f32 = 1e-5;

/// Ids of the special tokens shared by tokenizer and encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpecialTokens {
    pub cls: u32,
    pub pad: u32,
    pub sep: u32,
    pub unk: u32,
    pub mask: u32,
}

impl SpecialTokens {
    pub fn ids(&self) -> [u32; 5] {
        [self.cls, self.pad, self.sep, self.unk, self.mask]
    }

    pub fn contains(&self, id: u32) -> bool {
        self.ids().contains(&id)
    }
}

impl Default for SpecialTokens {
    /// `<s>`, `<pad>`, `</s>`, `<unk>`, `<mask>` at ids 0..5.
    fn default() -> Self {
        Self {
            cls: 0,
            pad: 1,
            sep: 2,
            unk: 3,
            mask: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_positions: usize,
    pub dropout_rate: f32,
    pub layer_norm_eps: f32,
    pub specials: SpecialTokens,
    /// Digest of the tokenizer vocabulary the embeddings index into; 0 if unknown.
    pub vocab_hash: u64,
}

impl Default for EncoderConfig {
    /// Desk-scale default.
    fn default() -> Self {
        Self {
            vocab_size: 8192,
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            d_ff: 512,
            max_positions: 128,
            dropout_rate: 0.1,
            layer_norm_eps: DEFAULT_LAYER_NORM_EPS,
            specials: SpecialTokens::default(),
            vocab_hash: 0,
        }
    }
}

impl EncoderConfig {
    /// Shape of the published base model, used for parameter accounting.
    pub fn roberta_base() -> Self {
        Self {
            vocab_size: 50265,
            d_model: 768,
            n_layers: 12,
            n_heads: 12,
            d_ff: 3072,
            max_positions: 514,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.vocab_size == 0
            || self.d_model == 0
            || self.n_layers == 0
            || self.n_heads == 0
            || self.d_ff == 0
            || self.max_positions == 0
        {
            return bad("all sizes must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        if self.layer_norm_eps.is_nan() || self.layer_norm_eps <= 0.0 {
            return bad("layer_norm_eps must be positive".into());
        }
        let ids = self.specials.ids();
        for (i, &a) in ids.iter().enumerate() {
            if a as usize >= self.vocab_size {
                return bad(format!("special id {a} >= vocab_size {}", self.vocab_size));
            }
            if ids[i + 1..].contains(&a) {
                return bad(format!("special id {a} used twice"));
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Parameters contributed by one encoder layer.
    pub fn per_layer_params(&self) -> usize {
        let (d, f) = (self.d_model, self.d_ff);
        4 * (d * d + d) + 2 * d + (d * f + f) + (f * d + d) + 2 * d
    }

    /// Parameters used only by the MLM head (the tied projection is not counted twice).
    pub fn mlm_head_params(&self) -> usize {
        let d = self.d_model;
        d * d + d + 2 * d + self.vocab_size
    }
}

/// Closed-form count of encoder plus MLM-head parameters.
pub fn parameter_count(config: &EncoderConfig) -> usize {
    let d = config.d_model;
    let embeddings = config.vocab_size * d + config.max_positions * d + 2 * d;
    embeddings + config.n_layers * config.per_layer_params() + config.mlm_head_params()
}

pub mod names {
    //! Canonical parameter names.
    use alloc::format;
    use alloc::string::String;

    pub const WORD_EMBEDDINGS: &str = "embeddings.word.weight";
    pub const POSITION_EMBEDDINGS: &str = "embeddings.position.weight";
    pub const EMBEDDINGS_LN: &str = "embeddings.ln";
    pub const MLM_DENSE: &str = "mlm.dense";
    pub const MLM_LN: &str = "mlm.ln";
    pub const MLM_OUTPUT_BIAS: &str = "mlm.output_bias";
    pub const MLM_PREFIX: &str = "mlm.";
    pub const NER_WEIGHT: &str = "ner.weight";
    pub const NER_BIAS: &str = "ner.bias";

    pub fn layer(i: usize, part: &str) -> String {
        format!("layer.{i}.{part}")
    }

    /// Whether AdamW weight decay is skipped for this parameter.
    pub fn is_no_decay(name: &str) -> bool {
        name.ends_with("bias") || name.ends_with(".gamma") || name.ends_with(".beta")
    }
}

/// Named parameter set of the encoder and its MLM head.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderWeights {
    pub config: EncoderConfig,
    pub params: ParamStore,
}

fn linear(
    store: &mut ParamStore,
    rng: &mut RngStream,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
) -> Result<()> {
    let w = Tensor::from_fn(&[fan_in, fan_out], |_| rng.truncated_normal(INIT_STD));
    store.insert(format!("{prefix}.weight"), w)?;
    store.insert(format!("{prefix}.bias"), Tensor::zeros(&[fan_out]))
}

fn layer_norm_params(store: &mut ParamStore, prefix: &str, d: usize) -> Result<()> {
    store.insert(format!("{prefix}.gamma"), Tensor::ones(&[d]))?;
    store.insert(format!("{prefix}.beta"), Tensor::zeros(&[d]))
}

/// Fresh encoder weights: truncated normal (std 0.02) matrices and
/// embeddings, zero biases, unit layer-norm gains.
pub fn init_encoder(config: &EncoderConfig, seed: u64) -> Result<EncoderWeights> {
    config.validate()?;
    let mut rng = RngStream::named(seed, crate::rng::StreamId::Init);
    let d = config.d_model;
    let mut p = ParamStore::new();
    let normal = |shape: &[usize], rng: &mut RngStream| {
        Tensor::from_fn(shape, |_| rng.truncated_normal(INIT_STD))
    };
    p.insert(names::WORD_EMBEDDINGS, normal(&[config.vocab_size, d], &mut rng))?;
    p.insert(
        names::POSITION_EMBEDDINGS,
        normal(&[config.max_positions, d], &mut rng),
    )?;
    layer_norm_params(&mut p, names::EMBEDDINGS_LN, d)?;
    for i in 0..config.n_layers {
        for part in ["query", "key", "value", "output"] {
            linear(&mut p, &mut rng, &names::layer(i, &format!("attn.{part}")), d, d)?;
        }
        layer_norm_params(&mut p, &names::layer(i, "attn.ln"), d)?;
        linear(&mut p, &mut rng, &names::layer(i, "ffn.up"), d, config.d_ff)?;
        linear(&mut p, &mut rng, &names::layer(i, "ffn.down"), config.d_ff, d)?;
        layer_norm_params(&mut p, &names::layer(i, "ffn.ln"), d)?;
    }
    linear(&mut p, &mut rng, names::MLM_DENSE, d, d)?;
    layer_norm_params(&mut p, names::MLM_LN, d)?;
    p.insert(names::MLM_OUTPUT_BIAS, Tensor::zeros(&[config.vocab_size]))?;
    Ok(EncoderWeights { config: config.clone(), params: p })
}

/// Parameters of a store recorded as graph leaves, addressed by name.
#[derive(Debug, Clone, Default)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    /// Records every tensor of `store` as a leaf. `trainable` decides which
    /// leaves take part in differentiation.
    pub fn bind<T: Real>(
        graph: &mut Graph<T>,
        store: &ParamStore,
        trainable: impl Fn(&str) -> bool,
    ) -> Self {
        let vars = store
            .iter()
            .map(|(name, t)| (name.to_string(), graph.leaf(t.cast(), trainable(name))))
            .collect();
        Self { vars }
    }

    /// Wraps already-recorded leaves.
    pub fn from_vars<'a>(vars: impl IntoIterator<Item = (&'a str, Var)>) -> Self {
        Self {
            vars: vars.into_iter().map(|(n, v)| (n.to_string(), v)).collect(),
        }
    }

    pub fn constants<T: Real>(graph: &mut Graph<T>, store: &ParamStore) -> Self {
        Self::bind(graph, store, |_| false)
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("parameter {name} is not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(n, &v)| (n.as_str(), v))
    }
}

/// A padded batch of token ids, row-major `[batch × seq]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    pub ids: Vec<u32>,
    /// True at padding positions.
    pub pad: Vec<bool>,
    pub batch: usize,
    pub seq: usize,
}

impl TokenBatch {
    pub fn new(ids: Vec<u32>, pad: Vec<bool>, batch: usize, seq: usize) -> Result<Self> {
        if ids.len() != batch * seq || pad.len() != batch * seq || batch == 0 || seq == 0 {
            return Err(Error::Shape {
                op: "token_batch",
                left: vec![batch, seq],
                right: vec![ids.len(), pad.len()],
            });
        }
        Ok(Self { ids, pad, batch, seq })
    }

    /// Pads `rows` to the longest one with `pad_id`.
    pub fn from_rows(rows: &[Vec<u32>], pad_id: u32) -> Result<Self> {
        let seq = rows.iter().map(Vec::len).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(rows.len() * seq);
        let mut pad = Vec::with_capacity(rows.len() * seq);
        for row in rows {
            ids.extend_from_slice(row);
            pad.extend(core::iter::repeat_n(false, row.len()));
            ids.extend(core::iter::repeat_n(pad_id, seq - row.len()));
            pad.extend(core::iter::repeat_n(true, seq - row.len()));
        }
        Self::new(ids, pad, rows.len(), seq)
    }

    pub fn tokens(&self) -> usize {
        self.batch * self.seq
    }
}

/// Dropout source for a training-mode forward pass.
pub struct Dropout<'a> {
    pub rate: f32,
    pub rng: &'a mut RngStream,
}

fn dropout<T: Real>(g: &mut Graph<T>, x: Var, drop: &mut Option<Dropout<'_>>) -> Result<Var> {
    let Some(d) = drop.as_mut() else { return Ok(x) };
    if d.rate <= 0.0 {
        return Ok(x);
    }
    let keep = T::from_f64(1.0 / (1.0 - d.rate as f64));
    let n = g.value(x).numel();
    let rate = d.rate as f64;
    let factors = (0..n)
        .map(|_| if d.rng.uniform() < rate { T::ZERO } else { keep })
        .collect();
    g.mul_const(x, factors)
}

fn dense<T: Real>(g: &mut Graph<T>, p: &BoundParams, prefix: &str, x: Var) -> Result<Var> {
    let w = p.get(&format!("{prefix}.weight"))?;
    let b = p.get(&format!("{prefix}.bias"))?;
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

fn norm<T: Real>(g: &mut Graph<T>, p: &BoundParams, prefix: &str, x: Var, eps: f32) -> Result<Var> {
    let gamma = p.get(&format!("{prefix}.gamma"))?;
    let beta = p.get(&format!("{prefix}.beta"))?;
    g.layer_norm(x, gamma, beta, T::from_f32(eps))
}

/// Adapter parameters bound into a graph, in stack order.
#[derive(Debug, Clone, Default)]
pub struct BoundStack {
    pub members: Vec<(adapters::Nonlinearity, BoundParams)>,
}

impl BoundStack {
    pub fn bind<T: Real>(
        graph: &mut Graph<T>,
        stack: &AdapterStack,
        trainable: impl Fn(usize, &str) -> bool,
    ) -> Self {
        let members = stack
            .members()
            .iter()
            .enumerate()
            .map(|(i, m)| {
                let bound = BoundParams::bind(graph, &m.weights.params, |name| trainable(i, name));
                (m.weights.config.nonlinearity, bound)
            })
            .collect();
        Self { members }
    }
}

/// Records the encoder forward pass and returns hidden states `[batch·seq × d_model]`.
///
/// Attention logits at padded keys are overwritten with a large negative
/// value before the softmax, so outputs at real positions do not depend on
/// what the padded positions hold. Adapters in `stack` run after each
/// layer's feed-forward residual and layer norm.
pub fn encode_graph<T: Real>(
    g: &mut Graph<T>,
    config: &EncoderConfig,
    p: &BoundParams,
    stack: Option<&BoundStack>,
    batch: &TokenBatch,
    mut drop: Option<Dropout<'_>>,
) -> Result<Var> {
    let (b, t) = (batch.batch, batch.seq);
    if t > config.max_positions {
        return Err(Error::Length {
            len: t,
            max: config.max_positions,
        });
    }
    let ids: Vec<usize> = batch.ids.iter().map(|&i| i as usize).collect();
    let positions: Vec<usize> = (0..b).flat_map(|_| 0..t).collect();
    let word = g.gather_rows(p.get(names::WORD_EMBEDDINGS)?, &ids)?;
    let pos = g.gather_rows(p.get(names::POSITION_EMBEDDINGS)?, &positions)?;
    let emb = g.add(word, pos)?;
    let emb = norm(g, p, names::EMBEDDINGS_LN, emb, config.layer_norm_eps)?;
    let mut x = dropout(g, emb, &mut drop)?;

    let h = config.n_heads;
    let scale = T::from_f64(1.0 / libm::sqrt(config.head_dim() as f64));
    for layer in 0..config.n_layers {
        let part = |s: &str| names::layer(layer, s);
        let q = dense(g, p, &part("attn.query"), x)?;
        let k = dense(g, p, &part("attn.key"), x)?;
        let v = dense(g, p, &part("attn.value"), x)?;
        let (q, k, v) = (
            g.split_heads(q, b, t, h)?,
            g.split_heads(k, b, t, h)?,
            g.split_heads(v, b, t, h)?,
        );
        let scores = g.bmm_t(q, k)?;
        let scores = g.scale(scores, scale);
        let scores = g.mask_keys(scores, &batch.pad, h)?;
        let probs = g.softmax(scores);
        let probs = dropout(g, probs, &mut drop)?;
        let ctx = g.bmm(probs, v)?;
        let ctx = g.merge_heads(ctx, b, t, h)?;
        let attn = dense(g, p, &part("attn.output"), ctx)?;
        let attn = dropout(g, attn, &mut drop)?;
        let res = g.add(x, attn)?;
        x = norm(g, p, &part("attn.ln"), res, config.layer_norm_eps)?;

        let up = dense(g, p, &part("ffn.up"), x)?;
        let up = g.gelu(up);
        let down = dense(g, p, &part("ffn.down"), up)?;
        let down = dropout(g, down, &mut drop)?;
        let res = g.add(x, down)?;
        x = norm(g, p, &part("ffn.ln"), res, config.layer_norm_eps)?;

        if let Some(stack) = stack {
            x = adapters::apply_stack_graph(g, stack, layer, x)?;
        }
    }
    Ok(x)
}

/// MLM logits `[rows × vocab]` from hidden rows `[rows × d_model]`:
/// dense, GELU, layer norm, then the tied word-embedding projection plus `output_bias`.
pub fn mlm_logits_graph<T: Real>(
    g: &mut Graph<T>,
    config: &EncoderConfig,
    p: &BoundParams,
    hidden: Var,
    output_bias: Var,
) -> Result<Var> {
    let x = dense(g, p, names::MLM_DENSE, hidden)?;
    let x = g.gelu(x);
    let x = norm(g, p, names::MLM_LN, x, config.layer_norm_eps)?;
    let logits = g.matmul_t(x, p.get(names::WORD_EMBEDDINGS)?)?;
    g.add_row(logits, output_bias)
}

/// Per-token NER logits `[rows × n_labels]`.
pub fn ner_logits_graph<T: Real>(g: &mut Graph<T>, head: &BoundParams, hidden: Var) -> Result<Var> {
    let y = g.matmul(hidden, head.get(names::NER_WEIGHT)?)?;
    g.add_row(y, head.get(names::NER_BIAS)?)
}

/// Fresh NER head: truncated-normal projection, zero bias.
pub fn init_ner_head(d_model: usize, n_labels: usize, rng: &mut RngStream) -> ParamStore {
    let mut p = ParamStore::new();
    let w = Tensor::from_fn(&[d_model, n_labels], |_| rng.truncated_normal(INIT_STD));
    p.insert(names::NER_WEIGHT, w).expect("fresh store");
    p.insert(names::NER_BIAS, Tensor::zeros(&[n_labels])).expect("fresh store");
    p
}

fn check_stack(config: &EncoderConfig, stack: Option<&AdapterStack>) -> Result<()> {
    if let Some(stack) = stack {
        stack.check_compatible(config)?;
    }
    Ok(())
}

/// Evaluates the encoder outside of training.
///
/// Returns hidden states `[batch × seq × d_model]`. Dropout is applied only
/// when `train_mode` is set and `rng` is given.
pub fn encode(
    weights: &EncoderWeights,
    batch: &TokenBatch,
    train_mode: bool,
    rng: Option<&mut RngStream>,
    stack: Option<&AdapterStack>,
) -> Result<Tensor> {
    let config = &weights.config;
    check_stack(config, stack)?;
    if let Some(&bad) = batch.ids.iter().find(|&&i| i as usize >= config.vocab_size) {
        return Err(Error::Index {
            context: "token id",
            index: bad as usize,
            bound: config.vocab_size,
        });
    }
    let mut g: Graph<f32> = Graph::new();
    let p = BoundParams::constants(&mut g, &weights.params);
    let bound_stack = stack.map(|s| BoundStack::bind(&mut g, s, |_, _| false));
    let drop = match (train_mode, rng) {
        (true, Some(rng)) => Some(Dropout {
            rate: config.dropout_rate,
            rng,
        }),
        _ => None,
    };
    let out = encode_graph(&mut g, config, &p, bound_stack.as_ref(), batch, drop)?;
    g.value(out)
        .clone()
        .reshape(&[batch.batch, batch.seq, config.d_model])
}

fn flatten_hidden(hidden: &Tensor, d_model: usize) -> Result<Tensor> {
    if hidden.last_dim() != d_model || hidden.rank() < 2 {
        return Err(Error::Shape {
            op: "hidden",
            left: hidden.shape().to_vec(),
            right: vec![d_model],
        });
    }
    hidden.clone().reshape(&[hidden.rows(), d_model])
}

/// MLM head over `[batch × seq × d_model]` hidden states, using the
/// encoder's own output bias.
pub fn mlm_head(weights: &EncoderWeights, hidden: &Tensor) -> Result<Tensor> {
    let config = &weights.config;
    let flat = flatten_hidden(hidden, config.d_model)?;
    let mut g: Graph<f32> = Graph::new();
    let p = BoundParams::constants(&mut g, &weights.params);
    let h = g.constant(flat);
    let bias = p.get(names::MLM_OUTPUT_BIAS)?;
    let logits = mlm_logits_graph(&mut g, config, &p, h, bias)?;
    let mut shape = hidden.shape().to_vec();
    *shape.last_mut().unwrap() = config.vocab_size;
    g.value(logits).clone().reshape(&shape)
}

/// Linear NER head over `[batch × seq × d_model]` hidden states.
pub fn ner_head(head: &ParamStore, hidden: &Tensor) -> Result<Tensor> {
    let w = head.require(names::NER_WEIGHT)?;
    let flat = flatten_hidden(hidden, w.shape()[0])?;
    let mut g: Graph<f32> = Graph::new();
    let p = BoundParams::constants(&mut g, head);
    let h = g.constant(flat);
    let logits = ner_logits_graph(&mut g, &p, h)?;
    let mut shape = hidden.shape().to_vec();
    *shape.last_mut().unwrap() = w.shape()[1];
    g.value(logits).clone().reshape(&shape)
}
