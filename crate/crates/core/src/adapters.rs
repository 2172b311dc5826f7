//! Bottleneck adapters: insertion, stacking, freezing and accounting.
//!
//! Each adapter adds one residual bottleneck per encoder layer, applied to
//! the output of the layer's feed-forward residual + layer norm:
//! `h + act(h·W_down + b_down)·W_up + b_up`. The up-projection starts at
//! zero, so a fresh adapter is an exact identity.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::encoder::{self, BoundParams, BoundStack, EncoderConfig, EncoderWeights};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::rng::{RngStream, StreamId};
use crate::tape::{Graph, Var};
use crate::tensor::{Real, Tensor};

pub const DEFAULT_REDUCTION_FACTOR: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Nonlinearity {
    Relu,
    Gelu,
}

impl Nonlinearity {
    pub fn as_str(self) -> &'static str {
        match self {
            Nonlinearity::Relu => "relu",
            Nonlinearity::Gelu => "gelu",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Nonlinearity::Relu),
            "gelu" => Ok(Nonlinearity::Gelu),
            other => Err(Error::Config(format!("unknown nonlinearity {other}"))),
        }
    }
}

/// Where adapters sit inside a layer. Only one placement exists.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InsertionPoint {
    AfterFfn,
}

impl InsertionPoint {
    pub fn as_str(self) -> &'static str {
        "after_ffn"
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "after_ffn" => Ok(InsertionPoint::AfterFfn),
            other => Err(Error::Stack(format!("unknown insertion point {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdapterConfig {
    pub name: String,
    pub reduction_factor: usize,
    pub nonlinearity: Nonlinearity,
    pub insertion_point: InsertionPoint,
}

impl AdapterConfig {
    /// ReLU bottleneck with reduction factor 16 after the FFN sublayer.
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            reduction_factor: DEFAULT_REDUCTION_FACTOR,
            nonlinearity: Nonlinearity::Relu,
            insertion_point: InsertionPoint::AfterFfn,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.reduction_factor == 0 {
            return Err(Error::Config("reduction_factor must be at least 1".into()));
        }
        if self.name.is_empty() || self.name.contains(['/', ' ']) {
            return Err(Error::Config(format!("invalid adapter name {:?}", self.name)));
        }
        Ok(())
    }

    /// Bottleneck width `ceil(d_model / reduction_factor)`, at least 1.
    pub fn bottleneck(&self, d_model: usize) -> usize {
        d_model.div_ceil(self.reduction_factor.max(1)).max(1)
    }
}

/// The base-model properties an adapter was built against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderFingerprint {
    pub d_model: usize,
    pub n_layers: usize,
    pub vocab_hash: u64,
}

impl EncoderFingerprint {
    pub fn of(config: &EncoderConfig) -> Self {
        Self {
            d_model: config.d_model,
            n_layers: config.n_layers,
            vocab_hash: config.vocab_hash,
        }
    }

    pub fn check(&self, config: &EncoderConfig) -> Result<()> {
        if self.d_model != config.d_model {
            return Err(Error::Compatibility(format!(
                "adapter built for d_model {}, encoder has {}",
                self.d_model, config.d_model
            )));
        }
        if self.n_layers != config.n_layers {
            return Err(Error::Compatibility(format!(
                "adapter built for {} layers, encoder has {}",
                self.n_layers, config.n_layers
            )));
        }
        if self.vocab_hash != 0 && config.vocab_hash != 0 && self.vocab_hash != config.vocab_hash {
            return Err(Error::Compatibility(format!(
                "adapter vocabulary {:016x} differs from encoder vocabulary {:016x}",
                self.vocab_hash, config.vocab_hash
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterWeights {
    pub config: AdapterConfig,
    pub fingerprint: EncoderFingerprint,
    pub params: ParamStore,
}

pub fn down_weight(layer: usize) -> String {
    format!("layer.{layer}.down.weight")
}
pub fn down_bias(layer: usize) -> String {
    format!("layer.{layer}.down.bias")
}
pub fn up_weight(layer: usize) -> String {
    format!("layer.{layer}.up.weight")
}
pub fn up_bias(layer: usize) -> String {
    format!("layer.{layer}.up.bias")
}

/// `n_layers · (2·d·m + m + d)`.
pub fn adapter_param_count(encoder: &EncoderConfig, adapter: &AdapterConfig) -> usize {
    let d = encoder.d_model;
    let m = adapter.bottleneck(d);
    encoder.n_layers * (2 * d * m + m + d)
}

/// Adapter size as a fraction of the encoder plus MLM head.
pub fn adapter_param_ratio(encoder: &EncoderConfig, adapter: &AdapterConfig) -> f64 {
    adapter_param_count(encoder, adapter) as f64 / encoder::parameter_count(encoder) as f64
}

/// Fresh adapter: truncated-normal down-projection, everything else zero.
pub fn init_adapter(
    encoder: &EncoderConfig,
    adapter: &AdapterConfig,
    seed: u64,
) -> Result<AdapterWeights> {
    encoder.validate()?;
    adapter.validate()?;
    let d = encoder.d_model;
    let m = adapter.bottleneck(d);
    let mut rng = RngStream::named(seed, StreamId::Init);
    let mut params = ParamStore::new();
    for layer in 0..encoder.n_layers {
        let w = Tensor::from_fn(&[d, m], |_| rng.truncated_normal(encoder::INIT_STD));
        params.insert(down_weight(layer), w)?;
        params.insert(down_bias(layer), Tensor::zeros(&[m]))?;
        params.insert(up_weight(layer), Tensor::zeros(&[m, d]))?;
        params.insert(up_bias(layer), Tensor::zeros(&[d]))?;
    }
    Ok(AdapterWeights {
        config: adapter.clone(),
        fingerprint: EncoderFingerprint::of(encoder),
        params,
    })
}

/// Records one adapter's bottleneck at `layer` on `h` (`[rows × d_model]`).
pub fn adapter_graph<T: Real>(
    g: &mut Graph<T>,
    p: &BoundParams,
    nonlinearity: Nonlinearity,
    layer: usize,
    h: Var,
) -> Result<Var> {
    let down = g.matmul(h, p.get(&down_weight(layer))?)?;
    let down = g.add_row(down, p.get(&down_bias(layer))?)?;
    let act = match nonlinearity {
        Nonlinearity::Relu => g.relu(down),
        Nonlinearity::Gelu => g.gelu(down),
    };
    let up = g.matmul(act, p.get(&up_weight(layer))?)?;
    let up = g.add_row(up, p.get(&up_bias(layer))?)?;
    g.add(h, up)
}

/// Folds every member of a bound stack over `h`, in stack order.
pub fn apply_stack_graph<T: Real>(
    g: &mut Graph<T>,
    stack: &BoundStack,
    layer: usize,
    mut h: Var,
) -> Result<Var> {
    for (nonlinearity, p) in &stack.members {
        h = adapter_graph(g, p, *nonlinearity, layer, h)?;
    }
    Ok(h)
}

fn as_rows(h: &Tensor, d: usize) -> Result<Tensor> {
    if h.last_dim() != d {
        return Err(Error::Compatibility(format!(
            "hidden width {} does not match adapter d_model {d}",
            h.last_dim()
        )));
    }
    h.clone().reshape(&[h.rows(), d])
}

/// Applies one adapter at `layer_index` to hidden states of any leading shape.
pub fn adapter_forward(a: &AdapterWeights, layer_index: usize, h: &Tensor) -> Result<Tensor> {
    if layer_index >= a.fingerprint.n_layers {
        return Err(Error::Index {
            context: "adapter layer",
            index: layer_index,
            bound: a.fingerprint.n_layers,
        });
    }
    let rows = as_rows(h, a.fingerprint.d_model)?;
    let mut g: Graph<f32> = Graph::new();
    let p = BoundParams::constants(&mut g, &a.params);
    let x = g.constant(rows);
    let y = adapter_graph(&mut g, &p, a.config.nonlinearity, layer_index, x)?;
    g.value(y).clone().reshape(h.shape())
}

/// Applies every member of `stack` in order; an empty stack returns `h`.
pub fn apply_stack(stack: &AdapterStack, layer_index: usize, h: &Tensor) -> Result<Tensor> {
    let mut out = h.clone();
    for m in stack.members() {
        out = adapter_forward(&m.weights, layer_index, &out)?;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StackMember {
    pub weights: AdapterWeights,
    pub trainable: bool,
}

/// Ordered adapters applied at every insertion point. The language adapter
/// comes first and the task adapter second.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdapterStack {
    members: Vec<StackMember>,
}

impl AdapterStack {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, weights: AdapterWeights, trainable: bool) -> Result<()> {
        if self.members.iter().any(|m| m.weights.config.name == weights.config.name) {
            return Err(Error::Stack(format!(
                "adapter name {} already in stack",
                weights.config.name
            )));
        }
        if let Some(first) = self.members.first() {
            let (a, b) = (first.weights.fingerprint, weights.fingerprint);
            if (a.d_model, a.n_layers) != (b.d_model, b.n_layers) {
                return Err(Error::Compatibility(format!(
                    "adapter {} does not match the stack's encoder shape",
                    weights.config.name
                )));
            }
        }
        self.members.push(StackMember { weights, trainable });
        Ok(())
    }

    pub fn members(&self) -> &[StackMember] {
        &self.members
    }

    pub fn members_mut(&mut self) -> &mut [StackMember] {
        &mut self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&StackMember> {
        self.members.iter().find(|m| m.weights.config.name == name)
    }

    pub fn check_compatible(&self, config: &EncoderConfig) -> Result<()> {
        self.members
            .iter()
            .try_for_each(|m| m.weights.fingerprint.check(config))
    }
}

/// Which part of a model a parameter belongs to.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum ParamGroup {
    Encoder,
    Adapter(String),
    Head,
}

/// A parameter selected for optimization.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamRef {
    pub group: ParamGroup,
    pub name: String,
    pub numel: usize,
}

impl ParamRef {
    /// `encoder/<name>`, `adapter/<adapter>/<name>` or `head/<name>`.
    pub fn qualified(&self) -> String {
        match &self.group {
            ParamGroup::Encoder => format!("encoder/{}", self.name),
            ParamGroup::Adapter(a) => format!("adapter/{a}/{}", self.name),
            ParamGroup::Head => format!("head/{}", self.name),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FreezeMode {
    /// Every encoder parameter except the MLM head, plus the task head.
    BaselineFull,
    /// Trainable stack members plus the task head.
    AdapterOnly,
}

/// The ordered list of parameters an optimizer may touch. Everything not
/// listed is frozen.
pub fn trainable_parameters(
    encoder: &EncoderWeights,
    stack: &AdapterStack,
    head: &ParamStore,
    mode: FreezeMode,
) -> Result<Vec<ParamRef>> {
    let mut out = Vec::new();
    match mode {
        FreezeMode::BaselineFull => {
            if !stack.is_empty() {
                return Err(Error::Contract(
                    "full fine-tuning does not take an adapter stack".into(),
                ));
            }
            for (name, t) in encoder.params.iter() {
                if !name.starts_with(encoder::names::MLM_PREFIX) {
                    out.push(ParamRef {
                        group: ParamGroup::Encoder,
                        name: name.into(),
                        numel: t.numel(),
                    });
                }
            }
        }
        FreezeMode::AdapterOnly => {
            for m in stack.members().iter().filter(|m| m.trainable) {
                for (name, t) in m.weights.params.iter() {
                    out.push(ParamRef {
                        group: ParamGroup::Adapter(m.weights.config.name.clone()),
                        name: name.into(),
                        numel: t.numel(),
                    });
                }
            }
        }
    }
    for (name, t) in head.iter() {
        out.push(ParamRef {
            group: ParamGroup::Head,
            name: name.into(),
            numel: t.numel(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{init_encoder, init_ner_head, parameter_count};

    fn desk() -> EncoderConfig {
        EncoderConfig::default()
    }

    fn small() -> EncoderConfig {
        EncoderConfig {
            vocab_size: 50,
            d_model: 4,
            n_layers: 2,
            n_heads: 2,
            d_ff: 8,
            max_positions: 16,
            ..EncoderConfig::default()
        }
    }

    #[test]
    fn bottleneck_width() {
        let a = AdapterConfig::new("x");
        assert_eq!(a.bottleneck(128), 8);
        assert_eq!(a.bottleneck(768), 48);
        assert_eq!(a.bottleneck(10), 1);
        let mut wide = a.clone();
        wide.reduction_factor = 3;
        assert_eq!(wide.bottleneck(10), 4);
    }

    #[test]
    fn desk_scale_counts() {
        let a = AdapterConfig::new("x");
        assert_eq!(adapter_param_count(&desk(), &a), 4 * 2184);
        let w = init_adapter(&desk(), &a, 0).unwrap();
        assert_eq!(w.params.numel(), 8736);
    }

    #[test]
    fn roberta_base_ratio() {
        let a = AdapterConfig::new("x");
        let base = EncoderConfig::roberta_base();
        assert_eq!(adapter_param_count(&base, &a), 894_528);
        assert!(adapter_param_ratio(&base, &a) < 0.01);
    }

    #[test]
    fn ratio_is_monotone_in_bottleneck() {
        let base = desk();
        let mut prev = f64::INFINITY;
        for rf in [1, 2, 4, 16, 64, 128, 1024] {
            let mut a = AdapterConfig::new("x");
            a.reduction_factor = rf;
            let r = adapter_param_ratio(&base, &a);
            assert!(r <= prev);
            prev = r;
        }
    }

    #[test]
    fn init_is_identity_and_deterministic() {
        let a = init_adapter(&small(), &AdapterConfig::new("x"), 5).unwrap();
        let b = init_adapter(&small(), &AdapterConfig::new("x"), 5).unwrap();
        assert!(a.params.bitwise_eq(&b.params));
        let h = Tensor::from_fn(&[2, 3, 4], |i| libm::sinf(i as f32));
        assert!(adapter_forward(&a, 1, &h).unwrap().bitwise_eq(&h));
    }

    fn narrow(name: &str) -> AdapterConfig {
        AdapterConfig {
            reduction_factor: 2,
            ..AdapterConfig::new(name)
        }
    }

    fn hand_set() -> AdapterWeights {
        let mut a = init_adapter(&small(), &narrow("x"), 0).unwrap();
        let set = |a: &mut AdapterWeights, name: String, vals: &[f32]| {
            a.params.get_mut(&name).unwrap().data_mut().copy_from_slice(vals);
        };
        set(&mut a, down_weight(0), &[0.5, -0.25, 0.1, 0.3, -0.2, 0.4, 0.05, -0.6]);
        set(&mut a, down_bias(0), &[0.1, -0.05]);
        set(&mut a, up_weight(0), &[0.2, -0.1, 0.3, 0.05, -0.4, 0.15, 0.25, -0.35]);
        set(&mut a, up_bias(0), &[0.01, 0.02, -0.03, 0.04]);
        a
    }

    #[test]
    fn forward_matches_scalar_oracle() {
        let a = hand_set();
        let h = Tensor::from_fn(&[3, 4], |i| (i as f32 - 5.0) * 0.3);
        let out = adapter_forward(&a, 0, &h).unwrap();
        let p = |n: String| a.params.get(&n).unwrap().data().to_vec();
        let (wd, bd, wu, bu) = (p(down_weight(0)), p(down_bias(0)), p(up_weight(0)), p(up_bias(0)));
        for r in 0..3 {
            let x = &h.data()[r * 4..r * 4 + 4];
            let mut z = [0.0f32; 2];
            for (k, zk) in z.iter_mut().enumerate() {
                let mut acc = 0.0;
                for j in 0..4 {
                    acc += x[j] * wd[j * 2 + k];
                }
                *zk = (acc + bd[k]).max(0.0);
            }
            for j in 0..4 {
                let mut acc = 0.0;
                for (k, zk) in z.iter().enumerate() {
                    acc += zk * wu[k * 4 + j];
                }
                let expected = x[j] + acc + bu[j];
                assert!((out.data()[r * 4 + j] - expected).abs() < 1e-6);
            }
        }
        assert_eq!(out.shape(), h.shape());
    }

    #[test]
    fn forward_rejects_width_mismatch() {
        let a = hand_set();
        assert!(matches!(
            adapter_forward(&a, 0, &Tensor::zeros(&[2, 8])),
            Err(Error::Compatibility(_))
        ));
        assert!(adapter_forward(&a, 2, &Tensor::zeros(&[2, 4])).is_err());
    }

    #[test]
    fn stack_composition() {
        let h = Tensor::from_fn(&[2, 4], |i| (i as f32) * 0.2 - 0.7);
        let a = hand_set();
        let mut single = AdapterStack::new();
        single.push(a.clone(), false).unwrap();
        assert!(apply_stack(&single, 0, &h)
            .unwrap()
            .bitwise_eq(&adapter_forward(&a, 0, &h).unwrap()));

        let fresh = init_adapter(&small(), &narrow("task"), 1).unwrap();
        let mut with_fresh = single.clone();
        with_fresh.push(fresh, true).unwrap();
        assert!(apply_stack(&with_fresh, 0, &h)
            .unwrap()
            .bitwise_eq(&apply_stack(&single, 0, &h).unwrap()));

        assert!(apply_stack(&AdapterStack::new(), 0, &h).unwrap().bitwise_eq(&h));
        assert!(single.push(a, true).is_err());
    }

    #[test]
    fn stack_order_matters() {
        let h = Tensor::from_fn(&[2, 4], |i| libm::cosf(i as f32 * 1.3));
        let mut a = init_adapter(&small(), &narrow("a"), 11).unwrap();
        let mut b = init_adapter(&small(), &narrow("b"), 12).unwrap();
        let mut rng = RngStream::new(99, 0);
        for w in [&mut a, &mut b] {
            for name in [down_weight(0), up_weight(0), down_bias(0)] {
                for v in w.params.get_mut(&name).unwrap().data_mut() {
                    *v = rng.truncated_normal(0.5);
                }
            }
        }
        let mut ab = AdapterStack::new();
        ab.push(a.clone(), false).unwrap();
        ab.push(b.clone(), false).unwrap();
        let mut ba = AdapterStack::new();
        ba.push(b, false).unwrap();
        ba.push(a, false).unwrap();
        assert!(!apply_stack(&ab, 0, &h).unwrap().bitwise_eq(&apply_stack(&ba, 0, &h).unwrap()));
    }

    #[test]
    fn trainable_parameter_accounting() {
        let enc = init_encoder(&desk_tiny_vocab(), 0).unwrap();
        let c = &enc.config;
        let mut rng = RngStream::new(0, 0);
        let head = init_ner_head(c.d_model, 9, &mut rng);

        let mut stack = AdapterStack::new();
        stack.push(init_adapter(c, &AdapterConfig::new("lang"), 1).unwrap(), false).unwrap();
        stack.push(init_adapter(c, &AdapterConfig::new("task"), 2).unwrap(), true).unwrap();
        let refs = trainable_parameters(&enc, &stack, &head, FreezeMode::AdapterOnly).unwrap();
        let total: usize = refs.iter().map(|r| r.numel).sum();
        assert_eq!(total, 4 * 2184 + (128 * 9 + 9));
        assert_eq!(total, 9897);
        assert!(refs.iter().all(|r| r.group != ParamGroup::Adapter("lang".into())));

        let refs = trainable_parameters(&enc, &AdapterStack::new(), &head, FreezeMode::BaselineFull)
            .unwrap();
        let total: usize = refs.iter().map(|r| r.numel).sum();
        assert_eq!(total, parameter_count(c) - c.mlm_head_params() + 128 * 9 + 9);

        assert!(matches!(
            trainable_parameters(&enc, &stack, &head, FreezeMode::BaselineFull),
            Err(Error::Contract(_))
        ));
    }

    fn desk_tiny_vocab() -> EncoderConfig {
        EncoderConfig {
            vocab_size: 300,
            ..EncoderConfig::default()
        }
    }

    #[test]
    fn fingerprint_mismatch() {
        let a = init_adapter(&desk(), &AdapterConfig::new("x"), 0).unwrap();
        let mut wide = desk();
        wide.d_model = 256;
        assert!(matches!(a.fingerprint.check(&wide), Err(Error::Compatibility(_))));
        let mut other_vocab = desk();
        other_vocab.vocab_hash = 7;
        let mut b = a.clone();
        b.fingerprint.vocab_hash = 8;
        assert!(b.fingerprint.check(&other_vocab).is_err());
        assert!(a.fingerprint.check(&other_vocab).is_ok());
    }
}
