//! Gradient-check scenarios: every tape op on random inputs and the full
//! objective of a tiny encoder.

use std::collections::BTreeMap;

use adaptlab_core::adapters::{init_adapter, AdapterConfig};
use adaptlab_core::encoder::{
    encode_graph, init_encoder, init_ner_head, mlm_logits_graph, names, ner_logits_graph,
    BoundParams, BoundStack, EncoderConfig, TokenBatch,
};
use adaptlab_core::rng::RngStream;
use adaptlab_core::tape::{Graph, Var};
use adaptlab_core::tensor::{Real, Tensor};
use adaptlab_core::Result;

use super::gradcheck::{weighted_sum, Scenario};

pub fn uniform(shape: &[usize], rng: &mut RngStream) -> Tensor {
    Tensor::from_fn(shape, |_| (rng.uniform() * 2.0 - 1.0) as f32)
}

/// Uniform in `[-1, 1]` but bounded away from zero, for kinked ops.
pub fn away_from_zero(shape: &[usize], rng: &mut RngStream) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let u = 0.05 + 0.95 * rng.uniform() as f32;
        if rng.below(2) == 0 {
            u
        } else {
            -u
        }
    })
}

#[derive(Debug, Clone, Copy)]
pub enum Op {
    MatMul,
    MatMulT,
    Bmm,
    BmmT,
    Add,
    Mul,
    AddRow,
    Scale,
    MulConst,
    Relu,
    Gelu,
    Softmax,
    LayerNorm,
    Gather,
    MaskKeys,
    SplitHeads,
    MergeHeads,
    CrossEntropy,
    Reshape,
}

pub const OPS: [Op; 19] = [
    Op::MatMul,
    Op::MatMulT,
    Op::Bmm,
    Op::BmmT,
    Op::Add,
    Op::Mul,
    Op::AddRow,
    Op::Scale,
    Op::MulConst,
    Op::Relu,
    Op::Gelu,
    Op::Softmax,
    Op::LayerNorm,
    Op::Gather,
    Op::MaskKeys,
    Op::SplitHeads,
    Op::MergeHeads,
    Op::CrossEntropy,
    Op::Reshape,
];

pub struct OpCase {
    op: Op,
    inputs: Vec<(String, Tensor)>,
    probe: Tensor,
    dims: [usize; 4],
    rows: Vec<usize>,
    flags: Vec<bool>,
    factors: Vec<f32>,
}

impl OpCase {
    pub fn new(op: Op, dims: [usize; 4], seed: u64) -> Self {
        let mut rng = RngStream::new(seed, 7);
        let [a, b, c, d] = dims;
        let mut rows = Vec::new();
        let mut flags = Vec::new();
        let mut factors = Vec::new();
        let x = |shape: &[usize], rng: &mut RngStream| ("x".to_string(), uniform(shape, rng));
        let y = |shape: &[usize], rng: &mut RngStream| ("y".to_string(), uniform(shape, rng));
        let (inputs, out): (Vec<(String, Tensor)>, Vec<usize>) = match op {
            Op::MatMul => (vec![x(&[a, b], &mut rng), y(&[b, c], &mut rng)], vec![a, c]),
            Op::MatMulT => (vec![x(&[a, b], &mut rng), y(&[c, b], &mut rng)], vec![a, c]),
            Op::Bmm => (
                vec![x(&[d, a, b], &mut rng), y(&[d, b, c], &mut rng)],
                vec![d, a, c],
            ),
            Op::BmmT => (
                vec![x(&[d, a, b], &mut rng), y(&[d, c, b], &mut rng)],
                vec![d, a, c],
            ),
            Op::Add | Op::Mul => (vec![x(&[a, b], &mut rng), y(&[a, b], &mut rng)], vec![a, b]),
            Op::AddRow => (vec![x(&[a, b], &mut rng), y(&[b], &mut rng)], vec![a, b]),
            Op::Scale | Op::Gelu | Op::Reshape => (vec![x(&[a, b], &mut rng)], vec![a, b]),
            Op::MulConst => {
                factors = uniform(&[a, b], &mut rng).into_data();
                (vec![x(&[a, b], &mut rng)], vec![a, b])
            }
            Op::Relu => (
                vec![("x".to_string(), away_from_zero(&[a, b], &mut rng))],
                vec![a, b],
            ),
            Op::Softmax => (vec![x(&[a, b + 1], &mut rng)], vec![a, b + 1]),
            Op::LayerNorm => {
                let w = b.max(4);
                (
                    vec![
                        x(&[a, w], &mut rng),
                        ("gamma".to_string(), uniform(&[w], &mut rng)),
                        ("beta".to_string(), uniform(&[w], &mut rng)),
                    ],
                    vec![a, w],
                )
            }
            Op::Gather => {
                rows = (0..c).map(|_| rng.below(a)).collect();
                (vec![x(&[a, b], &mut rng)], vec![c, b])
            }
            Op::MaskKeys => {
                // x is [batch·heads × seq × seq] with batch = d, heads = c.
                flags = (0..d * a).map(|_| rng.below(3) == 0).collect();
                (vec![x(&[d * c, a, a], &mut rng)], vec![d * c, a, a])
            }
            Op::SplitHeads => (
                vec![x(&[d * a, c * b], &mut rng)],
                vec![d * c, a, b],
            ),
            Op::MergeHeads => (
                vec![x(&[d * c, a, b], &mut rng)],
                vec![d * a, c * b],
            ),
            Op::CrossEntropy => {
                let classes = b + 1;
                rows = (0..a).map(|_| rng.below(classes)).collect();
                flags = (0..a).map(|_| rng.below(3) == 0).collect();
                flags[rng.below(a)] = false;
                (vec![x(&[a, classes], &mut rng)], vec![1])
            }
        };
        let probe = uniform(&out, &mut rng);
        Self {
            op,
            inputs,
            probe,
            dims,
            rows,
            flags,
            factors,
        }
    }
}

impl Scenario for OpCase {
    fn inputs(&self) -> Vec<(String, Tensor)> {
        self.inputs.clone()
    }

    fn loss<T: Real>(&self, g: &mut Graph<T>, v: &BTreeMap<String, Var>) -> Result<Var> {
        let [a, b, c, d] = self.dims;
        let x = v["x"];
        let out = match self.op {
            Op::MatMul => g.matmul(x, v["y"])?,
            Op::MatMulT => g.matmul_t(x, v["y"])?,
            Op::Bmm => g.bmm(x, v["y"])?,
            Op::BmmT => g.bmm_t(x, v["y"])?,
            Op::Add => g.add(x, v["y"])?,
            Op::Mul => g.mul(x, v["y"])?,
            Op::AddRow => g.add_row(x, v["y"])?,
            Op::Scale => g.scale(x, T::from_f64(-1.75)),
            Op::MulConst => {
                let f = self.factors.iter().map(|&f| T::from_f32(f)).collect();
                g.mul_const(x, f)?
            }
            Op::Relu => g.relu(x),
            Op::Gelu => g.gelu(x),
            Op::Softmax => g.softmax(x),
            Op::LayerNorm => g.layer_norm(x, v["gamma"], v["beta"], T::from_f64(1e-5))?,
            Op::Gather => g.gather_rows(x, &self.rows)?,
            Op::MaskKeys => {
                let m = g.mask_keys(x, &self.flags, c)?;
                g.softmax(m)
            }
            Op::SplitHeads => g.split_heads(x, d, a, c)?,
            Op::MergeHeads => g.merge_heads(x, d, a, c)?,
            Op::CrossEntropy => g.cross_entropy_masked(x, &self.rows, &self.flags)?,
            Op::Reshape => g.reshape(x, &[b, a])?,
        };
        weighted_sum(g, out, &self.probe)
    }
}

/// The full objective on a tiny encoder with a frozen and a trainable adapter,
/// both heads, and padding in the batch.
pub struct TinyModel {
    pub config: EncoderConfig,
    pub inputs: Vec<(String, Tensor)>,
    pub batch: TokenBatch,
    pub mlm_rows: Vec<usize>,
    pub mlm_targets: Vec<usize>,
    pub ner_targets: Vec<usize>,
    pub ner_ignore: Vec<bool>,
}

pub fn tiny_config() -> EncoderConfig {
    EncoderConfig {
        vocab_size: 12,
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        d_ff: 16,
        max_positions: 4,
        dropout_rate: 0.0,
        ..EncoderConfig::default()
    }
}

impl TinyModel {
    pub fn new(seed: u64) -> Self {
        let config = tiny_config();
        let encoder = init_encoder(&config, seed).unwrap();
        let mut rng = RngStream::new(seed, 11);
        let mut inputs: Vec<(String, Tensor)> = Vec::new();
        for (name, t) in encoder.params.iter() {
            // Non-trivial LN affine so every path carries signal.
            let t = if name.ends_with(".gamma") || name.ends_with(".beta") {
                uniform(t.shape(), &mut rng)
            } else {
                Tensor::from_fn(t.shape(), |i| t.data()[i] * 20.0)
            };
            inputs.push((format!("enc/{name}"), t));
        }
        for (k, label) in ["lang", "task"].into_iter().enumerate() {
            let mut ac = AdapterConfig::new(label);
            ac.reduction_factor = 2;
            let adapter = init_adapter(&config, &ac, seed + k as u64).unwrap();
            for (name, t) in adapter.params.iter() {
                inputs.push((format!("{label}/{name}"), uniform(t.shape(), &mut rng)));
            }
        }
        for (name, t) in init_ner_head(8, 5, &mut rng).iter() {
            inputs.push((format!("ner/{name}"), uniform(t.shape(), &mut rng)));
        }
        let batch = TokenBatch::from_rows(&[vec![0, 7, 9, 2], vec![0, 5, 2]], 1).unwrap();
        Self {
            config,
            inputs,
            batch,
            mlm_rows: vec![1, 2, 5],
            mlm_targets: vec![7, 11, 6],
            ner_targets: vec![0, 3, 4, 0, 0, 1, 0, 0],
            ner_ignore: vec![true, false, false, true, true, false, true, true],
        }
    }
}

pub fn group(v: &BTreeMap<String, Var>, prefix: &str) -> BoundParams {
    BoundParams::from_vars(
        v.iter()
            .filter_map(|(n, &var)| n.strip_prefix(prefix).map(|s| (s, var))),
    )
}

impl Scenario for TinyModel {
    fn inputs(&self) -> Vec<(String, Tensor)> {
        self.inputs.clone()
    }

    fn loss<T: Real>(&self, g: &mut Graph<T>, v: &BTreeMap<String, Var>) -> Result<Var> {
        let enc = group(v, "enc/");
        let nl = adaptlab_core::adapters::Nonlinearity::Relu;
        let stack = BoundStack {
            members: vec![(nl, group(v, "lang/")), (nl, group(v, "task/"))],
        };
        let head = group(v, "ner/");
        let hidden = encode_graph(g, &self.config, &enc, Some(&stack), &self.batch, None)?;
        let picked = g.gather_rows(hidden, &self.mlm_rows)?;
        let mlm = mlm_logits_graph(
            g,
            &self.config,
            &enc,
            picked,
            enc.get(names::MLM_OUTPUT_BIAS)?,
        )?;
        let mlm_loss =
            g.cross_entropy_masked(mlm, &self.mlm_targets, &vec![false; self.mlm_rows.len()])?;
        let ner = ner_logits_graph(g, &head, hidden)?;
        let ner_loss = g.cross_entropy_masked(ner, &self.ner_targets, &self.ner_ignore)?;
        g.add(mlm_loss, ner_loss)
    }
}

