//! Training configuration, batching and the single optimization step.
//!
//! Everything here is clock-free. The budgeted loops that add wall-clock
//! limits, checkpoints and metric logs live in the `adaptlab` crate and drive
//! [`Trainer::step`].

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::adapters::{trainable_parameters, AdapterStack, AdapterWeights, FreezeMode, ParamGroup, ParamRef};
use crate::encoder::{
    self, encode_graph, mlm_logits_graph, names, ner_logits_graph, BoundParams, BoundStack, Dropout,
    EncoderWeights, TokenBatch,
};
use crate::error::{Error, Result};
use crate::eval::{decode_bio, span_f1, F1Report};
use crate::masking::{mlm_mask, MaskConfig};
use crate::optim::{clip_global_norm, lr_schedule, AdamHyper, AdamW};
use crate::params::ParamStore;
use crate::rng::{RngState, RngStream, RngStreams};
use crate::tagging::{Aligned, Tag, N_LABELS};
use crate::tape::Graph;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    MlmAdapter,
    NerBaselineFull,
    NerAdapter,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::MlmAdapter => "mlm_adapter",
            Self::NerBaselineFull => "ner_baseline_full",
            Self::NerAdapter => "ner_adapter",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        [Self::MlmAdapter, Self::NerBaselineFull, Self::NerAdapter]
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode {s:?}")))
    }

    pub fn freeze_mode(self) -> FreezeMode {
        match self {
            Self::NerBaselineFull => FreezeMode::BaselineFull,
            Self::MlmAdapter | Self::NerAdapter => FreezeMode::AdapterOnly,
        }
    }

    pub fn default_learning_rate(self) -> f32 {
        match self {
            Self::NerBaselineFull => 5e-5,
            Self::MlmAdapter | Self::NerAdapter => 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: Mode,
    pub learning_rate: f32,
    pub adam: AdamHyper,
    pub batch_size: usize,
    pub max_steps: u64,
    pub warmup_steps: u64,
    pub seed: u64,
    pub wall_clock_budget_seconds: Option<f64>,
    pub checkpoint_interval_steps: u64,
    pub log_interval_steps: u64,
    pub eval_interval_steps: u64,
    /// Longest sequence fed to the encoder, special tokens included.
    pub max_len: usize,
    pub clip_norm: f64,
    pub mask: MaskConfig,
    /// Adapter NER only: train the language adapter itself instead of a
    /// task adapter stacked on top of it.
    pub unfreeze_language_adapter: bool,
}

impl TrainConfig {
    pub fn new(mode: Mode) -> Self {
        Self {
            mode,
            learning_rate: mode.default_learning_rate(),
            adam: AdamHyper::default(),
            batch_size: 16,
            max_steps: 1000,
            warmup_steps: 100,
            seed: 0,
            wall_clock_budget_seconds: None,
            checkpoint_interval_steps: 100,
            log_interval_steps: 10,
            eval_interval_steps: 100,
            max_len: 64,
            clip_norm: 1.0,
            mask: MaskConfig::default(),
            unfreeze_language_adapter: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.warmup_steps > self.max_steps {
            return bad(format!(
                "warmup_steps {} exceeds max_steps {}",
                self.warmup_steps, self.max_steps
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad(format!("learning_rate {} is invalid", self.learning_rate));
        }
        if self.max_len < 3 {
            return bad(format!("max_len {} leaves no room for tokens", self.max_len));
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be positive".into());
        }
        for (name, v) in [
            ("checkpoint_interval_steps", self.checkpoint_interval_steps),
            ("log_interval_steps", self.log_interval_steps),
            ("eval_interval_steps", self.eval_interval_steps),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if let Some(b) = self.wall_clock_budget_seconds {
            if !(b >= 0.0) {
                return bad(format!("wall_clock_budget_seconds {b} is invalid"));
            }
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return bad("adam betas must lie in [0, 1) and eps must be positive".into());
        }
        if self.unfreeze_language_adapter && self.mode != Mode::NerAdapter {
            return bad("unfreeze_language_adapter applies to ner_adapter only".into());
        }
        self.mask.validate()
    }

    /// Learning rate of the `step`-th update, counting from 1.
    pub fn lr_at(&self, step: u64) -> f32 {
        lr_schedule(step, self.learning_rate, self.warmup_steps, self.max_steps)
    }
}

/// Encoder, adapter stack and task head trained together.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub encoder: EncoderWeights,
    pub stack: AdapterStack,
    /// `mlm.output_bias` for MLM training, `ner.weight`/`ner.bias` for NER.
    pub head: ParamStore,
}

impl Model {
    /// Language-adapter pre-training: the adapter and a private copy of the
    /// MLM output bias are trainable; the encoder's own copy stays frozen.
    pub fn mlm(encoder: EncoderWeights, adapter: AdapterWeights) -> Result<Self> {
        let mut stack = AdapterStack::new();
        stack.push(adapter, true)?;
        stack.check_compatible(&encoder.config)?;
        let mut head = ParamStore::new();
        head.insert(
            names::MLM_OUTPUT_BIAS,
            encoder.params.require(names::MLM_OUTPUT_BIAS)?.clone(),
        )?;
        Ok(Self { encoder, stack, head })
    }

    pub fn ner_baseline(encoder: EncoderWeights, head: ParamStore) -> Self {
        Self {
            encoder,
            stack: AdapterStack::new(),
            head,
        }
    }

    /// Frozen language adapter with a trainable task adapter on top, or the
    /// language adapter alone and trainable when `task` is `None`.
    pub fn ner_adapter(
        encoder: EncoderWeights,
        language: AdapterWeights,
        task: Option<AdapterWeights>,
        head: ParamStore,
    ) -> Result<Self> {
        let mut stack = AdapterStack::new();
        match task {
            Some(task) => {
                stack.push(language, false)?;
                stack.push(task, true)?;
            }
            None => stack.push(language, true)?,
        }
        stack.check_compatible(&encoder.config)?;
        Ok(Self { encoder, stack, head })
    }

    fn check_mode(&self, mode: Mode) -> Result<()> {
        let has_trainable = self.stack.members().iter().any(|m| m.trainable);
        let head_ok = match mode {
            Mode::MlmAdapter => self.head.contains(names::MLM_OUTPUT_BIAS) && self.head.len() == 1,
            _ => self.head.contains(names::NER_WEIGHT) && self.head.contains(names::NER_BIAS),
        };
        if !head_ok {
            return Err(Error::Contract(format!("head parameters do not fit mode {}", mode.as_str())));
        }
        match mode {
            Mode::NerBaselineFull if !self.stack.is_empty() => Err(Error::Contract(
                "baseline fine-tuning takes no adapters".into(),
            )),
            Mode::MlmAdapter | Mode::NerAdapter if !has_trainable => Err(Error::Contract(format!(
                "mode {} needs a trainable adapter",
                mode.as_str()
            ))),
            _ => Ok(()),
        }
    }

    /// Every tensor of the model under its qualified name.
    pub fn qualified_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (n, t) in self.encoder.params.iter() {
            out.push((format!("encoder/{n}"), t));
        }
        for m in self.stack.members() {
            for (n, t) in m.weights.params.iter() {
                out.push((format!("adapter/{}/{n}", m.weights.config.name), t));
            }
        }
        for (n, t) in self.head.iter() {
            out.push((format!("head/{n}"), t));
        }
        out
    }

    fn trainable_mut(&mut self, selected: &BTreeSet<String>) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (n, t) in self.encoder.params.iter_mut() {
            let q = format!("encoder/{n}");
            if selected.contains(&q) {
                out.push((q, t));
            }
        }
        for m in self.stack.members_mut() {
            let adapter = m.weights.config.name.clone();
            for (n, t) in m.weights.params.iter_mut() {
                let q = format!("adapter/{adapter}/{n}");
                if selected.contains(&q) {
                    out.push((q, t));
                }
            }
        }
        for (n, t) in self.head.iter_mut() {
            let q = format!("head/{n}");
            if selected.contains(&q) {
                out.push((q, t));
            }
        }
        out
    }
}

/// Snapshot of a [`Batcher`] that is enough to rebuild it exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatcherState {
    pub epoch: u64,
    pub cursor: usize,
    /// Shuffle stream as it was before the current epoch's order was drawn.
    pub epoch_start: RngState,
}

/// Per-epoch shuffled, length-bucketed batches of example indices.
///
/// Each epoch shuffles all indices, cuts the result into pools of
/// `POOL_BATCHES` batches, sorts each pool by length so batches hold
/// similar lengths, and finally shuffles the batch order.
#[derive(Debug, Clone)]
pub struct Batcher {
    lengths: Vec<usize>,
    batch_size: usize,
    rng: RngStream,
    epoch: u64,
    cursor: usize,
    epoch_start: RngState,
    batches: Vec<Vec<usize>>,
}

pub const POOL_BATCHES: usize = 32;

impl Batcher {
    pub fn new(lengths: Vec<usize>, batch_size: usize, rng: RngStream) -> Result<Self> {
        if lengths.is_empty() {
            return Err(Error::Data("no training examples".into()));
        }
        let state = BatcherState {
            epoch: 0,
            cursor: 0,
            epoch_start: rng.state(),
        };
        Self::restore(lengths, batch_size, state)
    }

    pub fn restore(lengths: Vec<usize>, batch_size: usize, state: BatcherState) -> Result<Self> {
        if lengths.is_empty() || batch_size == 0 {
            return Err(Error::Data("batcher needs examples and a positive batch size".into()));
        }
        let mut b = Self {
            lengths,
            batch_size,
            rng: RngStream::from_state(state.epoch_start),
            epoch: state.epoch,
            cursor: 0,
            epoch_start: state.epoch_start,
            batches: Vec::new(),
        };
        b.plan_epoch();
        if state.cursor > b.batches.len() {
            return Err(Error::Data(format!(
                "batch cursor {} beyond {} batches",
                state.cursor,
                b.batches.len()
            )));
        }
        b.cursor = state.cursor;
        Ok(b)
    }

    fn plan_epoch(&mut self) {
        self.epoch_start = self.rng.state();
        let mut order: Vec<usize> = (0..self.lengths.len()).collect();
        self.rng.shuffle(&mut order);
        let mut batches = Vec::new();
        for pool in order.chunks(self.batch_size * POOL_BATCHES) {
            let mut pool = pool.to_vec();
            pool.sort_by_key(|&i| (self.lengths[i], i));
            batches.extend(pool.chunks(self.batch_size).map(<[usize]>::to_vec));
        }
        self.rng.shuffle(&mut batches);
        self.batches = batches;
    }

    pub fn state(&self) -> BatcherState {
        BatcherState {
            epoch: self.epoch,
            cursor: self.cursor,
            epoch_start: self.epoch_start,
        }
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.cursor == self.batches.len() {
            self.epoch += 1;
            self.cursor = 0;
            self.plan_epoch();
        }
        self.cursor += 1;
        self.batches[self.cursor - 1].clone()
    }
}

/// An NER sentence on subtokens plus its word-level gold tags.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NerExample {
    pub aligned: Aligned,
    pub tags: Vec<Tag>,
}

impl NerExample {
    /// Tags of the words that survived truncation.
    pub fn surviving_tags(&self) -> &[Tag] {
        let n = self.aligned.word_starts.iter().take_while(|s| s.is_some()).count();
        &self.tags[..n]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrainData {
    /// Framed token ids (`cls ... sep`) per sentence.
    Mlm(Vec<Vec<u32>>),
    Ner(Vec<NerExample>),
}

impl TrainData {
    pub fn len(&self) -> usize {
        match self {
            Self::Mlm(s) => s.len(),
            Self::Ner(s) => s.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn lengths(&self) -> Vec<usize> {
        match self {
            Self::Mlm(s) => s.iter().map(Vec::len).collect(),
            Self::Ner(s) => s.iter().map(|e| e.aligned.ids.len()).collect(),
        }
    }
}

/// Optimizer and random-stream state carried across steps.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Completed updates.
    pub step: u64,
    pub optimizer: AdamW,
    pub masking: RngState,
    pub dropout: RngState,
    pub batcher: BatcherState,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutput {
    /// Number of completed updates after this one.
    pub step: u64,
    pub loss: f32,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub learning_rate: f32,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    data: TrainData,
    step: u64,
    optimizer: AdamW,
    masking: RngStream,
    dropout: RngStream,
    batcher: Batcher,
    trainable: Vec<ParamRef>,
    selected: BTreeSet<String>,
}

impl Trainer {
    pub fn new(config: TrainConfig, model: Model, data: TrainData) -> Result<Self> {
        let streams = RngStreams::new(config.seed);
        let state = TrainState {
            step: 0,
            optimizer: AdamW::new(config.adam),
            masking: streams.masking.state(),
            dropout: streams.dropout.state(),
            batcher: BatcherState {
                epoch: 0,
                cursor: 0,
                epoch_start: streams.shuffle.state(),
            },
        };
        Self::resume(config, model, data, state)
    }

    /// Continues from a saved [`TrainState`]. Together with the model weights
    /// saved at the same step this reproduces the uninterrupted run exactly.
    pub fn resume(config: TrainConfig, model: Model, data: TrainData, state: TrainState) -> Result<Self> {
        config.validate()?;
        model.check_mode(config.mode)?;
        let data_fits = matches!(
            (&data, config.mode),
            (TrainData::Mlm(_), Mode::MlmAdapter) | (TrainData::Ner(_), Mode::NerAdapter | Mode::NerBaselineFull)
        );
        if !data_fits {
            return Err(Error::Contract(format!("data does not fit mode {}", config.mode.as_str())));
        }
        if data.is_empty() {
            return Err(Error::Data("empty training split".into()));
        }
        if config.max_len > model.encoder.config.max_positions {
            return Err(Error::Config(format!(
                "max_len {} exceeds the encoder's {} positions",
                config.max_len, model.encoder.config.max_positions
            )));
        }
        let trainable = trainable_parameters(&model.encoder, &model.stack, &model.head, config.mode.freeze_mode())?;
        let selected = trainable.iter().map(ParamRef::qualified).collect();
        let batcher = Batcher::restore(data.lengths(), config.batch_size, state.batcher)?;
        Ok(Self {
            config,
            model,
            data,
            step: state.step,
            optimizer: state.optimizer,
            masking: RngStream::from_state(state.masking),
            dropout: RngStream::from_state(state.dropout),
            batcher,
            trainable,
            selected,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.config.max_steps
    }

    pub fn trainable(&self) -> &[ParamRef] {
        &self.trainable
    }

    pub fn state(&self) -> TrainState {
        TrainState {
            step: self.step,
            optimizer: self.optimizer.clone(),
            masking: self.masking.state(),
            dropout: self.dropout.state(),
            batcher: self.batcher.state(),
        }
    }

    /// One forward/backward pass and AdamW update on the next batch.
    pub fn step(&mut self) -> Result<StepOutput> {
        let indices = self.batcher.next_batch();
        let mut g: Graph<f32> = Graph::new();
        let mode = self.config.mode;
        let model = &self.model;
        let enc_cfg = &model.encoder.config;
        let full = mode == Mode::NerBaselineFull;
        let enc = BoundParams::bind(&mut g, &model.encoder.params, |n| {
            full && !n.starts_with(names::MLM_PREFIX)
        });
        let stack = BoundStack::bind(&mut g, &model.stack, |i, _| model.stack.members()[i].trainable);
        let head = BoundParams::bind(&mut g, &model.head, |_| true);

        let loss = match &self.data {
            TrainData::Mlm(sentences) => {
                let batch = collate_mlm(&indices, sentences, enc_cfg, &self.config.mask, &mut self.masking)?;
                let drop = Some(Dropout {
                    rate: enc_cfg.dropout_rate,
                    rng: &mut self.dropout,
                });
                let hidden = encode_graph(&mut g, enc_cfg, &enc, Some(&stack), &batch.tokens, drop)?;
                let picked = g.gather_rows(hidden, &batch.rows)?;
                let bias = head.get(names::MLM_OUTPUT_BIAS)?;
                let logits = mlm_logits_graph(&mut g, enc_cfg, &enc, picked, bias)?;
                let keep = vec![false; batch.rows.len()];
                g.cross_entropy_masked(logits, &batch.targets, &keep)?
            }
            TrainData::Ner(examples) => {
                let batch = collate_ner(&indices, examples, enc_cfg.specials.pad)?;
                let drop = Some(Dropout {
                    rate: enc_cfg.dropout_rate,
                    rng: &mut self.dropout,
                });
                let bound_stack = (!model.stack.is_empty()).then_some(&stack);
                let hidden = encode_graph(&mut g, enc_cfg, &enc, bound_stack, &batch.tokens, drop)?;
                let logits = ner_logits_graph(&mut g, &head, hidden)?;
                g.cross_entropy_masked(logits, &batch.labels, &batch.ignore)?
            }
        };
        let next = self.step + 1;
        let loss_value = g.value(loss).data()[0];
        if !loss_value.is_finite() {
            return Err(Error::NonFiniteLoss(next));
        }
        let grads = g.backward(loss)?;

        let mut gstore = ParamStore::new();
        for r in &self.trainable {
            let var = match &r.group {
                ParamGroup::Encoder => enc.get(&r.name)?,
                ParamGroup::Head => head.get(&r.name)?,
                ParamGroup::Adapter(a) => {
                    let i = model
                        .stack
                        .members()
                        .iter()
                        .position(|m| &m.weights.config.name == a)
                        .ok_or_else(|| Error::Stack(format!("adapter {a} missing")))?;
                    stack.members[i].1.get(&r.name)?
                }
            };
            let grad = match grads.get(var) {
                Some(t) => t.clone(),
                None => Tensor::zeros(g.shape(var)),
            };
            gstore.insert(r.qualified(), grad)?;
        }
        let grad_norm = clip_global_norm(&mut gstore, self.config.clip_norm)?;
        let lr = self.config.lr_at(next);
        let mut params = self.model.trainable_mut(&self.selected);
        self.optimizer
            .step(params.iter_mut().map(|(n, t)| (n.as_str(), &mut **t)), &gstore, next, lr)?;
        self.step = next;
        Ok(StepOutput {
            step: next,
            loss: loss_value,
            grad_norm,
            learning_rate: lr,
        })
    }
}

pub struct MlmBatch {
    pub tokens: TokenBatch,
    /// Flat `row · seq + position` indices of the selected tokens.
    pub rows: Vec<usize>,
    pub targets: Vec<usize>,
}

pub fn collate_mlm(
    indices: &[usize],
    sentences: &[Vec<u32>],
    config: &encoder::EncoderConfig,
    mask: &MaskConfig,
    rng: &mut RngStream,
) -> Result<MlmBatch> {
    let mut specials = config.specials.ids().to_vec();
    specials.sort_unstable();
    let mut rows = Vec::with_capacity(indices.len());
    let mut selected = Vec::new();
    let mut targets = Vec::new();
    let seq = indices.iter().map(|&i| sentences[i].len()).max().unwrap_or(0);
    for (b, &i) in indices.iter().enumerate() {
        let ids = &sentences[i];
        let special: Vec<bool> = ids.iter().map(|&id| config.specials.contains(id)).collect();
        let m = mlm_mask(ids, &special, mask, config.specials.mask, config.vocab_size, &specials, rng)?;
        for (t, &on) in m.loss_mask.iter().enumerate() {
            if on {
                selected.push(b * seq + t);
                targets.push(m.targets[t] as usize);
            }
        }
        rows.push(m.input);
    }
    Ok(MlmBatch {
        tokens: TokenBatch::from_rows(&rows, config.specials.pad)?,
        rows: selected,
        targets,
    })
}

pub struct NerBatch {
    pub tokens: TokenBatch,
    pub labels: Vec<usize>,
    pub ignore: Vec<bool>,
}

pub fn collate_ner(indices: &[usize], examples: &[NerExample], pad_id: u32) -> Result<NerBatch> {
    let rows: Vec<Vec<u32>> = indices.iter().map(|&i| examples[i].aligned.ids.clone()).collect();
    let tokens = TokenBatch::from_rows(&rows, pad_id)?;
    let seq = tokens.seq;
    let mut labels = vec![0; tokens.tokens()];
    let mut ignore = vec![true; tokens.tokens()];
    for (b, &i) in indices.iter().enumerate() {
        let a = &examples[i].aligned;
        for t in 0..a.ids.len() {
            labels[b * seq + t] = a.labels[t];
            ignore[b * seq + t] = !a.loss_mask[t];
        }
    }
    Ok(NerBatch { tokens, labels, ignore })
}

/// Word-level tags predicted for every example, surviving words only.
/// Ties in the arg-max go to the lower label id.
pub fn predict_ner(model: &Model, examples: &[NerExample], batch_size: usize) -> Result<Vec<Vec<Tag>>> {
    let mut out = Vec::with_capacity(examples.len());
    let stack = (!model.stack.is_empty()).then_some(&model.stack);
    let idx: Vec<usize> = (0..examples.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let batch = collate_ner(chunk, examples, model.encoder.config.specials.pad)?;
        let hidden = encoder::encode(&model.encoder, &batch.tokens, false, None, stack)?;
        let logits = encoder::ner_head(&model.head, &hidden)?;
        let data = logits.data();
        let seq = batch.tokens.seq;
        for (b, &i) in chunk.iter().enumerate() {
            let e = &examples[i];
            let tags = e
                .aligned
                .word_starts
                .iter()
                .take(e.surviving_tags().len())
                .map(|p| {
                    let p = p.expect("surviving word");
                    let row = &data[(b * seq + p) * N_LABELS..(b * seq + p + 1) * N_LABELS];
                    let mut best = 0;
                    for k in 1..N_LABELS {
                        if row[k] > row[best] {
                            best = k;
                        }
                    }
                    Tag::from_id(best).expect("label id in range")
                })
                .collect();
            out.push(tags);
        }
    }
    Ok(out)
}

/// Span F1 of the model's predictions against gold tags, over surviving words.
pub fn evaluate_ner(model: &Model, examples: &[NerExample], batch_size: usize) -> Result<F1Report> {
    let pred = predict_ner(model, examples, batch_size)?;
    let gold: Vec<_> = examples.iter().map(|e| decode_bio(e.surviving_tags())).collect();
    let pred: Vec<_> = pred.iter().map(|t| decode_bio(t)).collect();
    span_f1(&gold, &pred)
}

/// Mean MLM loss per selected token on held-out sentences, with masking
/// drawn from a fixed stream so successive evaluations are comparable.
pub fn evaluate_mlm(model: &Model, sentences: &[Vec<u32>], mask: &MaskConfig, seed: u64, batch_size: usize) -> Result<f64> {
    let cfg = &model.encoder.config;
    let mut rng = RngStream::new(seed, EVAL_MASK_STREAM);
    let mut total = 0.0f64;
    let mut count = 0usize;
    let idx: Vec<usize> = (0..sentences.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let batch = collate_mlm(chunk, sentences, cfg, mask, &mut rng)?;
        let mut g: Graph<f32> = Graph::new();
        let enc = BoundParams::constants(&mut g, &model.encoder.params);
        let stack = BoundStack::bind(&mut g, &model.stack, |_, _| false);
        let head = BoundParams::constants(&mut g, &model.head);
        let hidden = encode_graph(&mut g, cfg, &enc, Some(&stack), &batch.tokens, None)?;
        let picked = g.gather_rows(hidden, &batch.rows)?;
        let bias = head.get(names::MLM_OUTPUT_BIAS)?;
        let logits = mlm_logits_graph(&mut g, cfg, &enc, picked, bias)?;
        let keep = vec![false; batch.rows.len()];
        let loss = g.cross_entropy_masked(logits, &batch.targets, &keep)?;
        total += g.value(loss).data()[0] as f64 * batch.rows.len() as f64;
        count += batch.rows.len();
    }
    if count == 0 {
        return Err(Error::Data("no held-out sentences".into()));
    }
    Ok(total / count as f64)
}

/// Stream id for held-out masking, apart from the four training streams.
pub const EVAL_MASK_STREAM: u64 = 16;

/// Keeps the evaluation with the highest score; ties keep the earlier one.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BestTracker {
    pub best: Option<(u64, f64)>,
}

impl BestTracker {
    /// Returns true when `score` at `step` becomes the new best.
    pub fn offer(&mut self, step: u64, score: f64) -> bool {
        let better = match self.best {
            None => true,
            Some((_, s)) => score > s,
        };
        if better {
            self.best = Some((step, score));
        }
        better
    }
}
