//! Budgeted, checkpointed training loops.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use adaptlab_core::bpe::SubwordModel;
use adaptlab_core::eval::F1Report;
use adaptlab_core::params::ParamStore;
use adaptlab_core::tagging::{align_labels, EntityType, TaggedSentence};
use adaptlab_core::train::{
    evaluate_mlm, evaluate_ner, BestTracker, Mode, Model, NerExample, TrainConfig, TrainData, Trainer,
};
use adaptlab_core::Tensor;
use log::{info, warn};

use crate::checkpoint::{Checkpoint, Progress};
use crate::error::{Error, Result};
use crate::manifest::RunLock;
use crate::metrics::{MetricRecord, MetricsSink};

pub const CHECKPOINT_FILE: &str = "checkpoint.apfw";
pub const METRICS_FILE: &str = "metrics.jsonl";
/// Training losses averaged into the smoothed loss.
pub const SMOOTHING_WINDOW: usize = 10;

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub run_dir: PathBuf,
    pub run_id: String,
    pub config_hash: String,
    /// Stop with a checkpoint after this many completed steps.
    pub halt_after_steps: Option<u64>,
    /// Checkpoint to continue from.
    pub resume: Option<PathBuf>,
    pub allow_config_change: bool,
}

impl RunOptions {
    pub fn new(run_dir: impl Into<PathBuf>, run_id: impl Into<String>, config_hash: impl Into<String>) -> Self {
        Self {
            run_dir: run_dir.into(),
            run_id: run_id.into(),
            config_hash: config_hash.into(),
            halt_after_steps: None,
            resume: None,
            allow_config_change: false,
        }
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.run_dir.join(CHECKPOINT_FILE)
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.run_dir.join(METRICS_FILE)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunStatus {
    Completed,
    /// Stopped early with a checkpoint to resume from.
    Resumable,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub status: RunStatus,
    pub run_id: String,
    pub steps: u64,
    /// Mean of the first `SMOOTHING_WINDOW` training losses.
    pub first_smoothed_loss: Option<f64>,
    /// Mean of the last `SMOOTHING_WINDOW` training losses.
    pub final_smoothed_loss: Option<f64>,
    /// Step and score of the retained evaluation.
    pub best: Option<(u64, f64)>,
    pub dev: Option<F1Report>,
    pub test: Option<F1Report>,
    pub dev_mlm_loss: Option<f64>,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub elapsed_seconds: f64,
}

/// Held-out data evaluated during training.
enum Eval<'a> {
    Mlm(&'a [Vec<u32>]),
    Ner(&'a [NerExample]),
}

impl Eval<'_> {
    fn is_empty(&self) -> bool {
        match self {
            Eval::Mlm(d) => d.is_empty(),
            Eval::Ner(d) => d.is_empty(),
        }
    }

    /// Metric name, value and selection score (higher is better).
    fn run(&self, model: &Model, config: &TrainConfig) -> Result<(&'static str, f64, f64)> {
        match self {
            Eval::Mlm(d) => {
                let loss = evaluate_mlm(model, d, &config.mask, config.seed, config.batch_size)?;
                Ok(("mlm_loss", loss, -loss))
            }
            Eval::Ner(d) => {
                let f1 = evaluate_ner(model, d, config.batch_size)?.f1();
                Ok(("span_f1", f1, f1))
            }
        }
    }
}

fn smoothed(losses: &[f32]) -> Option<f64> {
    (losses.len() >= SMOOTHING_WINDOW).then(|| {
        let w = &losses[losses.len() - SMOOTHING_WINDOW..];
        w.iter().map(|&l| l as f64).sum::<f64>() / SMOOTHING_WINDOW as f64
    })
}

fn trainable_snapshot(trainer: &Trainer) -> Result<ParamStore> {
    let names: BTreeSet<String> = trainer.trainable().iter().map(|r| r.qualified()).collect();
    let mut out = ParamStore::new();
    for (n, t) in trainer.model.qualified_params() {
        if names.contains(&n) {
            out.insert(n, t.clone())?;
        }
    }
    Ok(out)
}

fn qualified_mut<'a>(model: &'a mut Model, name: &str) -> Option<&'a mut Tensor> {
    if let Some(rest) = name.strip_prefix("encoder/") {
        return model.encoder.params.get_mut(rest);
    }
    if let Some(rest) = name.strip_prefix("head/") {
        return model.head.get_mut(rest);
    }
    let (adapter, param) = name.strip_prefix("adapter/")?.split_once('/')?;
    model
        .stack
        .members_mut()
        .iter_mut()
        .find(|m| m.weights.config.name == adapter)?
        .weights
        .params
        .get_mut(param)
}

/// Writes `params` (qualified names) back into `model`.
pub fn restore_params(model: &mut Model, params: &ParamStore) -> Result<()> {
    for (n, t) in params.iter() {
        let slot = qualified_mut(model, n).ok_or_else(|| Error::Config(format!("model has no parameter {n}")))?;
        *slot = t.clone();
    }
    Ok(())
}

struct Loop<'a> {
    opts: &'a RunOptions,
    trainer: Trainer,
    progress: Progress,
    sink: MetricsSink,
    start: Instant,
}

impl Loop<'_> {
    fn record(&mut self, step: u64, split: &str, metric: &str, value: f64) -> Result<()> {
        self.sink.write(&MetricRecord {
            run_id: self.opts.run_id.clone(),
            step,
            wall_time_s: self.start.elapsed().as_secs_f64(),
            split: split.into(),
            metric: metric.into(),
            value,
        })
    }

    fn checkpoint(&mut self) -> Result<()> {
        self.sink.flush()?;
        let ck = Checkpoint {
            mode: self.trainer.config.mode,
            config_hash: self.opts.config_hash.clone(),
            run_id: self.opts.run_id.clone(),
            model: self.trainer.model.clone(),
            state: self.trainer.state(),
            metrics_offset: self.sink.offset(),
            progress: self.progress.clone(),
        };
        ck.save(&self.opts.checkpoint_path())
    }
}

struct Finished {
    model: Model,
    status: RunStatus,
    steps: u64,
    progress: Progress,
    start: Instant,
}

/// Drives `trainer` to `max_steps`, the budget, or the halt step.
fn run(
    opts: &RunOptions,
    config: TrainConfig,
    fresh: Model,
    data: TrainData,
    eval: Eval<'_>,
) -> Result<Finished> {
    let start = Instant::now();
    let (trainer, progress, offset) = match &opts.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            ck.check_resumable(config.mode, &opts.config_hash, opts.allow_config_change)?;
            info!("resuming {} from step {}", ck.run_id, ck.state.step);
            let t = Trainer::resume(config, ck.model, data, ck.state)?;
            (t, ck.progress, Some(ck.metrics_offset))
        }
        None => (Trainer::new(config, fresh, data)?, Progress::default(), Some(0)),
    };
    let sink = MetricsSink::open(&opts.metrics_path(), offset)?;
    let mut lp = Loop {
        opts,
        trainer,
        progress,
        sink,
        start,
    };
    let cfg = lp.trainer.config.clone();
    let budget = cfg.wall_clock_budget_seconds;
    let mut best = BestTracker {
        best: lp.progress.best,
    };
    let mut slowest_step = 0.0f64;

    while !lp.trainer.is_done() {
        let step = lp.trainer.step_count();
        let halted = opts.halt_after_steps.is_some_and(|h| step >= h);
        let over_budget = budget.is_some_and(|b| start.elapsed().as_secs_f64() + slowest_step >= b);
        if halted || over_budget {
            lp.checkpoint()?;
            info!("stopped at step {step}; resumable from {}", opts.checkpoint_path().display());
            return Ok(Finished {
                steps: step,
                model: lp.trainer.model,
                status: RunStatus::Resumable,
                progress: lp.progress,
                start,
            });
        }

        let t0 = Instant::now();
        let out = lp.trainer.step()?;
        slowest_step = slowest_step.max(t0.elapsed().as_secs_f64());
        let step = out.step;

        let losses = &mut lp.progress.recent_losses;
        losses.push(out.loss);
        if losses.len() > SMOOTHING_WINDOW {
            losses.remove(0);
        }
        let smooth = smoothed(losses);
        if step == SMOOTHING_WINDOW as u64 {
            lp.progress.first_smoothed = smooth;
        }

        let done = lp.trainer.is_done();
        if step % cfg.log_interval_steps == 0 || done {
            lp.record(step, "train", "loss", out.loss as f64)?;
            if let Some(s) = smooth {
                lp.record(step, "train", "loss_smoothed", s)?;
            }
            lp.record(step, "train", "grad_norm", out.grad_norm)?;
            lp.record(step, "train", "learning_rate", out.learning_rate as f64)?;
        }
        if (step % cfg.eval_interval_steps == 0 || done) && !eval.is_empty() {
            let (metric, value, score) = eval.run(&lp.trainer.model, &cfg)?;
            lp.record(step, "dev", metric, value)?;
            if best.offer(step, score) {
                lp.progress.best = best.best;
                lp.progress.best_params = trainable_snapshot(&lp.trainer)?;
            }
        }
        if step % cfg.checkpoint_interval_steps == 0 || done {
            lp.checkpoint()?;
        }
    }
    lp.sink.flush()?;
    Ok(Finished {
        steps: lp.trainer.step_count(),
        model: lp.trainer.model,
        status: RunStatus::Completed,
        progress: lp.progress,
        start,
    })
}

fn summary(
    opts: &RunOptions,
    status: RunStatus,
    steps: u64,
    progress: &Progress,
    start: Instant,
) -> RunSummary {
    RunSummary {
        status,
        run_id: opts.run_id.clone(),
        steps,
        first_smoothed_loss: progress.first_smoothed,
        final_smoothed_loss: smoothed(&progress.recent_losses),
        best: progress.best,
        dev: None,
        test: None,
        dev_mlm_loss: None,
        checkpoint: opts.checkpoint_path(),
        metrics: opts.metrics_path(),
        elapsed_seconds: start.elapsed().as_secs_f64(),
    }
}

/// MLM pre-training of the model's trainable adapter. With a dev set, the
/// adapter with the lowest dev loss is kept.
pub fn train_language_adapter(
    train: Vec<Vec<u32>>,
    dev: &[Vec<u32>],
    model: Model,
    config: TrainConfig,
    opts: &RunOptions,
) -> Result<(Model, RunSummary)> {
    if config.mode != Mode::MlmAdapter {
        return Err(Error::Usage(format!("mode {} is not mlm_adapter", config.mode.as_str())));
    }
    let _lock = RunLock::acquire(&opts.run_dir)?;
    let cfg = config.clone();
    let Finished {
        mut model,
        status,
        steps,
        progress,
        start,
    } = run(opts, config, model, TrainData::Mlm(train), Eval::Mlm(dev))?;
    let mut s = summary(opts, status, steps, &progress, start);
    if status == RunStatus::Completed && !dev.is_empty() {
        restore_params(&mut model, &progress.best_params)?;
        s.dev_mlm_loss = Some(evaluate_mlm(&model, dev, &cfg.mask, cfg.seed, cfg.batch_size)?);
    }
    Ok((model, s))
}

/// NER fine-tuning in baseline or adapter mode. Keeps the parameters with the
/// best dev span F1 (earliest on ties) and scores them on dev and test.
pub fn train_ner(
    train: Vec<NerExample>,
    dev: &[NerExample],
    test: &[NerExample],
    model: Model,
    config: TrainConfig,
    opts: &RunOptions,
) -> Result<(Model, RunSummary)> {
    if config.mode == Mode::MlmAdapter {
        return Err(Error::Usage("train_ner needs a NER mode".into()));
    }
    check_label_sets(&train, &[("dev", dev), ("test", test)])?;
    let _lock = RunLock::acquire(&opts.run_dir)?;
    let cfg = config.clone();
    let Finished {
        mut model,
        status,
        steps,
        progress,
        start,
    } = run(opts, config, model, TrainData::Ner(train), Eval::Ner(dev))?;
    let mut s = summary(opts, status, steps, &progress, start);
    if status == RunStatus::Completed {
        restore_params(&mut model, &progress.best_params)?;
        if !dev.is_empty() {
            s.dev = Some(evaluate_ner(&model, dev, cfg.batch_size)?);
        }
        if !test.is_empty() {
            s.test = Some(evaluate_ner(&model, test, cfg.batch_size)?);
        }
    }
    Ok((model, s))
}

/// Dev and test may not use entity types the training split never shows.
fn check_label_sets(train: &[NerExample], others: &[(&str, &[NerExample])]) -> Result<()> {
    let types = |xs: &[NerExample]| -> BTreeSet<EntityType> {
        xs.iter().flat_map(|e| e.tags.iter().filter_map(|t| t.entity())).collect()
    };
    let known = types(train);
    for (name, xs) in others {
        let extra: Vec<_> = types(xs).difference(&known).map(|t| t.as_str()).collect();
        if !extra.is_empty() {
            return Err(Error::Core(adaptlab_core::Error::Schema(format!(
                "{name} split uses entity types absent from train: {}",
                extra.join(", ")
            ))));
        }
    }
    Ok(())
}

/// Tokenizes sentences for MLM, `[cls] … [sep]` truncated to `max_len`.
pub fn mlm_sequences(tokenizer: &SubwordModel, sentences: &[String], max_len: usize) -> Result<Vec<Vec<u32>>> {
    let mut truncated = 0;
    let mut out = Vec::with_capacity(sentences.len());
    for s in sentences {
        let (ids, cut) = tokenizer.encode_sentence(s, max_len)?;
        truncated += cut as usize;
        out.push(ids);
    }
    if truncated > 0 {
        info!("{truncated} of {} sentences truncated to {max_len} tokens", sentences.len());
    }
    Ok(out)
}

/// Aligns tagged sentences to subtokens; truncated words are reported.
pub fn ner_examples(tokenizer: &SubwordModel, sentences: &[TaggedSentence], max_len: usize) -> Result<Vec<NerExample>> {
    let mut dropped = 0;
    let mut out = Vec::with_capacity(sentences.len());
    for s in sentences {
        let aligned = align_labels(tokenizer, s, max_len)?;
        dropped += aligned.dropped_words();
        out.push(NerExample {
            aligned,
            tags: s.tags.clone(),
        });
    }
    if dropped > 0 {
        warn!("{dropped} words truncated away; they are left out of evaluation");
    }
    Ok(out)
}

/// Path of the run directory for one seed of a multi-seed run.
pub fn seed_dir(base: &Path, seed: u64) -> PathBuf {
    base.join(format!("seed-{seed}"))
}

/// Seed offsets so encoder, adapters and head draw from unrelated streams.
const LANGUAGE_ADAPTER_SALT: u64 = 0x6c61_6e67;
const TASK_ADAPTER_SALT: u64 = 0x7461_736b;
const HEAD_STREAM: u64 = 17;

pub fn init_language_adapter(
    encoder: &adaptlab_core::encoder::EncoderConfig,
    adapter: &adaptlab_core::adapters::AdapterConfig,
    seed: u64,
) -> Result<adaptlab_core::adapters::AdapterWeights> {
    Ok(adaptlab_core::adapters::init_adapter(encoder, adapter, seed ^ LANGUAGE_ADAPTER_SALT)?)
}

/// Model for a NER run. `language` must be given exactly in adapter mode.
/// The task adapter reuses the language adapter's shape under `task_name`.
pub fn build_ner_model(
    config: &TrainConfig,
    encoder: adaptlab_core::encoder::EncoderWeights,
    language: Option<adaptlab_core::adapters::AdapterWeights>,
    task_name: &str,
) -> Result<Model> {
    let mut rng = adaptlab_core::rng::RngStream::new(config.seed, HEAD_STREAM);
    let head = adaptlab_core::encoder::init_ner_head(
        encoder.config.d_model,
        adaptlab_core::tagging::N_LABELS,
        &mut rng,
    );
    match (config.mode, language) {
        (Mode::NerBaselineFull, None) => Ok(Model::ner_baseline(encoder, head)),
        (Mode::NerBaselineFull, Some(_)) => Err(Error::Usage("baseline mode takes no language adapter".into())),
        (Mode::NerAdapter, None) => Err(Error::Usage("adapter mode needs a language adapter".into())),
        (Mode::NerAdapter, Some(lang)) => {
            lang.fingerprint.check(&encoder.config)?;
            let task = if config.unfreeze_language_adapter {
                None
            } else {
                let task_cfg = adaptlab_core::adapters::AdapterConfig {
                    name: task_name.to_string(),
                    ..lang.config.clone()
                };
                Some(adaptlab_core::adapters::init_adapter(
                    &encoder.config,
                    &task_cfg,
                    config.seed ^ TASK_ADAPTER_SALT,
                )?)
            };
            Ok(Model::ner_adapter(encoder, lang, task, head)?)
        }
        (Mode::MlmAdapter, _) => Err(Error::Usage("mlm_adapter is not a NER mode".into())),
    }
}
