//! Subcommands of the `adaptlab` binary.
//!
//! Exit codes: 0 success, 2 usage or data error, 3 stopped by the budget
//! with a resumable checkpoint, 4 numerical failure.

use std::path::{Path, PathBuf};
use std::time::Instant;

use adaptlab_core::adapters::adapter_param_ratio;
use adaptlab_core::bpe::train_subwords;
use adaptlab_core::encoder::{init_encoder, EncoderWeights};
use adaptlab_core::train::Mode;
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};

use crate::artifacts::{load_adapter_for, load_encoder, load_tokenizer, save_adapter, save_encoder, save_tokenizer};
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::corpus::{load_conll, load_text_corpus};
use crate::error::{exit, Error, Result};
use crate::manifest::{new_run_id, sha256_file, RunManifest, MANIFEST_FILE};
use crate::results::{mean_record, scores_of, write_report, ReportMode, ResultRecord, ResultsStore};
use crate::runner::{
    build_ner_model, init_language_adapter, mlm_sequences, ner_examples, seed_dir, train_language_adapter, train_ner,
    RunOptions, RunStatus, RunSummary,
};
use crate::synthetic::{generate, write_dataset, Sizes};

#[derive(Debug, Parser)]
#[command(name = "adaptlab", version, about = "Adapter pre-training and NER fine-tuning at desk scale")]
pub struct Cli {
    /// Directory that relative paths are resolved against.
    #[arg(long, global = true, default_value = ".")]
    pub workdir: PathBuf,
    /// More log output (repeat for debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Learn a byte-level BPE tokenizer from a text corpus.
    TokenizerTrain(TokenizerTrain),
    /// Pre-train a language adapter with masked language modeling.
    AdapterPretrain(AdapterPretrain),
    /// Fine-tune for NER, fully or through adapters.
    NerFinetune(NerFinetune),
    /// Render the results store as a table.
    Report(Report),
    #[command(hide = true)]
    MakeSynthetic(MakeSynthetic),
}

#[derive(Debug, Args)]
pub struct TokenizerTrain {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub vocab_size: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Recorded in the manifest; training itself is deterministic.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct EncoderSource {
    /// Existing encoder weights.
    #[arg(long, conflicts_with = "init_config")]
    pub encoder: Option<PathBuf>,
    /// Initialize a fresh encoder with the shape in this config file.
    #[arg(long)]
    pub init_config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct Budget {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Wall-clock limit; overrides the config's budget_seconds.
    #[arg(long)]
    pub budget_seconds: Option<f64>,
    /// Resume although the config differs from the checkpoint's.
    #[arg(long)]
    pub allow_config_change: bool,
}

#[derive(Debug, Args)]
pub struct AdapterPretrain {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Held-out sentences for adapter selection.
    #[arg(long)]
    pub dev: Option<PathBuf>,
    #[arg(long)]
    pub tokenizer: PathBuf,
    #[command(flatten)]
    pub source: EncoderSource,
    #[arg(long)]
    pub adapter_name: String,
    #[command(flatten)]
    pub budget: Budget,
    /// Checkpoint to continue from.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long, default_value = "runs/adapter")]
    pub run_dir: PathBuf,
    /// Adapter output; defaults to `<run-dir>/<name>.adapter`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum NerMode {
    Baseline,
    Adapter,
}

#[derive(Debug, Args)]
pub struct NerFinetune {
    #[arg(long, value_enum)]
    pub mode: NerMode,
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub dev: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long)]
    pub tokenizer: PathBuf,
    #[command(flatten)]
    pub source: EncoderSource,
    #[arg(long)]
    pub language_adapter: Option<PathBuf>,
    /// Train the language adapter itself instead of a stacked task adapter.
    #[arg(long)]
    pub unfreeze_language_adapter: bool,
    #[command(flatten)]
    pub budget: Budget,
    #[arg(long, default_value_t = 3)]
    pub seeds: u64,
    /// Language code the results are filed under.
    #[arg(long)]
    pub language: String,
    #[arg(long, default_value = "results")]
    pub results: PathBuf,
    #[arg(long, default_value = "runs/ner")]
    pub run_dir: PathBuf,
    /// Continue seeds that stopped with a checkpoint.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args)]
pub struct Report {
    #[arg(long)]
    pub results: PathBuf,
    /// Text table; the structured form goes to `<out>.json`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MakeSynthetic {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "syn")]
    pub language: String,
    #[arg(long, default_value_t = 1000)]
    pub text_train: usize,
    #[arg(long, default_value_t = 200)]
    pub text_dev: usize,
    #[arg(long, default_value_t = 800)]
    pub ner_train: usize,
    #[arg(long, default_value_t = 200)]
    pub ner_dev: usize,
    #[arg(long, default_value_t = 200)]
    pub ner_test: usize,
}

struct Ctx {
    workdir: PathBuf,
}

impl Ctx {
    fn path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.workdir.join(p)
        }
    }
}

/// Runs the parsed command and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let ctx = Ctx {
        workdir: cli.workdir.clone(),
    };
    let result = match cli.command {
        Command::TokenizerTrain(a) => tokenizer_train(&ctx, a),
        Command::AdapterPretrain(a) => adapter_pretrain(&ctx, a),
        Command::NerFinetune(a) => ner_finetune(&ctx, a),
        Command::Report(a) => report(&ctx, a),
        Command::MakeSynthetic(a) => make_synthetic(&ctx, a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn tokenizer_train(ctx: &Ctx, a: TokenizerTrain) -> Result<i32> {
    let corpus_path = ctx.path(&a.corpus);
    let out = ctx.path(&a.out);
    let corpus = load_text_corpus(&corpus_path)?;
    let outcome = train_subwords(corpus.sentences.iter().map(String::as_str), a.vocab_size)?;
    if let Some(w) = &outcome.warning {
        warn!("{w}");
    }
    save_tokenizer(&outcome.model, &out)?;
    let mut config = std::collections::BTreeMap::new();
    config.insert("vocab_size".into(), a.vocab_size.to_string());
    config.insert("seed".into(), a.seed.to_string());
    let mut m = RunManifest::new(&new_run_id(&sha256_file(&corpus_path)?, a.seed), "tokenizer-train", config);
    m.add_input(&corpus_path)?;
    m.add_output(&out)?;
    m.exit_status = exit::SUCCESS;
    let mut mpath = out.as_os_str().to_owned();
    mpath.push(".manifest.json");
    m.write(Path::new(&mpath))?;
    info!("tokenizer with {} entries written to {}", outcome.model.vocab_size(), out.display());
    Ok(exit::SUCCESS)
}

fn load_config(ctx: &Ctx, b: &Budget) -> Result<RunConfig> {
    let path = b.config.as_ref().map(|p| ctx.path(p));
    let mut c = RunConfig::load(path.as_deref())?;
    if let Some(s) = b.budget_seconds {
        c.budget_seconds = Some(s);
    }
    Ok(c)
}

/// Loads or initializes the encoder for `tokenizer`. A fresh encoder is also
/// written to `save_to`.
fn encoder_for(
    ctx: &Ctx,
    src: &EncoderSource,
    tok: &adaptlab_core::bpe::SubwordModel,
    save_to: &Path,
    manifest: &mut RunManifest,
) -> Result<EncoderWeights> {
    let enc = match (&src.encoder, &src.init_config) {
        (Some(p), None) => {
            let p = ctx.path(p);
            manifest.add_input(&p)?;
            load_encoder(&p)?
        }
        (None, Some(p)) => {
            let p = ctx.path(p);
            manifest.add_input(&p)?;
            let shape = RunConfig::load(Some(&p))?;
            let cfg = shape.encoder_config(tok.vocab_size(), tok.vocab_hash())?;
            let enc = init_encoder(&cfg, shape.seed)?;
            save_encoder(&enc, save_to)?;
            manifest.add_output(save_to)?;
            enc
        }
        _ => return Err(Error::Usage("pass exactly one of --encoder or --init-config".into())),
    };
    if enc.config.vocab_size != tok.vocab_size()
        || (enc.config.vocab_hash != 0 && enc.config.vocab_hash != tok.vocab_hash())
    {
        return Err(Error::Usage("tokenizer vocabulary does not match the encoder".into()));
    }
    Ok(enc)
}

fn finish(manifest: &mut RunManifest, path: &Path, summary: &RunSummary) -> Result<i32> {
    let code = match summary.status {
        RunStatus::Completed => exit::SUCCESS,
        RunStatus::Resumable => exit::RESUMABLE,
    };
    manifest.exit_status = code;
    manifest.add_output(&summary.metrics)?;
    manifest.add_output(&summary.checkpoint)?;
    manifest.write(path)?;
    Ok(code)
}

fn adapter_pretrain(ctx: &Ctx, a: AdapterPretrain) -> Result<i32> {
    let mut run_cfg = load_config(ctx, &a.budget)?;
    let mode = Mode::MlmAdapter;
    let train_cfg = run_cfg.train_config(mode)?;
    let resume = a.resume.as_ref().map(|p| ctx.path(p));
    let run_dir = match &resume {
        Some(p) => p.parent().map(Path::to_path_buf).unwrap_or_default(),
        None => ctx.path(&a.run_dir),
    };
    let run_id = match &resume {
        Some(p) => Checkpoint::load(p)?.run_id,
        None => new_run_id(&run_cfg.hash(mode), run_cfg.seed),
    };
    run_cfg.halt_after_steps = run_cfg.halt_after_steps.filter(|_| resume.is_none());
    let mut manifest = RunManifest::new(&run_id, "adapter-pretrain", run_cfg.snapshot());
    let corpus_path = ctx.path(&a.corpus);
    let tok_path = ctx.path(&a.tokenizer);
    manifest.add_input(&corpus_path)?;
    manifest.add_input(&tok_path)?;
    let tok = load_tokenizer(&tok_path)?;
    let corpus = load_text_corpus(&corpus_path)?;
    corpus.require_nonempty()?;
    let enc = encoder_for(ctx, &a.source, &tok, &run_dir.join("encoder.apfw"), &mut manifest)?;
    let adapter_cfg = run_cfg.adapter_config(&a.adapter_name)?;
    info!(
        "adapter {} holds {:.3}% of the encoder's parameters",
        a.adapter_name,
        100.0 * adapter_param_ratio(&enc.config, &adapter_cfg)
    );
    let adapter = init_language_adapter(&enc.config, &adapter_cfg, run_cfg.seed)?;
    let model = adaptlab_core::train::Model::mlm(enc, adapter)?;
    let train = mlm_sequences(&tok, &corpus.sentences, train_cfg.max_len)?;
    let dev = match &a.dev {
        Some(p) => {
            let p = ctx.path(p);
            manifest.add_input(&p)?;
            mlm_sequences(&tok, &load_text_corpus(&p)?.sentences, train_cfg.max_len)?
        }
        None => Vec::new(),
    };
    let mut opts = RunOptions::new(&run_dir, &run_id, run_cfg.hash(mode));
    opts.halt_after_steps = run_cfg.halt_after_steps;
    opts.resume = resume;
    opts.allow_config_change = a.budget.allow_config_change;
    let (model, summary) = train_language_adapter(train, &dev, model, train_cfg, &opts)?;
    if summary.status == RunStatus::Completed {
        let out = a
            .out
            .map(|p| ctx.path(&p))
            .unwrap_or_else(|| run_dir.join(format!("{}.adapter", a.adapter_name)));
        let trained = &model.stack.members()[0].weights;
        save_adapter(trained, &out)?;
        manifest.add_output(&out)?;
        if let (Some(first), Some(last)) = (summary.first_smoothed_loss, summary.final_smoothed_loss) {
            info!("smoothed MLM loss {first:.4} -> {last:.4}");
        }
    } else {
        eprintln!(
            "budget reached at step {}; resume with --resume {}",
            summary.steps,
            summary.checkpoint.display()
        );
    }
    finish(&mut manifest, &run_dir.join(MANIFEST_FILE), &summary)
}

fn ner_finetune(ctx: &Ctx, a: NerFinetune) -> Result<i32> {
    let mode = match a.mode {
        NerMode::Baseline => Mode::NerBaselineFull,
        NerMode::Adapter => Mode::NerAdapter,
    };
    match (a.mode, &a.language_adapter) {
        (NerMode::Adapter, None) => return Err(Error::Usage("--mode adapter requires --language-adapter".into())),
        (NerMode::Baseline, Some(_)) => {
            return Err(Error::Usage("--mode baseline does not take --language-adapter".into()))
        }
        (NerMode::Baseline, None) if a.unfreeze_language_adapter => {
            return Err(Error::Usage("--unfreeze-language-adapter needs --mode adapter".into()))
        }
        _ => {}
    }
    if a.seeds == 0 {
        return Err(Error::Usage("--seeds must be at least 1".into()));
    }
    let mut run_cfg = load_config(ctx, &a.budget)?;
    run_cfg.unfreeze_language_adapter |= a.unfreeze_language_adapter;
    let base_dir = ctx.path(&a.run_dir);
    let tok_path = ctx.path(&a.tokenizer);
    let tok = load_tokenizer(&tok_path)?;
    let split = |p: &PathBuf| -> Result<Vec<_>> { load_conll(&ctx.path(p)) };
    let (train_s, dev_s, test_s) = (split(&a.train)?, split(&a.dev)?, split(&a.test)?);
    if train_s.is_empty() {
        return Err(Error::Core(adaptlab_core::Error::Data("empty train split".into())));
    }
    let max_len = run_cfg.max_len;
    let train = ner_examples(&tok, &train_s, max_len)?;
    let dev = ner_examples(&tok, &dev_s, max_len)?;
    let test = ner_examples(&tok, &test_s, max_len)?;
    let store = ResultsStore::new(ctx.path(&a.results));
    let report_mode = match a.mode {
        NerMode::Baseline => ReportMode::Baseline,
        NerMode::Adapter => ReportMode::Adapter,
    };
    let started = Instant::now();
    let mut records = Vec::new();
    let mut code = exit::SUCCESS;
    for k in 0..a.seeds {
        let mut cfg = run_cfg.clone();
        cfg.seed = run_cfg.seed + k;
        if let Some(b) = run_cfg.budget_seconds {
            cfg.budget_seconds = Some((b - started.elapsed().as_secs_f64()).max(0.0));
        }
        let dir = seed_dir(&base_dir, k);
        let ckpt = dir.join(crate::runner::CHECKPOINT_FILE);
        let summary_path = dir.join("summary.json");
        if a.resume && summary_path.exists() {
            let text = std::fs::read_to_string(&summary_path).map_err(|e| Error::io(&summary_path, e))?;
            let rec: ResultRecord =
                serde_json::from_str(&text).map_err(|e| Error::line(&summary_path, e.line(), e.to_string()))?;
            records.push(rec);
            continue;
        }
        let resume = (a.resume && ckpt.exists()).then_some(ckpt.clone());
        if resume.is_some() {
            cfg.halt_after_steps = None;
        }
        let run_id = match &resume {
            Some(p) => Checkpoint::load(p)?.run_id,
            None => new_run_id(&cfg.hash(mode), cfg.seed),
        };
        let mut manifest = RunManifest::new(&run_id, "ner-finetune", cfg.snapshot());
        for p in [&a.train, &a.dev, &a.test] {
            manifest.add_input(&ctx.path(p))?;
        }
        manifest.add_input(&tok_path)?;
        let train_cfg = cfg.train_config(mode)?;
        let enc = encoder_for(ctx, &a.source, &tok, &dir.join("encoder.apfw"), &mut manifest)?;
        let language = match &a.language_adapter {
            Some(p) => {
                let p = ctx.path(p);
                manifest.add_input(&p)?;
                Some(load_adapter_for(&p, &enc.config)?)
            }
            None => None,
        };
        let model = build_ner_model(&train_cfg, enc, language, &format!("{}-ner", a.language))?;
        let mut opts = RunOptions::new(&dir, &run_id, cfg.hash(mode));
        opts.halt_after_steps = cfg.halt_after_steps;
        opts.resume = resume;
        opts.allow_config_change = a.budget.allow_config_change;
        let (model, summary) = train_ner(train.clone(), &dev, &test, model, train_cfg, &opts)?;
        if summary.status == RunStatus::Resumable {
            eprintln!(
                "seed {} stopped at step {}; rerun with --resume to continue",
                cfg.seed, summary.steps
            );
            code = finish(&mut manifest, &dir.join(MANIFEST_FILE), &summary)?;
            break;
        }
        for m in model.stack.members().iter().filter(|m| m.trainable) {
            let p = dir.join(format!("{}.adapter", m.weights.config.name));
            save_adapter(&m.weights, &p)?;
            manifest.add_output(&p)?;
        }
        let rec = ResultRecord {
            language: a.language.clone(),
            mode: report_mode,
            seed: Some(cfg.seed),
            dev_f1: summary.dev.as_ref().map(|r| r.f1()),
            test_f1: summary.test.as_ref().map(|r| r.f1()),
            dev_scores: summary.dev.as_ref().map(scores_of).unwrap_or_default(),
            test_scores: summary.test.as_ref().map(scores_of).unwrap_or_default(),
        };
        let out = store.write(&rec)?;
        manifest.add_output(&out)?;
        let text = serde_json::to_string_pretty(&rec).map_err(|e| Error::Config(e.to_string()))?;
        crate::container::write_atomic(&summary_path, text.as_bytes())?;
        println!(
            "{} {} seed {}: dev F1 {:.4}, test F1 {:.4}",
            a.language,
            report_mode.as_str(),
            cfg.seed,
            rec.dev_f1.unwrap_or(0.0),
            rec.test_f1.unwrap_or(0.0)
        );
        records.push(rec);
        finish(&mut manifest, &dir.join(MANIFEST_FILE), &summary)?;
    }
    if code == exit::SUCCESS {
        let mean = mean_record(&records).expect("at least one seed");
        store.write(&mean)?;
        println!(
            "{} {} mean over {} seeds: dev F1 {:.4}, test F1 {:.4}",
            a.language,
            report_mode.as_str(),
            records.len(),
            mean.dev_f1.unwrap_or(0.0),
            mean.test_f1.unwrap_or(0.0)
        );
    }
    Ok(code)
}

fn report(ctx: &Ctx, a: Report) -> Result<i32> {
    let store = ResultsStore::new(ctx.path(&a.results));
    let out = ctx.path(&a.out);
    let table = write_report(&store, &out)?;
    for w in &table.warnings {
        warn!("{w}");
    }
    print!("{}", table.render_text());
    Ok(exit::SUCCESS)
}

fn make_synthetic(ctx: &Ctx, a: MakeSynthetic) -> Result<i32> {
    let sizes = Sizes {
        text_train: a.text_train,
        text_dev: a.text_dev,
        ner_train: a.ner_train,
        ner_dev: a.ner_dev,
        ner_test: a.ner_test,
    };
    let out = ctx.path(&a.out);
    write_dataset(&out, &a.language, &generate(a.seed, sizes))?;
    info!("synthetic dataset written to {}", out.display());
    Ok(exit::SUCCESS)
}
