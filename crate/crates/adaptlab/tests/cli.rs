use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use adaptlab::checkpoint::Checkpoint;
use adaptlab::metrics::read_metrics;
use adaptlab::results::{parse_text_table, ReportFile, ResultsStore};

const TINY: &str = "\
d_model = 16
n_layers = 1
n_heads = 2
d_ff = 32
max_positions = 64
max_len = 64
batch_size = 8
max_steps = 20
warmup_steps = 2
log_interval_steps = 5
eval_interval_steps = 10
checkpoint_interval_steps = 10
learning_rate = 0.01
";

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_adaptlab"))
}

fn run(dir: &Path, args: &[&str]) -> Output {
    let out = bin().arg("--workdir").arg(dir).args(args).output().unwrap();
    if !out.status.success() {
        eprintln!("{}", String::from_utf8_lossy(&out.stderr));
    }
    out
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

/// Workdir with a small synthetic dataset, a tokenizer and the tiny config.
fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = run(
        d,
        &[
            "make-synthetic",
            "--out",
            "data",
            "--seed",
            "3",
            "--text-train",
            "120",
            "--text-dev",
            "20",
            "--ner-train",
            "60",
            "--ner-dev",
            "20",
            "--ner-test",
            "20",
        ],
    );
    assert_eq!(code(&o), 0);
    fs::write(d.join("tiny.toml"), TINY).unwrap();
    let o = run(
        d,
        &["tokenizer-train", "--corpus", "data/text_train.txt", "--vocab-size", "300", "--out", "tok.json"],
    );
    assert_eq!(code(&o), 0);
    dir
}

fn pretrain(d: &Path, run_dir: &str, extra: &[&str]) -> Output {
    let mut args = vec![
        "adapter-pretrain",
        "--corpus",
        "data/text_train.txt",
        "--dev",
        "data/text_dev.txt",
        "--tokenizer",
        "tok.json",
        "--init-config",
        "tiny.toml",
        "--config",
        "tiny.toml",
        "--adapter-name",
        "syn",
        "--run-dir",
        run_dir,
    ];
    args.extend_from_slice(extra);
    run(d, &args)
}

fn without_wall_time(path: &Path) -> Vec<(u64, String, String, u64)> {
    read_metrics(path)
        .unwrap()
        .into_iter()
        .map(|r| (r.step, r.split, r.metric, r.value.to_bits()))
        .collect()
}

#[test]
fn tokenizer_train_writes_manifest_and_is_idempotent() {
    let dir = setup();
    let d = dir.path();
    let first = fs::read(d.join("tok.json")).unwrap();
    assert!(d.join("tok.json.manifest.json").exists());
    let o = run(
        d,
        &["tokenizer-train", "--corpus", "data/text_train.txt", "--vocab-size", "300", "--out", "tok2.json"],
    );
    assert_eq!(code(&o), 0);
    assert_eq!(first, fs::read(d.join("tok2.json")).unwrap());
}

#[test]
fn adapter_pretrain_completes_and_is_idempotent() {
    let dir = setup();
    let d = dir.path();
    assert_eq!(code(&pretrain(d, "runs/a", &[])), 0);
    assert_eq!(code(&pretrain(d, "runs/b", &[])), 0);
    for f in ["syn.adapter", "encoder.apfw"] {
        let a = fs::read(d.join("runs/a").join(f)).unwrap();
        let b = fs::read(d.join("runs/b").join(f)).unwrap();
        assert!(a == b, "{f} differs between identical runs");
    }
    // The checkpoint also records the metrics byte offset, which depends on
    // the printed wall times; everything else must match.
    let a = Checkpoint::load(&d.join("runs/a/checkpoint.apfw")).unwrap();
    let b = Checkpoint::load(&d.join("runs/b/checkpoint.apfw")).unwrap();
    assert_eq!(a.run_id, b.run_id);
    assert_eq!(a.state, b.state);
    for ((na, ta), (nb, tb)) in a.model.qualified_params().into_iter().zip(b.model.qualified_params()) {
        assert_eq!(na, nb);
        assert!(ta.data().iter().zip(tb.data()).all(|(x, y)| x.to_bits() == y.to_bits()), "{na}");
    }
    assert_eq!(
        without_wall_time(&d.join("runs/a/metrics.jsonl")),
        without_wall_time(&d.join("runs/b/metrics.jsonl"))
    );
    let manifest = fs::read_to_string(d.join("runs/a/manifest.json")).unwrap();
    assert!(manifest.contains("\"exit_status\": 0"), "{manifest}");
    assert!(manifest.contains("\"d_model\": \"16\""), "{manifest}");
}

#[test]
fn zero_budget_exits_resumable_with_a_checkpoint() {
    let dir = setup();
    let d = dir.path();
    let o = pretrain(d, "runs/z", &["--budget-seconds", "0"]);
    assert_eq!(code(&o), 3);
    assert!(d.join("runs/z/checkpoint.apfw").exists());
    assert!(!d.join("runs/z/syn.adapter").exists());
}

#[test]
fn interrupted_run_resumes_to_identical_metrics() {
    let dir = setup();
    let d = dir.path();
    assert_eq!(code(&pretrain(d, "runs/full", &[])), 0);
    let halted = bin()
        .arg("--workdir")
        .arg(d)
        .env("ADAPTLAB_HALT_AFTER_STEPS", "7")
        .args([
            "adapter-pretrain",
            "--corpus",
            "data/text_train.txt",
            "--dev",
            "data/text_dev.txt",
            "--tokenizer",
            "tok.json",
            "--encoder",
            "runs/full/encoder.apfw",
            "--config",
            "tiny.toml",
            "--adapter-name",
            "syn",
            "--run-dir",
            "runs/part",
        ])
        .output()
        .unwrap();
    assert_eq!(code(&halted), 3, "{}", String::from_utf8_lossy(&halted.stderr));
    let o = bin()
        .arg("--workdir")
        .arg(d)
        .env("ADAPTLAB_HALT_AFTER_STEPS", "7")
        .args([
            "adapter-pretrain",
            "--corpus",
            "data/text_train.txt",
            "--dev",
            "data/text_dev.txt",
            "--tokenizer",
            "tok.json",
            "--encoder",
            "runs/full/encoder.apfw",
            "--config",
            "tiny.toml",
            "--adapter-name",
            "syn",
            "--resume",
            "runs/part/checkpoint.apfw",
        ])
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        fs::read(d.join("runs/full/syn.adapter")).unwrap(),
        fs::read(d.join("runs/part/syn.adapter")).unwrap()
    );
    assert_eq!(
        without_wall_time(&d.join("runs/full/metrics.jsonl")),
        without_wall_time(&d.join("runs/part/metrics.jsonl"))
    );
}

#[test]
fn resume_with_changed_config_is_refused() {
    let dir = setup();
    let d = dir.path();
    assert_eq!(code(&pretrain(d, "runs/r", &["--budget-seconds", "0"])), 3);
    fs::write(d.join("other.toml"), TINY.replace("learning_rate = 0.01", "learning_rate = 0.02")).unwrap();
    let args = |extra: &'static [&'static str]| {
        let mut v = vec![
            "adapter-pretrain",
            "--corpus",
            "data/text_train.txt",
            "--tokenizer",
            "tok.json",
            "--encoder",
            "runs/r/encoder.apfw",
            "--config",
            "other.toml",
            "--adapter-name",
            "syn",
            "--resume",
            "runs/r/checkpoint.apfw",
        ];
        v.extend_from_slice(extra);
        v
    };
    assert_eq!(code(&run(d, &args(&[]))), 2);
    assert_eq!(code(&run(d, &args(&["--allow-config-change"]))), 0);
}

#[test]
fn locked_run_directory_is_refused() {
    let dir = setup();
    let d = dir.path();
    fs::create_dir_all(d.join("runs/l")).unwrap();
    fs::write(d.join("runs/l/.lock"), "").unwrap();
    assert_eq!(code(&pretrain(d, "runs/l", &[])), 2);
}

fn finetune(d: &Path, mode: &str, extra: &[&str]) -> Output {
    let mut args = vec![
        "ner-finetune",
        "--mode",
        mode,
        "--train",
        "data/ner_train.conll",
        "--dev",
        "data/ner_dev.conll",
        "--test",
        "data/ner_test.conll",
        "--tokenizer",
        "tok.json",
        "--config",
        "tiny.toml",
        "--language",
        "syn",
        "--results",
        "results",
    ];
    args.extend_from_slice(extra);
    run(d, &args)
}

#[test]
fn ner_contract_violations_exit_2() {
    let dir = setup();
    let d = dir.path();
    assert_eq!(code(&pretrain(d, "runs/a", &[])), 0);
    let o = finetune(d, "adapter", &["--encoder", "runs/a/encoder.apfw", "--run-dir", "runs/x"]);
    assert_eq!(code(&o), 2);
    let o = finetune(
        d,
        "baseline",
        &["--encoder", "runs/a/encoder.apfw", "--language-adapter", "runs/a/syn.adapter", "--run-dir", "runs/y"],
    );
    assert_eq!(code(&o), 2);
    assert!(!d.join("results").exists());
}

#[test]
fn both_modes_fill_the_store_and_report() {
    let dir = setup();
    let d = dir.path();
    assert_eq!(code(&pretrain(d, "runs/a", &[])), 0);
    let o = finetune(d, "baseline", &["--encoder", "runs/a/encoder.apfw", "--run-dir", "runs/base"]);
    assert_eq!(code(&o), 0);
    let o = finetune(
        d,
        "adapter",
        &[
            "--encoder",
            "runs/a/encoder.apfw",
            "--language-adapter",
            "runs/a/syn.adapter",
            "--run-dir",
            "runs/ad",
            "--seeds",
            "1",
        ],
    );
    assert_eq!(code(&o), 0);

    for k in 0..3 {
        let m = d.join(format!("runs/base/seed-{k}/metrics.jsonl"));
        assert!(!read_metrics(&m).unwrap().is_empty(), "missing stream for seed {k}");
    }
    assert!(!d.join("runs/base/seed-3").exists());
    let records = ResultsStore::new(d.join("results")).load().unwrap();
    // Three seeds plus a mean for the baseline, one seed plus a mean for adapters.
    assert_eq!(records.len(), 6);
    assert_eq!(records.iter().filter(|r| r.seed.is_none()).count(), 2);
    for r in &records {
        assert!(r.dev_f1.is_some() && r.test_f1.is_some());
    }

    let o = run(d, &["report", "--results", "results", "--out", "report.txt"]);
    assert_eq!(code(&o), 0);
    let text = fs::read_to_string(d.join("report.txt")).unwrap();
    let rows = parse_text_table(&text).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0].0, "syn");
    assert_eq!(rows[1].0, "Average");
    assert_eq!(rows[0].1, rows[1].1);
    let json = ReportFile::parse(&fs::read_to_string(d.join("report.txt.json")).unwrap()).unwrap();
    let cells = json.rows[0].cells().map(|c| c.map(|v| format!("{v:.2}")));
    assert_eq!(rows[0].1, cells);
}

#[test]
fn empty_results_store_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["report", "--results", "nothing", "--out", "r.txt"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn missing_input_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["tokenizer-train", "--corpus", "none.txt", "--vocab-size", "300", "--out", "t.json"]);
    assert_eq!(code(&o), 2);
    let o = bin().args(["report"]).output().unwrap();
    assert_eq!(code(&o), 2);
}

#[test]
fn env_override_reaches_the_snapshot() {
    let dir = setup();
    let d = dir.path();
    let o = bin()
        .arg("--workdir")
        .arg(d)
        .env("ADAPTLAB_MAX_STEPS", "4")
        .args([
            "adapter-pretrain",
            "--corpus",
            "data/text_train.txt",
            "--tokenizer",
            "tok.json",
            "--init-config",
            "tiny.toml",
            "--config",
            "tiny.toml",
            "--adapter-name",
            "syn",
            "--run-dir",
            "runs/env",
        ])
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let manifest = fs::read_to_string(d.join("runs/env/manifest.json")).unwrap();
    assert!(manifest.contains("\"max_steps\": \"4\""), "{manifest}");
    let last = read_metrics(&d.join("runs/env/metrics.jsonl")).unwrap();
    assert_eq!(last.iter().map(|r| r.step).max(), Some(4));
}
