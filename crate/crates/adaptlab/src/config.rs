//! Flat key-value run configuration.
//!
//! A config file is a TOML table of scalars. Every key can be overridden by
//! an environment variable `ADAPTLAB_<KEY>` (upper case), whose value is
//! parsed as a TOML scalar and falls back to a plain string.

use std::collections::BTreeMap;
use std::path::Path;

use adaptlab_core::adapters::{AdapterConfig, Nonlinearity};
use adaptlab_core::encoder::EncoderConfig;
use adaptlab_core::masking::MaskConfig;
use adaptlab_core::optim::AdamHyper;
use adaptlab_core::train::{Mode, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const ENV_PREFIX: &str = "ADAPTLAB_";

/// Keys that only affect when a run stops or how often it reports. They are
/// left out of the config hash so an interrupted run may resume with a new
/// budget.
pub const HASH_EXCLUDED: [&str; 4] = [
    "budget_seconds",
    "checkpoint_interval_steps",
    "log_interval_steps",
    "halt_after_steps",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Mode default when unset.
    pub learning_rate: Option<f32>,
    pub batch_size: usize,
    pub max_steps: u64,
    pub warmup_steps: u64,
    pub seed: u64,
    pub budget_seconds: Option<f64>,
    pub checkpoint_interval_steps: u64,
    pub log_interval_steps: u64,
    pub eval_interval_steps: u64,
    /// Stop with a checkpoint after this many completed steps, as if the
    /// budget ran out.
    pub halt_after_steps: Option<u64>,
    pub max_len: usize,
    pub clip_norm: f64,
    pub beta1: f32,
    pub beta2: f32,
    pub adam_eps: f32,
    pub weight_decay: f32,
    pub mask_prob: f64,
    pub mask_token: f64,
    pub mask_random: f64,
    pub mask_keep: f64,
    pub unfreeze_language_adapter: bool,

    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_positions: usize,
    pub dropout_rate: f32,
    pub layer_norm_eps: f32,

    pub reduction_factor: usize,
    pub nonlinearity: String,

    pub vocab_size: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::new(Mode::MlmAdapter);
        let e = EncoderConfig::default();
        let a = AdapterConfig::new("default");
        Self {
            learning_rate: None,
            batch_size: t.batch_size,
            max_steps: t.max_steps,
            warmup_steps: t.warmup_steps,
            seed: t.seed,
            budget_seconds: None,
            checkpoint_interval_steps: t.checkpoint_interval_steps,
            log_interval_steps: t.log_interval_steps,
            eval_interval_steps: t.eval_interval_steps,
            halt_after_steps: None,
            max_len: t.max_len,
            clip_norm: t.clip_norm,
            beta1: t.adam.beta1,
            beta2: t.adam.beta2,
            adam_eps: t.adam.eps,
            weight_decay: t.adam.weight_decay,
            mask_prob: t.mask.mask_prob,
            mask_token: t.mask.mask_token,
            mask_random: t.mask.random,
            mask_keep: t.mask.keep,
            unfreeze_language_adapter: false,
            d_model: e.d_model,
            n_layers: e.n_layers,
            n_heads: e.n_heads,
            d_ff: e.d_ff,
            max_positions: e.max_positions,
            dropout_rate: e.dropout_rate,
            layer_norm_eps: e.layer_norm_eps,
            reduction_factor: a.reduction_factor,
            nonlinearity: a.nonlinearity.as_str().into(),
            vocab_size: e.vocab_size,
        }
    }
}

fn to_table(c: &RunConfig) -> toml::Table {
    toml::Table::try_from(c).expect("RunConfig serializes to a table")
}

fn from_table(t: toml::Table) -> Result<RunConfig> {
    t.try_into().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))
}

/// Every key a config file may set.
pub fn known_keys() -> Vec<String> {
    let mut keys: Vec<String> = to_table(&RunConfig::default()).keys().cloned().collect();
    for optional in ["learning_rate", "budget_seconds", "halt_after_steps"] {
        keys.push(optional.into());
    }
    keys.sort();
    keys.dedup();
    keys
}

fn parse_scalar(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_with_env(text, |_| None)
    }

    /// Parses `text`, then applies overrides returned by `env` for
    /// `ADAPTLAB_<KEY>` names.
    pub fn parse_with_env(text: &str, env: impl Fn(&str) -> Option<String>) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if let Some((k, _)) = table.iter().find(|(_, v)| v.is_table() || v.is_array()) {
            return Err(Error::Config(format!("key {k} must be a scalar; configs are flat")));
        }
        for key in known_keys() {
            if let Some(raw) = env(&format!("{ENV_PREFIX}{}", key.to_uppercase())) {
                table.insert(key, parse_scalar(&raw));
            }
        }
        // Integers are accepted where floats are expected.
        let defaults = to_table(&RunConfig::default());
        for (k, v) in table.iter_mut() {
            let wants_float = matches!(defaults.get(k), Some(toml::Value::Float(_)))
                || matches!(k.as_str(), "learning_rate" | "budget_seconds");
            if let (true, toml::Value::Integer(i)) = (wants_float, &v) {
                *v = toml::Value::Float(*i as f64);
            }
        }
        from_table(table)
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::parse_with_env(&text, |k| std::env::var(k).ok())
    }

    /// Resolved snapshot with every key present.
    pub fn snapshot(&self) -> BTreeMap<String, String> {
        let mut out: BTreeMap<String, String> = to_table(self)
            .into_iter()
            .map(|(k, v)| {
                let text = match v {
                    // f32 fields arrive widened; print their shortest f32 form.
                    toml::Value::Float(f) if f as f32 as f64 == f => (f as f32).to_string(),
                    other => other.to_string(),
                };
                (k, text)
            })
            .collect();
        for key in known_keys() {
            out.entry(key).or_insert_with(|| "none".into());
        }
        out
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("RunConfig serializes")
    }

    /// SHA-256 over the snapshot, minus [`HASH_EXCLUDED`], plus the mode.
    pub fn hash(&self, mode: Mode) -> String {
        let mut h = Sha256::new();
        h.update(format!("mode={}\n", mode.as_str()));
        for (k, v) in self.snapshot() {
            if !HASH_EXCLUDED.contains(&k.as_str()) {
                h.update(format!("{k}={v}\n"));
            }
        }
        hex(&h.finalize())
    }

    pub fn train_config(&self, mode: Mode) -> Result<TrainConfig> {
        let c = TrainConfig {
            mode,
            learning_rate: self.learning_rate.unwrap_or(mode.default_learning_rate()),
            adam: AdamHyper {
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.adam_eps,
                weight_decay: self.weight_decay,
            },
            batch_size: self.batch_size,
            max_steps: self.max_steps,
            warmup_steps: self.warmup_steps,
            seed: self.seed,
            wall_clock_budget_seconds: self.budget_seconds,
            checkpoint_interval_steps: self.checkpoint_interval_steps,
            log_interval_steps: self.log_interval_steps,
            eval_interval_steps: self.eval_interval_steps,
            max_len: self.max_len,
            clip_norm: self.clip_norm,
            mask: MaskConfig {
                mask_prob: self.mask_prob,
                mask_token: self.mask_token,
                random: self.mask_random,
                keep: self.mask_keep,
            },
            unfreeze_language_adapter: self.unfreeze_language_adapter,
        };
        c.validate()?;
        Ok(c)
    }

    /// Encoder shape for a tokenizer with `vocab_size` entries and `vocab_hash`.
    pub fn encoder_config(&self, vocab_size: usize, vocab_hash: u64) -> Result<EncoderConfig> {
        let c = EncoderConfig {
            vocab_size,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            max_positions: self.max_positions,
            dropout_rate: self.dropout_rate,
            layer_norm_eps: self.layer_norm_eps,
            vocab_hash,
            ..EncoderConfig::default()
        };
        c.validate()?;
        Ok(c)
    }

    pub fn adapter_config(&self, name: &str) -> Result<AdapterConfig> {
        let c = AdapterConfig {
            reduction_factor: self.reduction_factor,
            nonlinearity: Nonlinearity::parse(&self.nonlinearity)?,
            ..AdapterConfig::new(name)
        };
        c.validate()?;
        Ok(c)
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
