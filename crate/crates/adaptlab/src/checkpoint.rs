//! Resumable training state in a `CKPT` container.

use std::path::Path;

use adaptlab_core::optim::{AdamHyper, AdamW};
use adaptlab_core::params::ParamStore;
use adaptlab_core::rng::{RngState, RNG_ALGORITHM};
use adaptlab_core::train::{BatcherState, Mode, Model, TrainState};

use crate::artifacts::{get_model, put_model};
use crate::container::{Container, Kind};
use crate::error::{Error, Result};

/// Layout version of the checkpoint metadata, independent of the container's.
pub const CHECKPOINT_VERSION: u32 = 1;

/// Loop-level bookkeeping that must survive a restart.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Progress {
    /// Most recent training losses, oldest first.
    pub recent_losses: Vec<f32>,
    /// Smoothed loss once the first window filled.
    pub first_smoothed: Option<f64>,
    /// Best evaluation so far: step and score.
    pub best: Option<(u64, f64)>,
    /// Trainable parameters at the best evaluation, by qualified name.
    pub best_params: ParamStore,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub mode: Mode,
    pub config_hash: String,
    pub run_id: String,
    pub model: Model,
    pub state: TrainState,
    /// Length of the metrics log when this checkpoint was written.
    pub metrics_offset: u64,
    pub progress: Progress,
}

fn f64_bits(v: f64) -> String {
    format!("{:016x}", v.to_bits())
}

fn parse_f64_bits(s: &str) -> Result<f64> {
    u64::from_str_radix(s, 16)
        .map(f64::from_bits)
        .map_err(|_| Error::Config(format!("bad float bits {s:?}")))
}

fn rng_str(s: RngState) -> String {
    format!("{}:{}:{}", s.seed, s.stream, s.word_pos)
}

fn parse_rng(s: &str) -> Result<RngState> {
    let bad = || Error::Config(format!("bad rng state {s:?}"));
    let mut it = s.split(':');
    let mut next = || it.next().ok_or_else(bad);
    let seed = next()?.parse().map_err(|_| bad())?;
    let stream = next()?.parse().map_err(|_| bad())?;
    let word_pos = next()?.parse().map_err(|_| bad())?;
    Ok(RngState {
        seed,
        stream,
        word_pos,
    })
}

impl Checkpoint {
    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new(Kind::Checkpoint);
        c.set("checkpoint.version", CHECKPOINT_VERSION);
        c.set("mode", self.mode.as_str());
        c.set("config_hash", &self.config_hash);
        c.set("run_id", &self.run_id);
        c.set("step", self.state.step);
        c.set("metrics_offset", self.metrics_offset);
        c.set("rng.algorithm", RNG_ALGORITHM);
        c.set("rng.masking", rng_str(self.state.masking));
        c.set("rng.dropout", rng_str(self.state.dropout));
        c.set("rng.shuffle_epoch_start", rng_str(self.state.batcher.epoch_start));
        c.set("batcher.epoch", self.state.batcher.epoch);
        c.set("batcher.cursor", self.state.batcher.cursor);
        let h = self.state.optimizer.hyper;
        c.set("adam.beta1", h.beta1.to_bits());
        c.set("adam.beta2", h.beta2.to_bits());
        c.set("adam.eps", h.eps.to_bits());
        c.set("adam.weight_decay", h.weight_decay.to_bits());
        let losses: Vec<String> = self
            .progress
            .recent_losses
            .iter()
            .map(|l| format!("{:08x}", l.to_bits()))
            .collect();
        c.set("progress.recent_losses", losses.join(","));
        if let Some(v) = self.progress.first_smoothed {
            c.set("progress.first_smoothed", f64_bits(v));
        }
        if let Some((step, score)) = self.progress.best {
            c.set("progress.best_step", step);
            c.set("progress.best_score", f64_bits(score));
        }
        put_model(&mut c, &self.model)?;
        for (n, t) in self.state.optimizer.first.iter() {
            c.tensors.insert(format!("opt.m/{n}"), t.clone())?;
        }
        for (n, t) in self.state.optimizer.second.iter() {
            c.tensors.insert(format!("opt.v/{n}"), t.clone())?;
        }
        for (n, t) in self.progress.best_params.iter() {
            c.tensors.insert(format!("best/{n}"), t.clone())?;
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let version: u32 = c.parse("checkpoint.version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Refused(format!(
                "checkpoint layout version {version}, this build reads {CHECKPOINT_VERSION}"
            )));
        }
        let algorithm = c.get("rng.algorithm")?;
        if algorithm != RNG_ALGORITHM {
            return Err(Error::Refused(format!("checkpoint uses rng {algorithm}, expected {RNG_ALGORITHM}")));
        }
        let model = get_model(c)?;
        let mut first = ParamStore::new();
        let mut second = ParamStore::new();
        let mut best_params = ParamStore::new();
        for (n, t) in c.tensors.iter() {
            if let Some(rest) = n.strip_prefix("opt.m/") {
                first.insert(rest, t.clone())?;
            } else if let Some(rest) = n.strip_prefix("opt.v/") {
                second.insert(rest, t.clone())?;
            } else if let Some(rest) = n.strip_prefix("best/") {
                best_params.insert(rest, t.clone())?;
            }
        }
        let bits = |k: &str| -> Result<f32> { Ok(f32::from_bits(c.parse(k)?)) };
        let hyper = AdamHyper {
            beta1: bits("adam.beta1")?,
            beta2: bits("adam.beta2")?,
            eps: bits("adam.eps")?,
            weight_decay: bits("adam.weight_decay")?,
        };
        let state = TrainState {
            step: c.parse("step")?,
            optimizer: AdamW { hyper, first, second },
            masking: parse_rng(c.get("rng.masking")?)?,
            dropout: parse_rng(c.get("rng.dropout")?)?,
            batcher: BatcherState {
                epoch: c.parse("batcher.epoch")?,
                cursor: c.parse("batcher.cursor")?,
                epoch_start: parse_rng(c.get("rng.shuffle_epoch_start")?)?,
            },
        };
        let recent_losses = c
            .get("progress.recent_losses")?
            .split(',')
            .filter(|s| !s.is_empty())
            .map(|s| {
                u32::from_str_radix(s, 16)
                    .map(f32::from_bits)
                    .map_err(|_| Error::Config(format!("bad loss bits {s:?}")))
            })
            .collect::<Result<_>>()?;
        let first_smoothed = match c.meta.get("progress.first_smoothed") {
            Some(s) => Some(parse_f64_bits(s)?),
            None => None,
        };
        let best = match c.meta.get("progress.best_step") {
            Some(_) => Some((c.parse("progress.best_step")?, parse_f64_bits(c.get("progress.best_score")?)?)),
            None => None,
        };
        Ok(Self {
            mode: adaptlab_core::train::Mode::parse(c.get("mode")?)?,
            config_hash: c.get("config_hash")?.to_string(),
            run_id: c.get("run_id")?.to_string(),
            model,
            state,
            metrics_offset: c.parse("metrics_offset")?,
            progress: Progress {
                recent_losses,
                first_smoothed,
                best,
                best_params,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read(path, Kind::Checkpoint)?)
    }

    /// Refuses to continue under a different mode, or under a different
    /// config unless `allow_config_change` is set.
    pub fn check_resumable(&self, mode: Mode, config_hash: &str, allow_config_change: bool) -> Result<()> {
        if self.mode != mode {
            return Err(Error::Refused(format!(
                "checkpoint was written in mode {}, not {}",
                self.mode.as_str(),
                mode.as_str()
            )));
        }
        if self.config_hash != config_hash && !allow_config_change {
            return Err(Error::Refused(format!(
                "config hash {} differs from the checkpoint's {}; pass the override flag to resume anyway",
                config_hash, self.config_hash
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use adaptlab_core::adapters::{init_adapter, AdapterConfig};
    use adaptlab_core::encoder::{init_encoder, EncoderConfig};
    use adaptlab_core::train::{TrainConfig, TrainData, Trainer};

    fn trainer() -> Trainer {
        let cfg = EncoderConfig {
            vocab_size: 40,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            max_positions: 12,
            ..EncoderConfig::default()
        };
        let enc = init_encoder(&cfg, 1).unwrap();
        let a = init_adapter(&cfg, &AdapterConfig::new("lang"), 2).unwrap();
        let data: Vec<Vec<u32>> = (0..20u32).map(|i| vec![0, 5 + i % 30, 6 + i % 29, 2]).collect();
        let mut tc = TrainConfig::new(Mode::MlmAdapter);
        tc.max_len = 12;
        tc.batch_size = 4;
        tc.warmup_steps = 2;
        tc.max_steps = 10;
        Trainer::new(tc, Model::mlm(enc, a).unwrap(), TrainData::Mlm(data)).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let mut t = trainer();
        for _ in 0..3 {
            t.step().unwrap();
        }
        let mut best = ParamStore::new();
        best.insert("head/mlm.output_bias", t.model.head.get("mlm.output_bias").unwrap().clone())
            .unwrap();
        let ck = Checkpoint {
            mode: Mode::MlmAdapter,
            config_hash: "abc".into(),
            run_id: "run".into(),
            model: t.model.clone(),
            state: t.state(),
            metrics_offset: 77,
            progress: Progress {
                recent_losses: vec![1.5, f32::MIN_POSITIVE],
                first_smoothed: Some(0.1),
                best: Some((3, 0.25)),
                best_params: best,
            },
        };
        let bytes = ck.to_container().unwrap().to_bytes();
        let back = Checkpoint::from_container(&Container::from_bytes(&bytes, "m").unwrap()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_container().unwrap().to_bytes(), bytes);
    }

    #[test]
    fn refuses_mismatch() {
        let t = trainer();
        let ck = Checkpoint {
            mode: Mode::MlmAdapter,
            config_hash: "abc".into(),
            run_id: "run".into(),
            model: t.model.clone(),
            state: t.state(),
            metrics_offset: 0,
            progress: Progress::default(),
        };
        assert!(ck.check_resumable(Mode::MlmAdapter, "abc", false).is_ok());
        assert!(matches!(ck.check_resumable(Mode::MlmAdapter, "abd", false), Err(Error::Refused(_))));
        assert!(ck.check_resumable(Mode::MlmAdapter, "abd", true).is_ok());
        assert!(ck.check_resumable(Mode::NerAdapter, "abc", true).is_err());
    }
}
