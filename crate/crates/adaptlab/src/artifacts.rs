//! Encoder, adapter, model and tokenizer files.

use std::path::Path;

use adaptlab_core::adapters::{
    AdapterConfig, AdapterStack, AdapterWeights, EncoderFingerprint, InsertionPoint, Nonlinearity,
};
use adaptlab_core::bpe::SubwordModel;
use adaptlab_core::encoder::{EncoderConfig, EncoderWeights, SpecialTokens};
use adaptlab_core::params::ParamStore;
use adaptlab_core::train::Model;
use serde::{Deserialize, Serialize};

use crate::container::{write_atomic, Container, Kind};
use crate::error::{Error, Result};

/// Writes the encoder config under `prefix`.
pub fn put_encoder_config(c: &mut Container, prefix: &str, cfg: &EncoderConfig) {
    let key = |k: &str| format!("{prefix}{k}");
    c.set(&key("vocab_size"), cfg.vocab_size);
    c.set(&key("d_model"), cfg.d_model);
    c.set(&key("n_layers"), cfg.n_layers);
    c.set(&key("n_heads"), cfg.n_heads);
    c.set(&key("d_ff"), cfg.d_ff);
    c.set(&key("max_positions"), cfg.max_positions);
    c.set(&key("dropout_rate"), cfg.dropout_rate);
    c.set(&key("layer_norm_eps"), cfg.layer_norm_eps);
    let sp = cfg.specials;
    c.set(
        &key("specials"),
        format!("{},{},{},{},{}", sp.cls, sp.pad, sp.sep, sp.unk, sp.mask),
    );
    c.set(&key("vocab_hash"), format!("{:016x}", cfg.vocab_hash));
}

pub fn get_encoder_config(c: &Container, prefix: &str) -> Result<EncoderConfig> {
    let key = |k: &str| format!("{prefix}{k}");
    let specials: Vec<u32> = c
        .get(&key("specials"))?
        .split(',')
        .map(str::parse)
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Config("malformed special token list".into()))?;
    let [cls, pad, sep, unk, mask] = specials[..] else {
        return Err(Error::Config("special token list needs five ids".into()));
    };
    let cfg = EncoderConfig {
        vocab_size: c.parse(&key("vocab_size"))?,
        d_model: c.parse(&key("d_model"))?,
        n_layers: c.parse(&key("n_layers"))?,
        n_heads: c.parse(&key("n_heads"))?,
        d_ff: c.parse(&key("d_ff"))?,
        max_positions: c.parse(&key("max_positions"))?,
        dropout_rate: c.parse(&key("dropout_rate"))?,
        layer_norm_eps: c.parse(&key("layer_norm_eps"))?,
        specials: SpecialTokens {
            cls,
            pad,
            sep,
            unk,
            mask,
        },
        vocab_hash: parse_hex(c.get(&key("vocab_hash"))?)?,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn parse_hex(s: &str) -> Result<u64> {
    u64::from_str_radix(s, 16).map_err(|_| Error::Config(format!("bad hex value {s:?}")))
}

fn put_adapter_meta(c: &mut Container, prefix: &str, a: &AdapterWeights) {
    let key = |k: &str| format!("{prefix}{k}");
    c.set(&key("name"), &a.config.name);
    c.set(&key("reduction_factor"), a.config.reduction_factor);
    c.set(&key("nonlinearity"), a.config.nonlinearity.as_str());
    c.set(&key("insertion_point"), a.config.insertion_point.as_str());
    c.set(&key("d_model"), a.fingerprint.d_model);
    c.set(&key("n_layers"), a.fingerprint.n_layers);
    c.set(&key("vocab_hash"), format!("{:016x}", a.fingerprint.vocab_hash));
}

fn get_adapter_meta(c: &Container, prefix: &str) -> Result<(AdapterConfig, EncoderFingerprint)> {
    let key = |k: &str| format!("{prefix}{k}");
    let config = AdapterConfig {
        name: c.get(&key("name"))?.to_string(),
        reduction_factor: c.parse(&key("reduction_factor"))?,
        nonlinearity: Nonlinearity::parse(c.get(&key("nonlinearity"))?)?,
        insertion_point: InsertionPoint::parse(c.get(&key("insertion_point"))?)?,
    };
    config.validate()?;
    let fingerprint = EncoderFingerprint {
        d_model: c.parse(&key("d_model"))?,
        n_layers: c.parse(&key("n_layers"))?,
        vocab_hash: parse_hex(c.get(&key("vocab_hash"))?)?,
    };
    Ok((config, fingerprint))
}

/// Checks that the stored tensors are exactly the adapter's expected set.
fn check_adapter_tensors(config: &AdapterConfig, fp: &EncoderFingerprint, params: &ParamStore) -> Result<()> {
    use adaptlab_core::adapters::{down_bias, down_weight, up_bias, up_weight};
    let (d, m) = (fp.d_model, config.bottleneck(fp.d_model));
    let mut expected = 0;
    for l in 0..fp.n_layers {
        for (name, shape) in [
            (down_weight(l), vec![d, m]),
            (down_bias(l), vec![m]),
            (up_weight(l), vec![m, d]),
            (up_bias(l), vec![d]),
        ] {
            let t = params
                .get(&name)
                .ok_or_else(|| Error::Config(format!("adapter {} lacks {name}", config.name)))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Config(format!(
                    "adapter tensor {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            expected += 1;
        }
    }
    if params.len() != expected {
        return Err(Error::Config(format!(
            "adapter {} has {} tensors, expected {expected}",
            config.name,
            params.len()
        )));
    }
    Ok(())
}

pub fn encoder_container(w: &EncoderWeights) -> Container {
    let mut c = Container::new(Kind::Weights);
    put_encoder_config(&mut c, "encoder.", &w.config);
    c.tensors = w.params.clone();
    c
}

pub fn encoder_from_container(c: Container) -> Result<EncoderWeights> {
    let config = get_encoder_config(&c, "encoder.")?;
    let reference = adaptlab_core::encoder::init_encoder(&config, 0)?;
    check_same_layout(&reference.params, &c.tensors, "encoder")?;
    Ok(EncoderWeights {
        config,
        params: c.tensors,
    })
}

fn check_same_layout(expected: &ParamStore, found: &ParamStore, what: &str) -> Result<()> {
    let a: Vec<_> = expected.iter().map(|(n, t)| (n, t.shape())).collect();
    let b: Vec<_> = found.iter().map(|(n, t)| (n, t.shape())).collect();
    if a != b {
        return Err(Error::Config(format!(
            "{what} tensors do not match the configured architecture"
        )));
    }
    Ok(())
}

pub fn save_encoder(w: &EncoderWeights, path: &Path) -> Result<()> {
    encoder_container(w).write(path)
}

pub fn load_encoder(path: &Path) -> Result<EncoderWeights> {
    encoder_from_container(Container::read(path, Kind::Weights)?)
}

pub fn adapter_container(a: &AdapterWeights) -> Container {
    let mut c = Container::new(Kind::Adapter);
    put_adapter_meta(&mut c, "", a);
    c.tensors = a.params.clone();
    c
}

pub fn adapter_from_container(c: Container) -> Result<AdapterWeights> {
    let (config, fingerprint) = get_adapter_meta(&c, "")?;
    check_adapter_tensors(&config, &fingerprint, &c.tensors)?;
    Ok(AdapterWeights {
        config,
        fingerprint,
        params: c.tensors,
    })
}

pub fn save_adapter(a: &AdapterWeights, path: &Path) -> Result<()> {
    adapter_container(a).write(path)
}

pub fn load_adapter(path: &Path) -> Result<AdapterWeights> {
    adapter_from_container(Container::read(path, Kind::Adapter)?)
}

/// Loads an adapter and checks it against the encoder it will run in.
pub fn load_adapter_for(path: &Path, encoder: &EncoderConfig) -> Result<AdapterWeights> {
    let a = load_adapter(path)?;
    a.fingerprint.check(encoder)?;
    Ok(a)
}

/// Stores a whole model in `c`: the encoder under `encoder/`, each stack
/// member under `adapter/<name>/` and the head under `head/`.
pub fn put_model(c: &mut Container, m: &Model) -> Result<()> {
    put_encoder_config(c, "encoder.", &m.encoder.config);
    c.set("stack.len", m.stack.len());
    for (i, member) in m.stack.members().iter().enumerate() {
        put_adapter_meta(c, &format!("stack.{i}."), &member.weights);
        c.set(&format!("stack.{i}.trainable"), member.trainable);
    }
    for (name, t) in m.qualified_params() {
        c.tensors.insert(name, t.clone())?;
    }
    Ok(())
}

pub fn get_model(c: &Container) -> Result<Model> {
    let config = get_encoder_config(c, "encoder.")?;
    let mut encoder = ParamStore::new();
    let mut head = ParamStore::new();
    let mut adapters: Vec<ParamStore> = Vec::new();
    let n: usize = c.parse("stack.len")?;
    let mut metas = Vec::with_capacity(n);
    for i in 0..n {
        metas.push(get_adapter_meta(c, &format!("stack.{i}."))?);
        adapters.push(ParamStore::new());
    }
    for (name, t) in c.tensors.iter() {
        if let Some(rest) = name.strip_prefix("encoder/") {
            encoder.insert(rest, t.clone())?;
        } else if let Some(rest) = name.strip_prefix("head/") {
            head.insert(rest, t.clone())?;
        } else if let Some(rest) = name.strip_prefix("adapter/") {
            let (adapter, param) = rest
                .split_once('/')
                .ok_or_else(|| Error::Config(format!("bad tensor name {name}")))?;
            let i = metas
                .iter()
                .position(|(cfg, _)| cfg.name == adapter)
                .ok_or_else(|| Error::Config(format!("tensor {name} names an unknown adapter")))?;
            adapters[i].insert(param, t.clone())?;
        }
    }
    let reference = adaptlab_core::encoder::init_encoder(&config, 0)?;
    check_same_layout(&reference.params, &encoder, "encoder")?;
    let mut stack = AdapterStack::new();
    for (i, ((cfg, fp), params)) in metas.into_iter().zip(adapters).enumerate() {
        check_adapter_tensors(&cfg, &fp, &params)?;
        let trainable = c.parse(&format!("stack.{i}.trainable"))?;
        stack.push(
            AdapterWeights {
                config: cfg,
                fingerprint: fp,
                params,
            },
            trainable,
        )?;
    }
    stack.check_compatible(&config)?;
    Ok(Model {
        encoder: EncoderWeights {
            config,
            params: encoder,
        },
        stack,
        head,
    })
}

pub const TOKENIZER_FORMAT: &str = "adaptlab-bpe";
pub const TOKENIZER_VERSION: u32 = 1;

/// JSON form of a tokenizer: byte alphabet implied, merges in training order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenizerFile {
    pub format: String,
    pub version: u32,
    pub alphabet: String,
    pub specials: Vec<(String, u32)>,
    pub vocab_size: usize,
    pub vocab_hash: String,
    pub merges: Vec<(u32, u32)>,
}

impl TokenizerFile {
    pub fn of(model: &SubwordModel) -> Self {
        let sp = model.specials();
        Self {
            format: TOKENIZER_FORMAT.into(),
            version: TOKENIZER_VERSION,
            alphabet: "bytes".into(),
            specials: vec![
                ("<s>".into(), sp.cls),
                ("<pad>".into(), sp.pad),
                ("</s>".into(), sp.sep),
                ("<unk>".into(), sp.unk),
                ("<mask>".into(), sp.mask),
            ],
            vocab_size: model.vocab_size(),
            vocab_hash: format!("{:016x}", model.vocab_hash()),
            merges: model.merges().to_vec(),
        }
    }

    pub fn into_model(self) -> Result<SubwordModel> {
        if self.format != TOKENIZER_FORMAT || self.version != TOKENIZER_VERSION {
            return Err(Error::Config(format!(
                "unsupported tokenizer format {} v{}",
                self.format, self.version
            )));
        }
        let model = SubwordModel::from_merges(self.merges)?;
        let sp = model.specials();
        let expected = [sp.cls, sp.pad, sp.sep, sp.unk, sp.mask];
        if self.specials.iter().map(|(_, id)| *id).ne(expected) {
            return Err(Error::Config("tokenizer special ids differ from the built-in layout".into()));
        }
        if model.vocab_size() != self.vocab_size
            || format!("{:016x}", model.vocab_hash()) != self.vocab_hash
        {
            return Err(Error::Config("tokenizer vocabulary does not match its recorded hash".into()));
        }
        Ok(model)
    }
}

pub fn save_tokenizer(model: &SubwordModel, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(&TokenizerFile::of(model))
        .map_err(|e| Error::Config(e.to_string()))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn load_tokenizer(path: &Path) -> Result<SubwordModel> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: TokenizerFile = serde_json::from_str(&text)
        .map_err(|e| Error::line(path, e.line(), e.to_string()))?;
    file.into_model()
}

#[cfg(test)]
mod tests {
    use super::*;
    use adaptlab_core::adapters::{adapter_param_count, init_adapter};
    use adaptlab_core::bpe::train_subwords;
    use adaptlab_core::encoder::init_encoder;

    fn small() -> EncoderConfig {
        EncoderConfig {
            vocab_size: 300,
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            d_ff: 32,
            max_positions: 16,
            ..EncoderConfig::default()
        }
    }

    #[test]
    fn adapter_round_trip_and_size() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small();
        let a = init_adapter(&cfg, &AdapterConfig::new("amh"), 4).unwrap();
        let p1 = dir.path().join("a.apfw");
        let p2 = dir.path().join("b.apfw");
        save_adapter(&a, &p1).unwrap();
        let back = load_adapter(&p1).unwrap();
        assert_eq!(back, a);
        save_adapter(&back, &p2).unwrap();
        let b1 = std::fs::read(&p1).unwrap();
        assert_eq!(b1, std::fs::read(&p2).unwrap());
        let payload = 4 * adapter_param_count(&cfg, &a.config);
        assert!(b1.len() > payload && b1.len() < payload + 1024, "{}", b1.len());
    }

    #[test]
    fn adapter_for_wider_encoder_is_incompatible() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small();
        let a = init_adapter(&cfg, &AdapterConfig::new("amh"), 4).unwrap();
        let p = dir.path().join("a.apfw");
        save_adapter(&a, &p).unwrap();
        let wide = EncoderConfig { d_model: 32, ..cfg };
        let err = load_adapter_for(&p, &wide).unwrap_err();
        assert!(matches!(err, Error::Core(adaptlab_core::Error::Compatibility(_))), "{err}");
    }

    #[test]
    fn encoder_and_model_round_trip() {
        let cfg = small();
        let enc = init_encoder(&cfg, 1).unwrap();
        let back = encoder_from_container(Container::from_bytes(&encoder_container(&enc).to_bytes(), "m").unwrap()).unwrap();
        assert_eq!(back, enc);

        let lang = init_adapter(&cfg, &AdapterConfig::new("lang"), 2).unwrap();
        let task = init_adapter(&cfg, &AdapterConfig::new("task"), 3).unwrap();
        let head = adaptlab_core::encoder::init_ner_head(16, 9, &mut adaptlab_core::rng::RngStream::new(1, 0));
        let model = Model::ner_adapter(enc, lang, Some(task), head).unwrap();
        let mut c = Container::new(Kind::Checkpoint);
        put_model(&mut c, &model).unwrap();
        let c = Container::from_bytes(&c.to_bytes(), "m").unwrap();
        assert_eq!(get_model(&c).unwrap(), model);
    }

    #[test]
    fn tokenizer_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let model = train_subwords(["abab cdcd abab", "ቋንቋ ቋንቋ"], 300).unwrap().model;
        let p = dir.path().join("tok.json");
        save_tokenizer(&model, &p).unwrap();
        let back = load_tokenizer(&p).unwrap();
        assert_eq!(back.merges(), model.merges());
        assert_eq!(back.vocab_hash(), model.vocab_hash());
    }
}
