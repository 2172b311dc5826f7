//! Seeded synthetic language for the acceptance corpora.
//!
//! Words are pseudo-words built from syllables. Every word belongs to exactly
//! one lexical class, and each entity class has its own words, so the NER
//! task is separable from word identity alone. Sentences follow a handful of
//! templates with fixed function words and determiners, which gives the MLM
//! objective structure to learn. Every slot draws its word Zipf-style.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use adaptlab_core::rng::RngStream;
use adaptlab_core::tagging::{EntityType, Tag, TaggedSentence};

use crate::corpus::{write_conll, write_text_corpus, DatasetManifest, LanguageSplits, SplitEntry};
use crate::error::Result;

const ONSETS: [&str; 14] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "w", "z"];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];
const MONTHS: [&str; 12] = [
    "Janu", "Febu", "Maris", "Apor", "Meyo", "Juno", "Julo", "Agos", "Sebta", "Okto", "Novem", "Desem",
];

/// Stream of the lexicon generator, apart from the training streams.
const LEXICON_STREAM: u64 = 32;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lexicon {
    pub function: Vec<String>,
    pub determiners: Vec<String>,
    pub verbs: Vec<String>,
    pub nouns: Vec<String>,
    pub adjectives: Vec<String>,
    pub first_names: Vec<String>,
    pub surnames: Vec<String>,
    pub org_stems: Vec<String>,
    pub org_suffixes: Vec<String>,
    pub places: Vec<String>,
    pub days: Vec<String>,
    pub months: Vec<String>,
    pub years: Vec<String>,
}

fn capitalize(w: &str) -> String {
    let mut c = w.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

impl Lexicon {
    pub fn new(seed: u64) -> Self {
        let mut rng = RngStream::new(seed, LEXICON_STREAM);
        let org_suffixes: Vec<String> = ["Koro", "Banki", "Ligo"].map(String::from).to_vec();
        let mut used: BTreeSet<String> = MONTHS
            .iter()
            .map(|m| m.to_string())
            .chain(org_suffixes.iter().cloned())
            .map(|w| w.to_lowercase())
            .collect();
        let mut words = |n: usize, syllables: (usize, usize), cap: bool| -> Vec<String> {
            let mut out = Vec::with_capacity(n);
            while out.len() < n {
                let k = syllables.0 + rng.below(syllables.1 - syllables.0 + 1);
                let mut w = String::new();
                for _ in 0..k {
                    w.push_str(ONSETS[rng.below(ONSETS.len())]);
                    w.push_str(VOWELS[rng.below(VOWELS.len())]);
                }
                if used.insert(w.to_lowercase()) {
                    out.push(if cap { capitalize(&w) } else { w });
                }
            }
            out
        };
        Self {
            function: words(8, (1, 1), false),
            determiners: words(3, (1, 1), false),
            verbs: words(16, (2, 2), false),
            nouns: words(24, (2, 3), false),
            adjectives: words(10, (2, 2), false),
            first_names: words(30, (2, 3), true),
            surnames: words(30, (3, 3), true),
            org_stems: words(20, (2, 3), true),
            org_suffixes,
            places: words(30, (2, 3), true),
            days: shuffled(&mut rng, (1..=28).map(|d| d.to_string()).collect()),
            months: shuffled(&mut rng, MONTHS.map(String::from).to_vec()),
            years: shuffled(&mut rng, (1990..2025).map(|y| y.to_string()).collect()),
        }
    }
}

fn shuffled(rng: &mut RngStream, mut v: Vec<String>) -> Vec<String> {
    for i in (1..v.len()).rev() {
        v.swap(i, rng.below(i + 1));
    }
    v
}

/// Zipf-like pick: index `i` has weight `1 / (i + 1)`.
fn zipf<'a>(rng: &mut RngStream, words: &'a [String]) -> &'a str {
    let total: f64 = (1..=words.len()).map(|i| 1.0 / i as f64).sum();
    let mut u = rng.uniform() * total;
    for (i, w) in words.iter().enumerate() {
        u -= 1.0 / (i + 1) as f64;
        if u <= 0.0 {
            return w;
        }
    }
    words.last().expect("nonempty word list")
}

#[derive(Debug, Clone, Copy)]
enum Slot {
    Function(usize),
    Verb,
    Noun,
    Adjective,
    Entity(EntityType),
}

use EntityType::{Date, Loc, Org, Per};
use Slot::{Adjective as A, Entity as E, Function as F, Noun as N, Verb as V};

const TEMPLATES: [&[Slot]; 8] = [
    &[E(Per), V, F(0), N, F(1), E(Loc), F(7)],
    &[E(Org), V, A, N, F(2), E(Date), F(7)],
    &[F(3), N, F(4), E(Loc), V, F(0), E(Per), F(7)],
    &[E(Per), F(5), E(Org), V, N, F(1), E(Loc), F(2), E(Date), F(7)],
    &[A, N, V, F(0), A, N, F(7)],
    &[F(3), E(Date), E(Per), V, F(6), E(Org), F(7)],
    &[E(Loc), V, N, F(4), A, N, F(7)],
    &[F(6), N, F(5), N, V, F(1), E(Loc), F(7)],
];

pub struct SyntheticLanguage {
    pub lexicon: Lexicon,
}

impl SyntheticLanguage {
    pub fn new(seed: u64) -> Self {
        Self {
            lexicon: Lexicon::new(seed),
        }
    }

    fn entity(&self, rng: &mut RngStream, t: EntityType, tokens: &mut Vec<String>, tags: &mut Vec<Tag>) {
        let lx = &self.lexicon;
        let words: Vec<String> = match t {
            Per => {
                let mut w = vec![zipf(rng, &lx.first_names).to_string()];
                if rng.below(2) == 0 {
                    w.push(zipf(rng, &lx.surnames).to_string());
                }
                w
            }
            Org => vec![zipf(rng, &lx.org_stems).to_string(), zipf(rng, &lx.org_suffixes).to_string()],
            Loc => vec![zipf(rng, &lx.places).to_string()],
            Date => {
                let mut w = vec![zipf(rng, &lx.days).to_string(), zipf(rng, &lx.months).to_string()];
                if rng.below(3) == 0 {
                    w.push(zipf(rng, &lx.years).to_string());
                }
                w
            }
        };
        for (i, w) in words.into_iter().enumerate() {
            tokens.push(w);
            tags.push(if i == 0 { Tag::B(t) } else { Tag::I(t) });
        }
    }

    pub fn sentence(&self, rng: &mut RngStream) -> TaggedSentence {
        let lx = &self.lexicon;
        let template = TEMPLATES[rng.below(TEMPLATES.len())];
        let mut tokens = Vec::new();
        let mut tags = Vec::new();
        let mut after_adjective = false;
        for slot in template {
            if matches!(slot, N | A) && !after_adjective {
                tokens.push(zipf(rng, &lx.determiners).to_string());
                tags.push(Tag::O);
            }
            after_adjective = matches!(slot, A);
            let word = match *slot {
                F(i) => lx.function[i].as_str(),
                V => zipf(rng, &lx.verbs),
                N => zipf(rng, &lx.nouns),
                A => zipf(rng, &lx.adjectives),
                E(t) => {
                    self.entity(rng, t, &mut tokens, &mut tags);
                    continue;
                }
            };
            tokens.push(word.to_string());
            tags.push(Tag::O);
        }
        TaggedSentence::new(tokens, tags).expect("generated tokens are well formed")
    }
}

/// Sentence counts per split.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Sizes {
    pub text_train: usize,
    pub text_dev: usize,
    pub ner_train: usize,
    pub ner_dev: usize,
    pub ner_test: usize,
}

impl Default for Sizes {
    fn default() -> Self {
        Self {
            text_train: 1000,
            text_dev: 200,
            ner_train: 800,
            ner_dev: 200,
            ner_test: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntheticDataset {
    pub text_train: Vec<String>,
    pub text_dev: Vec<String>,
    pub ner_train: Vec<TaggedSentence>,
    pub ner_dev: Vec<TaggedSentence>,
    pub ner_test: Vec<TaggedSentence>,
}

/// Draws all splits from one stream, skipping repeats so splits are disjoint.
pub fn generate(seed: u64, sizes: Sizes) -> SyntheticDataset {
    let lang = SyntheticLanguage::new(seed);
    let mut rng = RngStream::new(seed, LEXICON_STREAM + 1);
    let mut seen = BTreeSet::new();
    let mut draw = |n: usize| -> Vec<TaggedSentence> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let s = lang.sentence(&mut rng);
            if seen.insert(s.tokens.join(" ")) {
                out.push(s);
            }
        }
        out
    };
    let text = |v: Vec<TaggedSentence>| v.into_iter().map(|s| s.tokens.join(" ")).collect();
    SyntheticDataset {
        text_train: text(draw(sizes.text_train)),
        text_dev: text(draw(sizes.text_dev)),
        ner_train: draw(sizes.ner_train),
        ner_dev: draw(sizes.ner_dev),
        ner_test: draw(sizes.ner_test),
    }
}

pub const TEXT_TRAIN: &str = "text_train.txt";
pub const TEXT_DEV: &str = "text_dev.txt";
pub const NER_TRAIN: &str = "ner_train.conll";
pub const NER_DEV: &str = "ner_dev.conll";
pub const NER_TEST: &str = "ner_test.conll";
pub const DATASET_MANIFEST: &str = "dataset.toml";

/// Writes every split plus a dataset manifest under language code `language`.
pub fn write_dataset(dir: &Path, language: &str, d: &SyntheticDataset) -> Result<()> {
    write_text_corpus(&dir.join(TEXT_TRAIN), &d.text_train)?;
    write_text_corpus(&dir.join(TEXT_DEV), &d.text_dev)?;
    write_conll(&dir.join(NER_TRAIN), &d.ner_train)?;
    write_conll(&dir.join(NER_DEV), &d.ner_dev)?;
    write_conll(&dir.join(NER_TEST), &d.ner_test)?;
    let entry = |p: &str, count| SplitEntry {
        path: Some(p.into()),
        count,
    };
    let splits = LanguageSplits {
        total: Some(d.text_train.len() + d.text_dev.len()),
        adapter: BTreeMap::from([
            ("train".into(), entry(TEXT_TRAIN, d.text_train.len())),
            ("dev".into(), entry(TEXT_DEV, d.text_dev.len())),
        ]),
        ner: BTreeMap::from([
            ("train".into(), entry(NER_TRAIN, d.ner_train.len())),
            ("dev".into(), entry(NER_DEV, d.ner_dev.len())),
            ("test".into(), entry(NER_TEST, d.ner_test.len())),
        ]),
    };
    let manifest = DatasetManifest {
        languages: BTreeMap::from([(language.to_string(), splits)]),
    };
    let text = toml::to_string(&manifest).map_err(|e| crate::error::Error::Config(e.to_string()))?;
    crate::container::write_atomic(&dir.join(DATASET_MANIFEST), text.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_disjoint() {
        let sizes = Sizes {
            text_train: 50,
            text_dev: 10,
            ner_train: 30,
            ner_dev: 10,
            ner_test: 10,
        };
        let a = generate(3, sizes);
        assert_eq!(a, generate(3, sizes));
        assert_ne!(a, generate(4, sizes));
        let mut all: Vec<String> = a.text_train.clone();
        all.extend(a.text_dev.iter().cloned());
        for s in a.ner_train.iter().chain(&a.ner_dev).chain(&a.ner_test) {
            all.push(s.tokens.join(" "));
        }
        let n = all.len();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), n);
    }

    #[test]
    fn every_word_has_one_label() {
        let d = generate(5, Sizes::default());
        let mut label: BTreeMap<&str, Tag> = BTreeMap::new();
        for s in d.ner_train.iter().chain(&d.ner_test) {
            for (w, t) in s.tokens.iter().zip(&s.tags) {
                assert_eq!(*label.entry(w).or_insert(*t), *t, "{w}");
            }
        }
    }

    #[test]
    fn written_dataset_validates() {
        let dir = tempfile::tempdir().unwrap();
        let sizes = Sizes {
            text_train: 20,
            text_dev: 5,
            ner_train: 10,
            ner_dev: 5,
            ner_test: 5,
        };
        write_dataset(dir.path(), "syn", &generate(1, sizes)).unwrap();
        let m = DatasetManifest::load(&dir.path().join(DATASET_MANIFEST)).unwrap();
        m.validate_files(dir.path()).unwrap();
    }
}
