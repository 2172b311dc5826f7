//! Raw text corpora, CoNLL files and dataset manifests.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use adaptlab_core::tagging::{Tag, TaggedSentence};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One sentence per line, as read from a text file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub sentences: Vec<String>,
    pub source: PathBuf,
    /// Physical lines in the file, blank ones included.
    pub lines: usize,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    /// Errors on an empty corpus; used where training needs data.
    pub fn require_nonempty(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::Core(adaptlab_core::Error::Data(format!(
                "corpus {} has no sentences",
                self.source.display()
            ))));
        }
        Ok(())
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Splits into lines (`\n`, with an optional `\r`), validating UTF-8 per line
/// so a decode error can name its line.
fn utf8_lines<'a>(path: &Path, bytes: &'a [u8]) -> Result<Vec<&'a str>> {
    let mut out = Vec::new();
    let body = bytes.strip_suffix(b"\n").unwrap_or(bytes);
    if body.is_empty() && bytes.len() <= 1 {
        return Ok(out);
    }
    for (i, raw) in body.split(|&b| b == b'\n').enumerate() {
        let raw = raw.strip_suffix(b"\r").unwrap_or(raw);
        let line = std::str::from_utf8(raw)
            .map_err(|e| Error::line(path, i + 1, format!("invalid UTF-8 at column {}", e.valid_up_to() + 1)))?;
        out.push(line);
    }
    Ok(out)
}

pub fn load_text_corpus(path: &Path) -> Result<Corpus> {
    let bytes = read_bytes(path)?;
    let lines = utf8_lines(path, &bytes)?;
    let sentences = lines
        .iter()
        .map(|l| l.trim())
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect();
    Ok(Corpus {
        sentences,
        source: path.to_path_buf(),
        lines: lines.len(),
    })
}

pub fn write_text_corpus(path: &Path, sentences: &[String]) -> Result<()> {
    let mut out = String::new();
    for s in sentences {
        out.push_str(s);
        out.push('\n');
    }
    crate::container::write_atomic(path, out.as_bytes())
}

/// Parses "token SPACE tag" lines with blank lines between sentences. A tab
/// is accepted when the line has no space. Lines starting with `#` are
/// comments.
pub fn parse_conll(path: &Path, text_bytes: &[u8]) -> Result<Vec<TaggedSentence>> {
    let lines = utf8_lines(path, text_bytes)?;
    let mut out = Vec::new();
    let mut tokens = Vec::new();
    let mut tags = Vec::new();
    let mut flush = |tokens: &mut Vec<String>, tags: &mut Vec<Tag>, line: usize| -> Result<()> {
        if !tokens.is_empty() {
            let s = TaggedSentence::new(std::mem::take(tokens), std::mem::take(tags))
                .map_err(|e| Error::line(path, line, e.to_string()))?;
            out.push(s);
        }
        Ok(())
    };
    for (i, line) in lines.iter().enumerate() {
        let n = i + 1;
        let line = line.trim_end();
        if line.starts_with('#') {
            continue;
        }
        if line.trim().is_empty() {
            flush(&mut tokens, &mut tags, n)?;
            continue;
        }
        let delim = if line.contains(' ') { ' ' } else { '\t' };
        let Some((token, tag)) = line.rsplit_once(delim) else {
            return Err(Error::line(path, n, "expected a token and a tag"));
        };
        if token.is_empty() || token.chars().any(char::is_whitespace) {
            return Err(Error::line(path, n, format!("format error: token {token:?} contains whitespace")));
        }
        let tag = Tag::parse(tag).map_err(|e| Error::line(path, n, e.to_string()))?;
        tokens.push(token.to_string());
        tags.push(tag);
    }
    flush(&mut tokens, &mut tags, lines.len())?;
    Ok(out)
}

pub fn load_conll(path: &Path) -> Result<Vec<TaggedSentence>> {
    parse_conll(path, &read_bytes(path)?)
}

pub fn format_conll(sentences: &[TaggedSentence]) -> String {
    let mut out = String::new();
    for (i, s) in sentences.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        for (token, tag) in s.tokens.iter().zip(&s.tags) {
            let _ = writeln!(out, "{token} {tag}");
        }
    }
    out
}

pub fn write_conll(path: &Path, sentences: &[TaggedSentence]) -> Result<()> {
    crate::container::write_atomic(path, format_conll(sentences).as_bytes())
}

/// One partition of a dataset and its declared size.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitEntry {
    /// Relative to the manifest's directory; absent for schema-only checks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    pub count: usize,
}

/// Declared splits of one language: `train`/`dev` for adapter text and
/// `train`/`dev`/`test` for NER.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LanguageSplits {
    /// Size of the whole corpus the partitions are cut from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total: Option<usize>,
    pub adapter: BTreeMap<String, SplitEntry>,
    pub ner: BTreeMap<String, SplitEntry>,
}

/// TOML manifest keyed by language code.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub languages: BTreeMap<String, LanguageSplits>,
}

const ADAPTER_SPLITS: [&str; 2] = ["train", "dev"];
const NER_SPLITS: [&str; 3] = ["train", "dev", "test"];

impl DatasetManifest {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("dataset manifest: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Checks split names and, where a total is declared, that the adapter
    /// partitions add up to it.
    pub fn validate_schema(&self) -> Result<()> {
        for (lang, s) in &self.languages {
            let names = |m: &BTreeMap<String, SplitEntry>| m.keys().cloned().collect::<Vec<_>>();
            if names(&s.adapter) != sorted(&ADAPTER_SPLITS) {
                return Err(Error::Config(format!("{lang}: adapter splits must be train and dev")));
            }
            if names(&s.ner) != sorted(&NER_SPLITS) {
                return Err(Error::Config(format!("{lang}: NER splits must be train, dev and test")));
            }
            if let Some(total) = s.total {
                let sum: usize = s.adapter.values().map(|e| e.count).sum();
                if sum != total {
                    return Err(Error::Config(format!(
                        "{lang}: adapter partitions sum to {sum}, corpus has {total}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Schema check plus, for every split with a path, that the file holds
    /// the declared number of sentences and no sentence is in two splits.
    pub fn validate_files(&self, base: &Path) -> Result<()> {
        self.validate_schema()?;
        for (lang, s) in &self.languages {
            let mut seen: BTreeMap<String, String> = BTreeMap::new();
            for (split, e) in &s.adapter {
                let Some(p) = &e.path else { continue };
                let c = load_text_corpus(&base.join(p))?;
                check_count(lang, "adapter", split, c.len(), e.count)?;
                for sentence in c.sentences {
                    check_disjoint(&mut seen, lang, "adapter", split, sentence)?;
                }
            }
            seen.clear();
            for (split, e) in &s.ner {
                let Some(p) = &e.path else { continue };
                let c = load_conll(&base.join(p))?;
                check_count(lang, "ner", split, c.len(), e.count)?;
                for sentence in c {
                    check_disjoint(&mut seen, lang, "ner", split, sentence.tokens.join(" "))?;
                }
            }
        }
        Ok(())
    }
}

fn sorted(names: &[&str]) -> Vec<String> {
    let mut v: Vec<String> = names.iter().map(|s| s.to_string()).collect();
    v.sort();
    v
}

fn check_count(lang: &str, kind: &str, split: &str, found: usize, declared: usize) -> Result<()> {
    if found != declared {
        return Err(Error::Config(format!(
            "{lang} {kind} {split}: manifest declares {declared} sentences, file has {found}"
        )));
    }
    Ok(())
}

fn check_disjoint(
    seen: &mut BTreeMap<String, String>,
    lang: &str,
    kind: &str,
    split: &str,
    sentence: String,
) -> Result<()> {
    if let Some(other) = seen.get(&sentence) {
        if other != split {
            return Err(Error::Config(format!(
                "{lang} {kind}: sentence {sentence:?} is in both {other} and {split}"
            )));
        }
    }
    seen.insert(sentence, split.to_string());
    Ok(())
}
