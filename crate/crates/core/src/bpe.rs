//! Byte-level byte-pair encoding.
//!
//! Id layout: the five special tokens first, then the 256 byte tokens, then
//! one id per merge in training order. Text is pre-split into words at each
//! space, the space staying attached to the word that follows it, and merges
//! never cross a word boundary.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use sha2::{Digest, Sha256};

use crate::encoder::SpecialTokens;
use crate::error::{Error, Result};

pub const N_SPECIALS: usize = 5;
pub const BYTE_OFFSET: u32 = N_SPECIALS as u32;
/// Specials plus the byte alphabet.
pub const BASE_VOCAB: usize = N_SPECIALS + 256;
/// Pairs seen fewer times than this are never merged.
pub const MIN_PAIR_FREQUENCY: u64 = 2;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubwordModel {
    specials: SpecialTokens,
    merges: Vec<(u32, u32)>,
    ranks: BTreeMap<(u32, u32), u32>,
    pieces: Vec<Vec<u8>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainOutcome {
    pub model: SubwordModel,
    /// Set when the corpus ran out of mergeable pairs before `vocab_size`.
    pub warning: Option<String>,
}

/// Splits `text` before every space.
pub fn pretokenize(text: &str) -> Vec<&str> {
    let mut words = Vec::new();
    let mut start = 0;
    for (i, c) in text.char_indices() {
        if c == ' ' && i > start {
            words.push(&text[start..i]);
            start = i;
        }
    }
    if start < text.len() {
        words.push(&text[start..]);
    }
    words
}

fn byte_id(b: u8) -> u32 {
    BYTE_OFFSET + b as u32
}

impl SubwordModel {
    /// Rebuilds a model from its merge list, validating every rule.
    pub fn from_merges(merges: Vec<(u32, u32)>) -> Result<Self> {
        let specials = SpecialTokens::default();
        let mut pieces: Vec<Vec<u8>> = vec![Vec::new(); N_SPECIALS];
        pieces.extend((0..=255u8).map(|b| vec![b]));
        let mut ranks = BTreeMap::new();
        for (rank, &(a, b)) in merges.iter().enumerate() {
            let next = pieces.len() as u32;
            if a < BYTE_OFFSET || b < BYTE_OFFSET || a >= next || b >= next {
                return Err(Error::Data(format!(
                    "merge {rank} ({a}, {b}) refers to an unknown or special id"
                )));
            }
            if ranks.insert((a, b), rank as u32).is_some() {
                return Err(Error::Data(format!("merge {rank} ({a}, {b}) is repeated")));
            }
            let mut piece = pieces[a as usize].clone();
            piece.extend_from_slice(&pieces[b as usize]);
            pieces.push(piece);
        }
        Ok(Self {
            specials,
            merges,
            ranks,
            pieces,
        })
    }

    pub fn specials(&self) -> SpecialTokens {
        self.specials
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    pub fn vocab_size(&self) -> usize {
        self.pieces.len()
    }

    /// Bytes a token id stands for; empty for specials.
    pub fn piece(&self, id: u32) -> Option<&[u8]> {
        self.pieces.get(id as usize).map(Vec::as_slice)
    }

    /// First eight bytes of a SHA-256 over the merge list, as a little-endian
    /// integer. Never zero.
    pub fn vocab_hash(&self) -> u64 {
        let mut h = Sha256::new();
        h.update(b"bpe-v1");
        h.update((self.merges.len() as u64).to_le_bytes());
        for &(a, b) in &self.merges {
            h.update(a.to_le_bytes());
            h.update(b.to_le_bytes());
        }
        let digest = h.finalize();
        let mut first = [0u8; 8];
        first.copy_from_slice(&digest[..8]);
        u64::from_le_bytes(first).max(1)
    }

    /// Token ids of one pre-split word.
    pub fn encode_word(&self, word: &[u8]) -> Vec<u32> {
        let mut ids: Vec<u32> = word.iter().map(|&b| byte_id(b)).collect();
        loop {
            let best = ids
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0], w[1])).map(|&r| (r, (w[0], w[1]))))
                .min();
            let Some((rank, pair)) = best else { break };
            let merged = BASE_VOCAB as u32 + rank;
            let mut out = Vec::with_capacity(ids.len());
            let mut i = 0;
            while i < ids.len() {
                if i + 1 < ids.len() && (ids[i], ids[i + 1]) == pair {
                    out.push(merged);
                    i += 2;
                } else {
                    out.push(ids[i]);
                    i += 1;
                }
            }
            ids = out;
        }
        ids
    }

    /// Token ids of `text`, without special tokens.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        pretokenize(text)
            .into_iter()
            .flat_map(|w| self.encode_word(w.as_bytes()))
            .collect()
    }

    /// `[cls] ids [sep]`, truncated to `max_len` with the final `sep` kept.
    /// The flag reports whether truncation happened.
    pub fn encode_sentence(&self, text: &str, max_len: usize) -> Result<(Vec<u32>, bool)> {
        if max_len < 2 {
            return Err(Error::Config(format!("max_len {max_len} cannot hold cls and sep")));
        }
        let body = self.encode(text);
        let keep = body.len().min(max_len - 2);
        let mut ids = Vec::with_capacity(keep + 2);
        ids.push(self.specials.cls);
        ids.extend_from_slice(&body[..keep]);
        ids.push(self.specials.sep);
        Ok((ids, keep < body.len()))
    }

    /// Concatenated bytes of all non-special ids. Unknown ids are an error.
    pub fn decode_bytes(&self, ids: &[u32]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for &id in ids {
            let piece = self.piece(id).ok_or(Error::Index {
                context: "token id",
                index: id as usize,
                bound: self.vocab_size(),
            })?;
            out.extend_from_slice(piece);
        }
        Ok(out)
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let bytes = self.decode_bytes(ids)?;
        String::from_utf8(bytes).map_err(|e| Error::Data(format!("decoded bytes are not UTF-8: {e}")))
    }
}

struct PairCounter {
    words: Vec<(Vec<u32>, u64)>,
    counts: BTreeMap<(u32, u32), u64>,
    occurrences: BTreeMap<(u32, u32), BTreeSet<usize>>,
}

impl PairCounter {
    fn new(words: Vec<(Vec<u32>, u64)>) -> Self {
        let mut this = Self {
            words,
            counts: BTreeMap::new(),
            occurrences: BTreeMap::new(),
        };
        for w in 0..this.words.len() {
            this.account(w, true);
        }
        this
    }

    fn account(&mut self, w: usize, add: bool) {
        let (ids, freq) = &self.words[w];
        for pair in ids.windows(2).map(|p| (p[0], p[1])) {
            let c = self.counts.entry(pair).or_insert(0);
            if add {
                *c += freq;
                self.occurrences.entry(pair).or_default().insert(w);
            } else {
                *c -= freq;
                if *c == 0 {
                    self.counts.remove(&pair);
                }
            }
        }
    }

    fn merge(&mut self, pair: (u32, u32), new_id: u32) {
        let Some(words) = self.occurrences.remove(&pair) else { return };
        for w in words {
            if !self.words[w].0.windows(2).any(|p| (p[0], p[1]) == pair) {
                continue;
            }
            self.account(w, false);
            let ids = &self.words[w].0;
            let mut out = Vec::with_capacity(ids.len());
            let mut i = 0;
            while i < ids.len() {
                if i + 1 < ids.len() && (ids[i], ids[i + 1]) == pair {
                    out.push(new_id);
                    i += 2;
                } else {
                    out.push(ids[i]);
                    i += 1;
                }
            }
            self.words[w].0 = out;
            self.account(w, true);
        }
    }
}

/// Learns merges until the vocabulary reaches `vocab_size` or no pair occurs
/// at least [`MIN_PAIR_FREQUENCY`] times.
///
/// Each round merges the most frequent adjacent pair; ties go to the pair
/// whose byte strings sort first, comparing the left pieces and then the right.
pub fn train_subwords<'a>(
    sentences: impl IntoIterator<Item = &'a str>,
    vocab_size: usize,
) -> Result<TrainOutcome> {
    if vocab_size <= BASE_VOCAB {
        return Err(Error::Config(format!(
            "vocab_size {vocab_size} must exceed the {BASE_VOCAB} special and byte tokens"
        )));
    }
    let mut freq: BTreeMap<&[u8], u64> = BTreeMap::new();
    for s in sentences {
        for w in pretokenize(s) {
            *freq.entry(w.as_bytes()).or_insert(0) += 1;
        }
    }
    let words = freq
        .into_iter()
        .map(|(w, c)| (w.iter().map(|&b| byte_id(b)).collect(), c))
        .collect();
    let mut counter = PairCounter::new(words);
    let mut model = SubwordModel::from_merges(Vec::new())?;
    while model.vocab_size() < vocab_size {
        let mut best: Option<((u32, u32), u64)> = None;
        for (&pair, &count) in &counter.counts {
            let better = match best {
                None => true,
                Some((bp, bc)) => match count.cmp(&bc) {
                    Ordering::Greater => true,
                    Ordering::Less => false,
                    Ordering::Equal => {
                        let key = |p: (u32, u32)| (&model.pieces[p.0 as usize], &model.pieces[p.1 as usize]);
                        key(pair) < key(bp)
                    }
                },
            };
            if better {
                best = Some((pair, count));
            }
        }
        let Some((pair, count)) = best else { break };
        if count < MIN_PAIR_FREQUENCY {
            break;
        }
        let new_id = model.vocab_size() as u32;
        counter.merge(pair, new_id);
        model.merges.push(pair);
        model.ranks.insert(pair, (model.merges.len() - 1) as u32);
        let mut piece = model.pieces[pair.0 as usize].clone();
        piece.extend_from_slice(&model.pieces[pair.1 as usize]);
        model.pieces.push(piece);
    }
    let warning = (model.vocab_size() < vocab_size).then(|| {
        format!(
            "corpus supports only {} of the requested {vocab_size} tokens",
            model.vocab_size()
        )
    });
    Ok(TrainOutcome { model, warning })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn piece_str(m: &SubwordModel, id: u32) -> String {
        String::from_utf8(m.piece(id).unwrap().to_vec()).unwrap()
    }

    #[test]
    fn pretokenize_keeps_spaces_on_following_word() {
        assert_eq!(pretokenize("aaab aaab"), vec!["aaab", " aaab"]);
        assert_eq!(pretokenize("  x"), vec![" ", " x"]);
        assert!(pretokenize("").is_empty());
    }

    #[test]
    fn first_merge_is_most_frequent_pair() {
        // pairs: (a,a) ×4, (a,b) ×2, (' ',a) ×1
        let out = train_subwords(["aaab aaab"], 264).unwrap();
        let m = &out.model;
        let first = m.merges()[0];
        assert_eq!(first, (byte_id(b'a'), byte_id(b'a')));
        assert_eq!(piece_str(m, BASE_VOCAB as u32), "aa");
        assert!(out.warning.is_none());
        let out = train_subwords(["aaab aaab"], 300).unwrap();
        assert!(out.warning.is_some());
        assert!(out.model.vocab_size() < 300);
    }

    #[test]
    fn ties_go_to_smaller_byte_strings() {
        // (c,d) and (a,b) both occur twice.
        let out = train_subwords(["cd ab", "cd ab"], 263).unwrap();
        let ab = (byte_id(b'a'), byte_id(b'b'));
        assert_eq!(out.model.merges()[0].0, byte_id(b' '));
        let out = train_subwords(["cdab", "cdab"], 262).unwrap();
        assert_eq!(out.model.merges()[0], ab);
    }

    #[test]
    fn rejects_vocab_without_room_for_merges() {
        assert!(train_subwords(["aaab aaab"], 260).is_err());
        assert!(train_subwords(["aaab aaab"], BASE_VOCAB).is_err());
    }

    #[test]
    fn round_trip_and_determinism() {
        let corpus = [
            "the cat sat on the mat",
            "the dog sat on the log",
            "ሰላም ለዓለም ሰላም",
            "emoji 🙂 and accents é à",
        ];
        let a = train_subwords(corpus, 320).unwrap().model;
        let b = train_subwords(corpus, 320).unwrap().model;
        assert_eq!(a.merges(), b.merges());
        assert_eq!(a.vocab_hash(), b.vocab_hash());
        for s in corpus.iter().chain(&["unseen text ሀ", "", " leading", "trailing  "]) {
            let ids = a.encode(s);
            assert_eq!(a.decode(&ids).unwrap(), *s);
            assert_eq!(a.encode(&a.decode(&ids).unwrap()), ids);
            assert!(ids.iter().all(|&id| id >= BYTE_OFFSET), "no specials or unk");
        }
    }

    #[test]
    fn sentence_framing_and_truncation() {
        let m = train_subwords(["hello world", "hello there"], 300).unwrap().model;
        let sp = m.specials();
        assert_eq!(m.encode_sentence("", 8).unwrap(), (vec![sp.cls, sp.sep], false));
        let (full, cut) = m.encode_sentence("hello world hello there", 64).unwrap();
        assert!(!cut);
        let (short, cut) = m.encode_sentence("hello world hello there", 4).unwrap();
        assert!(cut);
        assert_eq!(short.len(), 4);
        assert_eq!(short[..3], full[..3]);
        assert_eq!(*short.last().unwrap(), sp.sep);
    }

    #[test]
    fn from_merges_rebuilds_same_model() {
        let m = train_subwords(["abab abab cdcd"], 280).unwrap().model;
        let rebuilt = SubwordModel::from_merges(m.merges().to_vec()).unwrap();
        assert_eq!(rebuilt, m);
        assert!(SubwordModel::from_merges(vec![(0, 5)]).is_err());
        assert!(SubwordModel::from_merges(vec![(5, 400)]).is_err());
    }
}
