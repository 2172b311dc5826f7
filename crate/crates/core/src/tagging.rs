//! BIO tag set and subword label alignment.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use crate::bpe::SubwordModel;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EntityType {
    Per,
    Org,
    Loc,
    Date,
}

impl EntityType {
    pub const ALL: [EntityType; 4] = [Self::Per, Self::Org, Self::Loc, Self::Date];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Per => "PER",
            Self::Org => "ORG",
            Self::Loc => "LOC",
            Self::Date => "DATE",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.as_str() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Tag {
    O,
    B(EntityType),
    I(EntityType),
}

pub const N_LABELS: usize = 9;

impl Tag {
    /// Label order used for classifier outputs.
    pub const ALL: [Tag; N_LABELS] = [
        Tag::O,
        Tag::B(EntityType::Per),
        Tag::I(EntityType::Per),
        Tag::B(EntityType::Org),
        Tag::I(EntityType::Org),
        Tag::B(EntityType::Loc),
        Tag::I(EntityType::Loc),
        Tag::B(EntityType::Date),
        Tag::I(EntityType::Date),
    ];

    pub fn id(self) -> usize {
        match self {
            Tag::O => 0,
            Tag::B(t) => 1 + 2 * t as usize,
            Tag::I(t) => 2 + 2 * t as usize,
        }
    }

    pub fn from_id(id: usize) -> Option<Self> {
        Self::ALL.get(id).copied()
    }

    pub fn parse(s: &str) -> Result<Self> {
        let invalid = || Error::Schema(format!("tag {s:?} is not in the label set"));
        if s == "O" {
            return Ok(Tag::O);
        }
        let (prefix, ty) = s.split_once('-').ok_or_else(invalid)?;
        let ty = EntityType::parse(ty).ok_or_else(invalid)?;
        match prefix {
            "B" => Ok(Tag::B(ty)),
            "I" => Ok(Tag::I(ty)),
            _ => Err(invalid()),
        }
    }

    pub fn entity(self) -> Option<EntityType> {
        match self {
            Tag::O => None,
            Tag::B(t) | Tag::I(t) => Some(t),
        }
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tag::O => f.write_str("O"),
            Tag::B(t) => write!(f, "B-{}", t.as_str()),
            Tag::I(t) => write!(f, "I-{}", t.as_str()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaggedSentence {
    pub tokens: Vec<String>,
    pub tags: Vec<Tag>,
}

impl TaggedSentence {
    pub fn new(tokens: Vec<String>, tags: Vec<Tag>) -> Result<Self> {
        if tokens.len() != tags.len() {
            return Err(Error::Schema(format!(
                "{} tokens but {} tags",
                tokens.len(),
                tags.len()
            )));
        }
        if let Some(t) = tokens.iter().find(|t| t.is_empty() || t.chars().any(char::is_whitespace)) {
            return Err(Error::Data(format!("token {t:?} is empty or contains whitespace")));
        }
        Ok(Self { tokens, tags })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// A sentence laid out on subtokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Aligned {
    /// `[cls] subtokens [sep]`.
    pub ids: Vec<u32>,
    /// Label id at each word's first subtoken, 0 elsewhere.
    pub labels: Vec<usize>,
    /// True exactly at first subtokens of surviving words.
    pub loss_mask: Vec<bool>,
    /// Position of each word's first subtoken; `None` once truncated away.
    pub word_starts: Vec<Option<usize>>,
}

impl Aligned {
    pub fn dropped_words(&self) -> usize {
        self.word_starts.iter().filter(|s| s.is_none()).count()
    }
}

/// Encodes words one by one (every word after the first with its leading
/// space) so word boundaries coincide with subtoken boundaries.
pub fn align_labels(model: &SubwordModel, sentence: &TaggedSentence, max_len: usize) -> Result<Aligned> {
    if max_len < 2 {
        return Err(Error::Config(format!("max_len {max_len} cannot hold cls and sep")));
    }
    let sp = model.specials();
    let budget = max_len - 2;
    let mut ids = alloc::vec![sp.cls];
    let mut labels = alloc::vec![0];
    let mut loss_mask = alloc::vec![false];
    let mut word_starts = Vec::with_capacity(sentence.len());
    for (i, (word, tag)) in sentence.tokens.iter().zip(&sentence.tags).enumerate() {
        let pieces = if i == 0 {
            model.encode_word(word.as_bytes())
        } else {
            let mut spaced = String::with_capacity(word.len() + 1);
            spaced.push(' ');
            spaced.push_str(word);
            model.encode_word(spaced.as_bytes())
        };
        let room = budget - (ids.len() - 1);
        if room == 0 {
            word_starts.push(None);
            continue;
        }
        word_starts.push(Some(ids.len()));
        for (k, &p) in pieces.iter().take(room).enumerate() {
            ids.push(p);
            labels.push(if k == 0 { tag.id() } else { 0 });
            loss_mask.push(k == 0);
        }
    }
    ids.push(sp.sep);
    labels.push(0);
    loss_mask.push(false);
    Ok(Aligned {
        ids,
        labels,
        loss_mask,
        word_starts,
    })
}
