//! Span decoding, span-level F1 and the cross-language results table.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Write;

use crate::error::{Error, Result};
use crate::tagging::{EntityType, Tag};

/// Entity over word positions `start..end`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SpanEntity {
    pub entity_type: EntityType,
    pub start: usize,
    pub end: usize,
}

impl SpanEntity {
    pub fn new(entity_type: EntityType, start: usize, end: usize) -> Self {
        Self {
            entity_type,
            start,
            end,
        }
    }
}

/// Spans of a BIO sequence. An `I-X` that does not continue an open `X`
/// span starts a new one.
pub fn decode_bio(tags: &[Tag]) -> Vec<SpanEntity> {
    let mut spans = Vec::new();
    let mut open: Option<(EntityType, usize)> = None;
    for (i, &tag) in tags.iter().enumerate() {
        let continues = matches!((tag, open), (Tag::I(t), Some((o, _))) if t == o);
        if continues {
            continue;
        }
        if let Some((t, s)) = open.take() {
            spans.push(SpanEntity::new(t, s, i));
        }
        open = tag.entity().map(|t| (t, i));
    }
    if let Some((t, s)) = open {
        spans.push(SpanEntity::new(t, s, tags.len()));
    }
    spans
}

/// Canonical BIO tags (`B-X I-X ...`) for non-overlapping spans.
pub fn encode_bio(spans: &[SpanEntity], len: usize) -> Result<Vec<Tag>> {
    let mut tags = vec![Tag::O; len];
    let mut taken = vec![false; len];
    for s in spans {
        if s.start >= s.end || s.end > len {
            return Err(Error::Contract(format!("span {s:?} invalid for length {len}")));
        }
        if taken[s.start..s.end].iter().any(|&t| t) {
            return Err(Error::Contract(format!("span {s:?} overlaps another span")));
        }
        tags[s.start] = Tag::B(s.entity_type);
        for i in s.start..s.end {
            taken[i] = true;
            if i > s.start {
                tags[i] = Tag::I(s.entity_type);
            }
        }
    }
    Ok(tags)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counts {
    pub gold: usize,
    pub predicted: usize,
    pub correct: usize,
}

impl Counts {
    /// 0 when nothing was predicted.
    pub fn precision(&self) -> f64 {
        ratio(self.correct, self.predicted)
    }

    /// 0 when there is nothing to find.
    pub fn recall(&self) -> f64 {
        ratio(self.correct, self.gold)
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    fn add(&mut self, other: Counts) {
        self.gold += other.gold;
        self.predicted += other.predicted;
        self.correct += other.correct;
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct F1Report {
    pub micro: Counts,
    pub per_type: BTreeMap<EntityType, Counts>,
}

impl F1Report {
    pub fn precision(&self) -> f64 {
        self.micro.precision()
    }
    pub fn recall(&self) -> f64 {
        self.micro.recall()
    }
    pub fn f1(&self) -> f64 {
        self.micro.f1()
    }
}

/// Micro-averaged exact-match span scores over aligned sentences.
pub fn span_f1(gold: &[Vec<SpanEntity>], pred: &[Vec<SpanEntity>]) -> Result<F1Report> {
    if gold.len() != pred.len() {
        return Err(Error::Contract(format!(
            "{} gold sentences but {} predicted",
            gold.len(),
            pred.len()
        )));
    }
    let mut report = F1Report::default();
    for t in EntityType::ALL {
        report.per_type.insert(t, Counts::default());
    }
    for (g, p) in gold.iter().zip(pred) {
        let g: BTreeSet<&SpanEntity> = g.iter().collect();
        let p: BTreeSet<&SpanEntity> = p.iter().collect();
        for t in EntityType::ALL {
            let of = |s: &&&SpanEntity| s.entity_type == t;
            let c = Counts {
                gold: g.iter().filter(of).count(),
                predicted: p.iter().filter(of).count(),
                correct: g.intersection(&p).filter(of).count(),
            };
            report.micro.add(c);
            report.per_type.get_mut(&t).expect("all types present").add(c);
        }
    }
    Ok(report)
}

/// The four score columns, in display order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Column {
    BaselineDev,
    BaselineTest,
    AdapterDev,
    AdapterTest,
}

impl Column {
    pub const ALL: [Column; 4] = [
        Self::BaselineDev,
        Self::BaselineTest,
        Self::AdapterDev,
        Self::AdapterTest,
    ];

    pub fn mode(self) -> &'static str {
        match self {
            Self::BaselineDev | Self::BaselineTest => "baseline",
            Self::AdapterDev | Self::AdapterTest => "adapter",
        }
    }

    pub fn split(self) -> &'static str {
        match self {
            Self::BaselineDev | Self::AdapterDev => "dev",
            Self::BaselineTest | Self::AdapterTest => "test",
        }
    }

    pub fn from_parts(mode: &str, split: &str) -> Option<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.mode() == mode && c.split() == split)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultsRow {
    pub language: String,
    pub cells: [Option<f64>; 4],
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultsTable {
    pub rows: Vec<ResultsRow>,
    /// Unweighted mean of each column over the rows that have a value.
    pub average: [Option<f64>; 4],
    pub warnings: Vec<String>,
}

/// Averages each column on unrounded values. Missing cells are left out of
/// the mean and reported in `warnings`.
pub fn build_results_table(rows: Vec<ResultsRow>) -> Result<ResultsTable> {
    if rows.is_empty() {
        return Err(Error::Data("results table has no rows".into()));
    }
    let mut warnings = Vec::new();
    let mut average = [None; 4];
    for (c, col) in Column::ALL.iter().enumerate() {
        let mut values = Vec::new();
        for row in &rows {
            match row.cells[c] {
                Some(v) => values.push(v),
                None => warnings.push(format!(
                    "{} has no {} {} score; excluded from the average",
                    row.language,
                    col.mode(),
                    col.split()
                )),
            }
        }
        if !values.is_empty() {
            let total = values.iter().fold(0.0, |acc, v| acc + v);
            average[c] = Some(total / values.len() as f64);
        }
    }
    Ok(ResultsTable {
        rows,
        average,
        warnings,
    })
}

/// Two-decimal rendering, `-` for a missing cell.
pub fn format_cell(value: Option<f64>) -> String {
    match value {
        Some(v) => format!("{v:.2}"),
        None => String::from("-"),
    }
}

impl ResultsTable {
    /// Aligned plain-text table with an `Average` footer.
    pub fn render_text(&self) -> String {
        let width = self
            .rows
            .iter()
            .map(|r| r.language.chars().count())
            .chain([8])
            .max()
            .unwrap_or(8);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<width$}  {:>13}  {:>13}  {:>13}  {:>13}",
            "Language", "Baseline Dev", "Baseline Test", "Adapter Dev", "Adapter Test"
        );
        let line = |out: &mut String, name: &str, cells: &[Option<f64>; 4]| {
            let _ = write!(out, "{name:<width$}");
            for c in cells {
                let _ = write!(out, "  {:>13}", format_cell(*c));
            }
            out.push('\n');
        };
        for row in &self.rows {
            line(&mut out, &row.language, &row.cells);
        }
        line(&mut out, "Average", &self.average);
        out
    }
}
