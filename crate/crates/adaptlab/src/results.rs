//! Per-run score records and the language-by-mode report built from them.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use adaptlab_core::eval::{build_results_table, Column, F1Report, ResultsRow, ResultsTable};
use serde::{Deserialize, Serialize};

use crate::container::write_atomic;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportMode {
    Baseline,
    Adapter,
}

impl ReportMode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Baseline => "baseline",
            Self::Adapter => "adapter",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub gold: usize,
    pub predicted: usize,
    pub correct: usize,
}

/// Micro scores first, then one entry per entity type.
pub fn scores_of(report: &F1Report) -> BTreeMap<String, TypeScores> {
    let conv = |c: &adaptlab_core::eval::Counts| TypeScores {
        precision: c.precision(),
        recall: c.recall(),
        f1: c.f1(),
        gold: c.gold,
        predicted: c.predicted,
        correct: c.correct,
    };
    let mut out = BTreeMap::new();
    out.insert("micro".to_string(), conv(&report.micro));
    for (t, c) in &report.per_type {
        out.insert(t.as_str().to_string(), conv(c));
    }
    out
}

/// One run's scores, or the mean over seeds when `seed` is `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub language: String,
    pub mode: ReportMode,
    pub seed: Option<u64>,
    pub dev_f1: Option<f64>,
    pub test_f1: Option<f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub dev_scores: BTreeMap<String, TypeScores>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub test_scores: BTreeMap<String, TypeScores>,
}

impl ResultRecord {
    fn file_name(&self) -> String {
        let seed = self.seed.map_or("mean".to_string(), |s| format!("seed{s}"));
        format!("{}.{}.{seed}.json", self.language, self.mode.as_str())
    }
}

/// Mean over per-seed records, skipping missing values.
pub fn mean_record(records: &[ResultRecord]) -> Option<ResultRecord> {
    let first = records.first()?;
    let mean = |f: fn(&ResultRecord) -> Option<f64>| {
        let v: Vec<f64> = records.iter().filter_map(f).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    Some(ResultRecord {
        language: first.language.clone(),
        mode: first.mode,
        seed: None,
        dev_f1: mean(|r| r.dev_f1),
        test_f1: mean(|r| r.test_f1),
        dev_scores: BTreeMap::new(),
        test_scores: BTreeMap::new(),
    })
}

/// A directory of JSON records.
pub struct ResultsStore {
    dir: PathBuf,
}

impl ResultsStore {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn write(&self, record: &ResultRecord) -> Result<PathBuf> {
        if record.language.is_empty() || record.language.contains(['/', '.', '\\']) {
            return Err(Error::Usage(format!("invalid language code {:?}", record.language)));
        }
        let path = self.dir.join(record.file_name());
        let mut text = serde_json::to_string_pretty(record).map_err(|e| Error::Config(e.to_string()))?;
        text.push('\n');
        write_atomic(&path, text.as_bytes())?;
        Ok(path)
    }

    pub fn load(&self) -> Result<Vec<ResultRecord>> {
        let entries = match fs::read_dir(&self.dir) {
            Ok(e) => e,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(Error::io(&self.dir, e)),
        };
        let mut paths: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        paths.sort();
        let mut out = Vec::with_capacity(paths.len());
        for p in paths {
            let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
            out.push(serde_json::from_str(&text).map_err(|e| Error::line(&p, e.line(), e.to_string()))?);
        }
        Ok(out)
    }

    /// One row per language. Each mode uses its mean record when present,
    /// otherwise the mean of its per-seed records.
    pub fn rows(&self) -> Result<Vec<ResultsRow>> {
        rows_from_records(&self.load()?)
    }
}

pub fn rows_from_records(records: &[ResultRecord]) -> Result<Vec<ResultsRow>> {
    let mut groups: BTreeMap<(&str, ReportMode), Vec<&ResultRecord>> = BTreeMap::new();
    for r in records {
        groups.entry((r.language.as_str(), r.mode)).or_default().push(r);
    }
    let mut rows: BTreeMap<&str, [Option<f64>; 4]> = BTreeMap::new();
    for ((lang, mode), group) in groups {
        let chosen = match group.iter().find(|r| r.seed.is_none()) {
            Some(m) => (*m).clone(),
            None => {
                let owned: Vec<ResultRecord> = group.into_iter().cloned().collect();
                mean_record(&owned).expect("group is nonempty")
            }
        };
        let cells = rows.entry(lang).or_insert([None; 4]);
        for (split, value) in [("dev", chosen.dev_f1), ("test", chosen.test_f1)] {
            let col = Column::from_parts(mode.as_str(), split).expect("known column");
            cells[col as usize] = value;
        }
    }
    Ok(rows
        .into_iter()
        .map(|(language, cells)| ResultsRow {
            language: language.to_string(),
            cells,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeCells {
    pub dev: Option<f64>,
    pub test: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub language: String,
    pub baseline: ModeCells,
    pub adapter: ModeCells,
}

/// Structured form of a [`ResultsTable`]; values are unrounded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub rows: Vec<ReportRow>,
    pub average: ReportRow,
    pub warnings: Vec<String>,
}

fn report_row(language: &str, c: &[Option<f64>; 4]) -> ReportRow {
    ReportRow {
        language: language.into(),
        baseline: ModeCells {
            dev: c[Column::BaselineDev as usize],
            test: c[Column::BaselineTest as usize],
        },
        adapter: ModeCells {
            dev: c[Column::AdapterDev as usize],
            test: c[Column::AdapterTest as usize],
        },
    }
}

impl ReportFile {
    pub fn of(table: &ResultsTable) -> Self {
        Self {
            rows: table.rows.iter().map(|r| report_row(&r.language, &r.cells)).collect(),
            average: report_row("Average", &table.average),
            warnings: table.warnings.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("report JSON: {e}")))
    }
}

impl ReportRow {
    pub fn cells(&self) -> [Option<f64>; 4] {
        let mut c = [None; 4];
        c[Column::BaselineDev as usize] = self.baseline.dev;
        c[Column::BaselineTest as usize] = self.baseline.test;
        c[Column::AdapterDev as usize] = self.adapter.dev;
        c[Column::AdapterTest as usize] = self.adapter.test;
        c
    }
}

/// Builds the table, writes `<out>` (text) and `<out>.json`, and returns the table.
pub fn write_report(store: &ResultsStore, out: &Path) -> Result<ResultsTable> {
    let table = build_results_table(store.rows()?)?;
    write_atomic(out, table.render_text().as_bytes())?;
    let mut json = out.as_os_str().to_owned();
    json.push(".json");
    write_atomic(Path::new(&json), ReportFile::of(&table).to_json().as_bytes())?;
    Ok(table)
}

/// Parses the text table back into language rows and the average row.
pub fn parse_text_table(text: &str) -> Result<Vec<(String, [Option<String>; 4])>> {
    let mut out = Vec::new();
    for line in text.lines().skip(1) {
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [lang, a, b, c, d] = fields[..] else {
            return Err(Error::Config(format!("malformed table line {line:?}")));
        };
        let cell = |s: &str| (s != "-").then(|| s.to_string());
        out.push((lang.to_string(), [cell(a), cell(b), cell(c), cell(d)]));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(lang: &str, mode: ReportMode, seed: Option<u64>, dev: f64, test: f64) -> ResultRecord {
        ResultRecord {
            language: lang.into(),
            mode,
            seed,
            dev_f1: Some(dev),
            test_f1: Some(test),
            dev_scores: BTreeMap::new(),
            test_scores: BTreeMap::new(),
        }
    }

    #[test]
    fn seeds_average_unless_a_mean_record_exists() {
        let dir = tempfile::tempdir().unwrap();
        let store = ResultsStore::new(dir.path());
        store.write(&rec("amh", ReportMode::Baseline, Some(0), 0.5, 0.4)).unwrap();
        store.write(&rec("amh", ReportMode::Baseline, Some(1), 0.7, 0.6)).unwrap();
        store.write(&rec("amh", ReportMode::Adapter, Some(0), 0.1, 0.1)).unwrap();
        store.write(&rec("amh", ReportMode::Adapter, None, 0.3, 0.2)).unwrap();
        let rows = store.rows().unwrap();
        assert_eq!(rows.len(), 1);
        let c = rows[0].cells;
        assert!((c[0].unwrap() - 0.6).abs() < 1e-12);
        assert!((c[1].unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(c[2], Some(0.3));
        assert_eq!(c[3], Some(0.2));
    }

    #[test]
    fn json_and_text_agree() {
        let dir = tempfile::tempdir().unwrap();
        let store = ResultsStore::new(dir.path().join("results"));
        store.write(&rec("hau", ReportMode::Baseline, None, 0.814, 0.8)).unwrap();
        store.write(&rec("yor", ReportMode::Adapter, None, 0.333, 0.5)).unwrap();
        let out = dir.path().join("report.txt");
        let table = write_report(&store, &out).unwrap();
        let text = fs::read_to_string(&out).unwrap();
        let json = ReportFile::parse(&fs::read_to_string(dir.path().join("report.txt.json")).unwrap()).unwrap();
        assert_eq!(json, ReportFile::of(&table));
        let parsed = parse_text_table(&text).unwrap();
        let json_rows: Vec<_> = json.rows.iter().chain([&json.average]).collect();
        assert_eq!(parsed.len(), json_rows.len());
        for ((lang, cells), row) in parsed.iter().zip(json_rows) {
            assert_eq!(lang, &row.language);
            let expected = row.cells().map(|c| c.map(|v| format!("{v:.2}")));
            assert_eq!(cells, &expected);
        }
        assert_eq!(table.warnings.len(), 4);
    }

    #[test]
    fn empty_store_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let store = ResultsStore::new(dir.path());
        assert!(write_report(&store, &dir.path().join("r.txt")).is_err());
    }
}
