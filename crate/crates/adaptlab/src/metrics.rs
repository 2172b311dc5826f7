//! Append-only JSON-lines metrics log.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub run_id: String,
    pub step: u64,
    pub wall_time_s: f64,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

pub struct MetricsSink {
    path: PathBuf,
    file: File,
    offset: u64,
}

impl MetricsSink {
    /// Opens `path` for appending. With `truncate_to`, everything past that
    /// byte offset is discarded first, which drops records written after the
    /// checkpoint a run resumes from.
    pub fn open(path: &Path, truncate_to: Option<u64>) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let len = file.metadata().map_err(|e| Error::io(path, e))?.len();
        let offset = match truncate_to {
            Some(n) if n > len => {
                return Err(Error::Refused(format!(
                    "metrics log {} is shorter ({len} bytes) than the checkpoint expects ({n})",
                    path.display()
                )))
            }
            Some(n) => {
                file.set_len(n).map_err(|e| Error::io(path, e))?;
                n
            }
            None => len,
        };
        Ok(Self {
            path: path.to_path_buf(),
            file,
            offset,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Bytes written so far.
    pub fn offset(&self) -> u64 {
        self.offset
    }

    pub fn write(&mut self, record: &MetricRecord) -> Result<()> {
        let mut line = serde_json::to_string(record).map_err(|e| Error::Config(e.to_string()))?;
        line.push('\n');
        self.file
            .write_all(line.as_bytes())
            .map_err(|e| Error::io(&self.path, e))?;
        self.offset += line.len() as u64;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.file.sync_data().map_err(|e| Error::io(&self.path, e))
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r = serde_json::from_str(&line).map_err(|e| Error::line(path, i + 1, e.to_string()))?;
        out.push(r);
    }
    Ok(out)
}
