//! Append-only metric records, one JSON object per line.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::read_text;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricRecord {
    pub run: String,
    pub step: u64,
    pub name: String,
    pub value: f64,
    #[serde(default)]
    pub tags: BTreeMap<String, String>,
}

impl MetricRecord {
    pub fn new(run: impl Into<String>, step: u64, name: impl Into<String>, value: f64) -> Self {
        Self {
            run: run.into(),
            step,
            name: name.into(),
            value,
            tags: BTreeMap::new(),
        }
    }

    pub fn tag(mut self, key: impl Into<String>, value: impl ToString) -> Self {
        self.tags.insert(key.into(), value.to_string());
        self
    }
}

type SeriesKey = (String, String);

fn admit(last: &mut BTreeMap<SeriesKey, u64>, r: &MetricRecord) -> Result<()> {
    if !r.value.is_finite() {
        return Err(Error::numeric(format!("metric {}/{} has non-finite value {}", r.run, r.name, r.value)));
    }
    let key = (r.run.clone(), r.name.clone());
    if let Some(&prev) = last.get(&key) {
        if r.step < prev {
            return Err(Error::data(format!(
                "metric {}/{} goes back from step {prev} to {}",
                r.run, r.name, r.step
            )));
        }
    }
    last.insert(key, r.step);
    Ok(())
}

/// Checks finiteness and non-decreasing steps per `(run, name)`.
pub fn validate_metrics(records: &[MetricRecord]) -> Result<()> {
    let mut last = BTreeMap::new();
    records.iter().try_for_each(|r| admit(&mut last, r))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    let text = read_text(path)?;
    if !text.is_empty() && !text.ends_with('\n') {
        return Err(Error::Truncated(format!("{} ends mid-record", path.display())));
    }
    text.lines()
        .filter(|l| !l.is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Schema(format!("metric record {i}: {e}"))))
        .collect()
}

/// Appending writer that refuses records breaking the series order,
/// including order against records already in the file.
pub struct MetricsLog {
    path: PathBuf,
    file: File,
    last: BTreeMap<SeriesKey, u64>,
}

impl MetricsLog {
    pub fn open(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let mut last = BTreeMap::new();
        if path.exists() {
            for r in read_metrics(path)? {
                admit(&mut last, &r)?;
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            path: path.to_path_buf(),
            file,
            last,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn record(&mut self, r: MetricRecord) -> Result<()> {
        admit(&mut self.last, &r)?;
        let mut line = serde_json::to_string(&r).map_err(|e| Error::Schema(e.to_string()))?;
        line.push('\n');
        self.file.write_all(line.as_bytes())?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.file.flush()?;
        Ok(())
    }
}
