use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub stage: u8,
    pub iter: usize,
    pub lr: f64,
    /// Loss terms and gradient norms by name.
    #[serde(flatten)]
    pub values: BTreeMap<String, f64>,
    /// Wall-clock duration of the step; the only nondeterministic field.
    pub wall_ms: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
    /// Free-form notes such as skipped levels or dropped boxes.
    pub warnings: Vec<String>,
}

impl TrainLog {
    pub fn push(&mut self, r: LogRecord) {
        self.records.push(r);
    }

    pub fn warn(&mut self, w: impl Into<String>) {
        self.warnings.push(w.into());
    }

    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("log record serializes") + "\n")
            .collect()
    }

    /// The log with timing zeroed, for bit-exact reproducibility checks.
    pub fn without_timing(&self) -> TrainLog {
        let mut log = self.clone();
        for r in &mut log.records {
            r.wall_ms = 0;
        }
        log
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_jsonl())?;
        Ok(())
    }

    pub fn last(&self, key: &str) -> Option<f64> {
        self.records.iter().rev().find_map(|r| r.values.get(key).copied())
    }
}
