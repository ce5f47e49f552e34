use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::space::Value;
use crate::error::{Error, Result};

/// Which epoch budget an evaluation ran with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Budget {
    Full,
    Warm,
}

/// Task metrics attached to an evaluation, when the evaluator has them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub map: f64,
    pub miou: f64,
}

/// One line of `history.ndjson`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub id: usize,
    pub generation: usize,
    /// Normalized coordinates.
    pub point: Vec<f64>,
    pub values: Vec<Value>,
    pub fitness: f64,
    #[serde(default)]
    pub parents: Vec<usize>,
    /// Candidate whose trained model seeded this evaluation.
    pub warm_from: Option<usize>,
    pub budget: Budget,
    pub epochs: usize,
    /// Mutation step size used to draw this candidate.
    pub sigma: f64,
    #[serde(default)]
    pub metrics: Option<EvalMetrics>,
    #[serde(default)]
    pub error: Option<String>,
    #[serde(default)]
    pub wall_secs: f64,
    #[serde(default)]
    pub timestamp: u64,
}

/// Append-only evaluation log, optionally mirrored to a file.
#[derive(Debug, Default)]
pub struct History {
    records: Vec<RunRecord>,
    path: Option<PathBuf>,
}

impl History {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens `path` for appending, loading any records already there.
    pub fn open(path: &Path) -> Result<Self> {
        let records = if path.exists() { Self::read(path)? } else { Vec::new() };
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
        }
        Ok(Self {
            records,
            path: Some(path.to_path_buf()),
        })
    }

    pub fn read(path: &Path) -> Result<Vec<RunRecord>> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut out = Vec::new();
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let r: RunRecord = serde_json::from_str(&line)
                .map_err(|e| Error::Serde(format!("{}:{}: {e}", path.display(), i + 1)))?;
            out.push(r);
        }
        Ok(out)
    }

    pub fn from_records(records: Vec<RunRecord>) -> Self {
        Self { records, path: None }
    }

    pub fn records(&self) -> &[RunRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn append(&mut self, r: RunRecord) -> Result<()> {
        if let Some(path) = &self.path {
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|e| Error::io(path, e))?;
            let line = serde_json::to_string(&r).map_err(|e| Error::Serde(e.to_string()))?;
            writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
        }
        self.records.push(r);
        Ok(())
    }

    /// Highest fitness, earliest on ties.
    pub fn best(&self) -> Option<&RunRecord> {
        self.records
            .iter()
            .fold(None, |best: Option<&RunRecord>, r| match best {
                Some(b) if b.fitness >= r.fitness => Some(b),
                _ => Some(r),
            })
    }

    /// Records that raised the best-so-far fitness, in evaluation order.
    pub fn improvements(&self) -> Vec<&RunRecord> {
        let mut out: Vec<&RunRecord> = Vec::new();
        for r in &self.records {
            if out.last().is_none_or(|b| r.fitness > b.fitness) {
                out.push(r);
            }
        }
        out
    }

    /// Best-so-far fitness after each evaluation.
    pub fn incumbent_curve(&self) -> Vec<f64> {
        let mut best = f64::NEG_INFINITY;
        self.records
            .iter()
            .map(|r| {
                best = best.max(r.fitness);
                best
            })
            .collect()
    }
}
