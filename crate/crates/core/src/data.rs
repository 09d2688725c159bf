//! Demonstration datasets: one header line followed by one JSON record per
//! line.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::task::Task;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {source}")]
    Parse { line: usize, source: serde_json::Error },
    #[error("dataset is empty")]
    Empty,
    #[error("unsupported format version {0}")]
    Version(u32),
    #[error("dataset was generated for task {found} ({found_hash}), expected {expected} ({expected_hash})")]
    TaskMismatch {
        expected: String,
        expected_hash: String,
        found: String,
        found_hash: String,
    },
    #[error("header says {expected} records, file has {found}")]
    Count { expected: usize, found: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format_version: u32,
    pub task: String,
    pub config_hash: String,
    pub seed: u64,
    pub trajectories: usize,
    pub records: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub traj: usize,
    pub t: usize,
    pub x: Vec<f64>,
    pub z: Vec<f64>,
    pub goal: [f64; 2],
    pub u_star: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub records: Vec<Record>,
}

impl Dataset {
    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&self.header).expect("header serializes");
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, DataError> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, first) = lines.next().ok_or(DataError::Empty)?;
        let header: DatasetHeader =
            serde_json::from_str(first).map_err(|source| DataError::Parse { line: 1, source })?;
        if header.format_version != FORMAT_VERSION {
            return Err(DataError::Version(header.format_version));
        }
        let records = lines
            .map(|(i, l)| serde_json::from_str(l).map_err(|source| DataError::Parse { line: i + 1, source }))
            .collect::<Result<Vec<Record>, _>>()?;
        if records.len() != header.records {
            return Err(DataError::Count {
                expected: header.records,
                found: records.len(),
            });
        }
        Ok(Self { header, records })
    }

    pub fn write(&self, path: &Path) -> Result<(), DataError> {
        std::fs::write(path, self.to_jsonl())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, DataError> {
        Self::from_jsonl(&std::fs::read_to_string(path)?)
    }

    pub fn check_task(&self, task: &Task) -> Result<(), DataError> {
        let hash = task.config_hash();
        if self.header.config_hash != hash {
            return Err(DataError::TaskMismatch {
                expected: task.id().into(),
                expected_hash: hash,
                found: self.header.task.clone(),
                found_hash: self.header.config_hash.clone(),
            });
        }
        Ok(())
    }

    pub fn trajectory_ids(&self) -> BTreeSet<usize> {
        self.records.iter().map(|r| r.traj).collect()
    }
}

/// Splits records so that whole trajectories land on one side. The last
/// `ceil(fraction · n_traj)` trajectory ids (at least one, when there are
/// two or more trajectories) form the validation part.
pub fn split_by_trajectory(records: &[Record], val_fraction: f64) -> (Vec<Record>, Vec<Record>) {
    let ids: Vec<usize> = records.iter().map(|r| r.traj).collect::<BTreeSet<_>>().into_iter().collect();
    if ids.len() < 2 || val_fraction <= 0.0 {
        return (records.to_vec(), Vec::new());
    }
    let n_val = ((val_fraction * ids.len() as f64).ceil() as usize).clamp(1, ids.len() - 1);
    let cut = ids[ids.len() - n_val];
    records.iter().cloned().partition(|r| r.traj < cut)
}
