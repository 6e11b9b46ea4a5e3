//! Self-improvement loop: grow a query pool, roll each query out several
//! times, gate the results, and export what passes as training data.

mod correction;
mod gate;
mod queries;
mod rollout;

use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::datalab::{split_trajectory, write_jsonl, DataError, DatasetHeader, StepSample};
use crate::executor::Trajectory;
use crate::sim::EnvError;

pub use correction::{apply_patch, group_edits, QueueEntry, StepEdit};
pub use gate::{gate_trajectory, rule_verdict, Discriminator, DiscriminatorVerdict, GateResult, Route, REDUNDANCY_LIMIT};
pub use queries::{expand_queries, ExpandReport, QueryOrigin, QueryPool, QueryRecord};
pub use rollout::{rollout, Diversity, RepeatOutcome};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvolveError {
    #[error("the seed pool is empty")]
    EmptySeedPool,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("scenario has no task {0:?}")]
    UnknownTask(String),
    #[error("trajectory {0} has no origin to replay from")]
    MissingOrigin(String),
    #[error("invalid patch: {0}")]
    InvalidPatch(String),
    #[error("environment error: {0}")]
    Env(#[from] EnvError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("line {line}: {reason}")]
    Decode { line: usize, reason: String },
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for EvolveError {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e.to_string())
    }
}

/// Parses one JSON record per non-blank line.
pub fn read_records<T: DeserializeOwned>(text: &str) -> Result<Vec<T>, EvolveError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| EvolveError::Decode { line: i + 1, reason: e.to_string() }))
        .collect()
}

pub fn write_records<T: Serialize>(records: &[T]) -> String {
    records.iter().map(|r| serde_json::to_string(r).expect("records serialize") + "\n").collect()
}

/// Appends records to a line-delimited file, creating it if needed.
pub fn append_records<T: Serialize>(path: &Path, records: &[T]) -> Result<(), EvolveError> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    f.write_all(write_records(records).as_bytes())?;
    Ok(())
}

/// Splits accepted and corrected trajectories into one dataset.
pub fn export_finetune_set(trajectories: &[Trajectory]) -> Result<String, EvolveError> {
    let mut samples: Vec<StepSample> = Vec::new();
    for t in trajectories {
        match split_trajectory(t) {
            Ok(s) => samples.extend(s),
            Err(DataError::EmptyTrajectory) => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(write_jsonl(&DatasetHeader::new("evolve"), &samples))
}

pub fn export_finetune_file(trajectories: &[Trajectory], path: &Path) -> Result<usize, EvolveError> {
    let text = export_finetune_set(trajectories)?;
    std::fs::write(path, &text)?;
    Ok(text.lines().count() - 1)
}
