use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::env::{EnvError, EnvOutcome, Environment};
use crate::action::Action;

/// One line of a trajectory log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub snapshot_hash: String,
    pub action: String,
    pub outcome: EnvOutcome,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<EnvError>,
}

/// Line-delimited step log; the hash covers the exact bytes written.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TrajectoryLog {
    records: Vec<LogRecord>,
}

impl TrajectoryLog {
    pub fn push(&mut self, record: LogRecord) {
        self.records.push(record);
    }

    pub fn records(&self) -> &[LogRecord] {
        &self.records
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("log record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_jsonl().as_bytes()))
    }
}

/// Resets `env` for the task and applies `actions` in order, logging each.
///
/// Environment errors are logged and do not stop the replay; replay ends at
/// the first frozen step.
pub fn replay(env: &mut Environment, task_id: &str, seed: u64, actions: &[Action]) -> Result<TrajectoryLog, EnvError> {
    env.reset(task_id, seed)?;
    let mut log = TrajectoryLog::default();
    for action in actions {
        match env.step(action) {
            Ok((snap, outcome)) => log.push(LogRecord {
                step: snap.step_index,
                snapshot_hash: snap.hash(),
                action: action.to_string(),
                outcome,
                error: None,
            }),
            Err(EnvError::Frozen) => break,
            Err(e) => {
                let snap = env.snapshot();
                log.push(LogRecord {
                    step: snap.step_index,
                    snapshot_hash: snap.hash(),
                    action: action.to_string(),
                    outcome: env.outcome().clone(),
                    error: Some(e),
                });
            }
        }
    }
    Ok(log)
}
