//! On-disk session layout under one root:
//!
//! ```text
//! index.json
//! sessions/<id>/session.json
//! sessions/<id>/events.jsonl
//! sessions/<id>/trajectories.json
//! ```
//!
//! Event logs are append-only. Every other file is replaced atomically.

use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use gui_agent::events::SessionStatus;
use gui_agent::executor::Trajectory;

use crate::session::{RunSession, SeqEvent};

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("{path}: {reason}")]
    Io { path: String, reason: String },
    #[error("{path}:{line}: {reason}")]
    Decode { path: String, line: usize, reason: String },
}

fn io(path: &Path, e: impl ToString) -> StoreError {
    StoreError::Io { path: path.display().to_string(), reason: e.to_string() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub session_id: String,
    pub status: SessionStatus,
    pub created_at: u64,
}

#[derive(Debug, Clone)]
pub struct SessionStore {
    root: PathBuf,
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io(path, e))
}

impl SessionStore {
    pub fn new(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        fs::create_dir_all(root.join("sessions")).map_err(|e| io(&root, e))?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn dir(&self, id: &str) -> PathBuf {
        self.root.join("sessions").join(id)
    }

    pub fn events_path(&self, id: &str) -> PathBuf {
        self.dir(id).join("events.jsonl")
    }

    pub fn trajectories_path(&self, id: &str) -> PathBuf {
        self.dir(id).join("trajectories.json")
    }

    pub fn append_event(&self, id: &str, event: &SeqEvent) -> Result<(), StoreError> {
        let dir = self.dir(id);
        fs::create_dir_all(&dir).map_err(|e| io(&dir, e))?;
        let path = self.events_path(id);
        let mut f = OpenOptions::new().create(true).append(true).open(&path).map_err(|e| io(&path, e))?;
        let mut line = serde_json::to_vec(event).expect("events serialize");
        line.push(b'\n');
        f.write_all(&line).map_err(|e| io(&path, e))
    }

    pub fn write_session(&self, session: &RunSession) -> Result<(), StoreError> {
        let dir = self.dir(&session.session_id);
        fs::create_dir_all(&dir).map_err(|e| io(&dir, e))?;
        write_atomic(&dir.join("session.json"), &serde_json::to_vec_pretty(session).expect("sessions serialize"))
    }

    pub fn write_trajectories(&self, id: &str, trajectories: &[Trajectory]) -> Result<(), StoreError> {
        write_atomic(&self.trajectories_path(id), &serde_json::to_vec(trajectories).expect("trajectories serialize"))
    }

    pub fn write_index(&self, entries: &[IndexEntry]) -> Result<(), StoreError> {
        write_atomic(&self.root.join("index.json"), &serde_json::to_vec_pretty(entries).expect("index serializes"))
    }

    pub fn read_index(&self) -> Result<Vec<IndexEntry>, StoreError> {
        let path = self.root.join("index.json");
        match fs::read(&path) {
            Ok(b) => serde_json::from_slice(&b).map_err(|e| StoreError::Decode { path: path.display().to_string(), line: 1, reason: e.to_string() }),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Vec::new()),
            Err(e) => Err(io(&path, e)),
        }
    }

    pub fn read_session(&self, id: &str) -> Result<RunSession, StoreError> {
        let path = self.dir(id).join("session.json");
        let b = fs::read(&path).map_err(|e| io(&path, e))?;
        serde_json::from_slice(&b).map_err(|e| StoreError::Decode { path: path.display().to_string(), line: 1, reason: e.to_string() })
    }

    /// Reads an event log. A torn final line, left by a crash mid-append, is
    /// dropped; damage anywhere else is an error.
    pub fn read_events(&self, id: &str) -> Result<Vec<SeqEvent>, StoreError> {
        let path = self.events_path(id);
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(io(&path, e)),
        };
        let lines: Vec<&str> = text.lines().collect();
        let mut out = Vec::with_capacity(lines.len());
        for (i, l) in lines.iter().enumerate() {
            if l.trim().is_empty() {
                continue;
            }
            match serde_json::from_str(l) {
                Ok(e) => out.push(e),
                Err(_) if i + 1 == lines.len() && !text.ends_with('\n') => break,
                Err(e) => {
                    return Err(StoreError::Decode { path: path.display().to_string(), line: i + 1, reason: e.to_string() })
                }
            }
        }
        Ok(out)
    }

    pub fn read_trajectories(&self, id: &str) -> Result<Option<Vec<Trajectory>>, StoreError> {
        let path = self.trajectories_path(id);
        match fs::read(&path) {
            Ok(b) => serde_json::from_slice(&b)
                .map(Some)
                .map_err(|e| StoreError::Decode { path: path.display().to_string(), line: 1, reason: e.to_string() }),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(io(&path, e)),
        }
    }
}
