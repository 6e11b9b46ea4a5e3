//! Run events and the session status machine.
//!
//! Every change to a run's trajectories is announced as an event, so a log of
//! events is enough to rebuild them.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::ask::QaPair;
use crate::executor::{Origin, StepRecord, Trajectory};
use crate::orchestration::{AtomicTask, ExtractedMemory};
use crate::reflection::ReflectionVerdict;
use crate::sim::EnvOutcome;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    Planning,
    Running,
    AwaitingUser,
    Reflecting,
    Paused,
    DoneSuccess,
    DoneFailure,
}

impl SessionStatus {
    pub const ALL: [SessionStatus; 7] = [
        Self::Planning,
        Self::Running,
        Self::AwaitingUser,
        Self::Reflecting,
        Self::Paused,
        Self::DoneSuccess,
        Self::DoneFailure,
    ];

    pub fn is_terminal(self) -> bool {
        matches!(self, Self::DoneSuccess | Self::DoneFailure)
    }

    /// The declared transition table. Terminal states have no exits.
    pub fn can_transition(self, to: SessionStatus) -> bool {
        use SessionStatus::*;
        matches!(
            (self, to),
            (Planning, Running | DoneFailure)
                | (Running, AwaitingUser | Reflecting | Paused | DoneFailure)
                | (AwaitingUser, Running | DoneFailure)
                | (Reflecting, Running | DoneSuccess | DoneFailure)
                | (Paused, Running | DoneFailure)
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Planning => "planning",
            Self::Running => "running",
            Self::AwaitingUser => "awaiting_user",
            Self::Reflecting => "reflecting",
            Self::Paused => "paused",
            Self::DoneSuccess => "done_success",
            Self::DoneFailure => "done_failure",
        }
    }
}

impl fmt::Display for SessionStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RunEvent {
    Status {
        status: SessionStatus,
    },
    Plan {
        composite: bool,
        tasks: Vec<AtomicTask>,
    },
    TaskStarted {
        task_index: usize,
        trajectory_id: String,
        instruction: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        origin: Option<Origin>,
    },
    Knowledge {
        task_index: usize,
        ids: Vec<String>,
    },
    /// Emitted once the record is final, except that an ask step's answer
    /// arrives later in an `answer` event.
    Step {
        task_index: usize,
        record: Box<StepRecord>,
    },
    Reflection {
        task_index: usize,
        verdict: ReflectionVerdict,
    },
    Ask {
        task_index: usize,
        step: usize,
        question: String,
    },
    Answer {
        task_index: usize,
        step: usize,
        qa: QaPair,
    },
    Memory {
        task_index: usize,
        memory: ExtractedMemory,
    },
    Rewrite {
        task_index: usize,
        task: AtomicTask,
    },
    TaskFinished {
        task_index: usize,
        trajectory_id: String,
        outcome: EnvOutcome,
    },
    Finished {
        outcome: EnvOutcome,
    },
    Warning {
        message: String,
    },
}

/// Receives events as a run produces them.
pub type Sink<'a> = &'a mut dyn FnMut(RunEvent);

/// Rebuilds the trajectories described by an event log.
pub fn replay_trajectories<'a>(events: impl IntoIterator<Item = &'a RunEvent>) -> Vec<Trajectory> {
    let mut out: Vec<Trajectory> = Vec::new();
    for e in events {
        match e {
            RunEvent::TaskStarted { task_index, trajectory_id, instruction, origin } => {
                let mut t = Trajectory::new(trajectory_id, instruction);
                t.origin = origin.clone();
                if *task_index < out.len() {
                    out[*task_index] = t;
                } else {
                    out.push(t);
                }
            }
            RunEvent::Knowledge { task_index, ids } => {
                if let Some(t) = out.get_mut(*task_index) {
                    t.knowledge_used.extend(ids.iter().cloned());
                }
            }
            RunEvent::Step { task_index, record } => {
                if let Some(t) = out.get_mut(*task_index) {
                    let r = (**record).clone();
                    let i = r.index;
                    if i < t.steps.len() {
                        t.steps[i] = r;
                    } else {
                        t.steps.push(r);
                    }
                }
            }
            RunEvent::Answer { task_index, step, qa } => {
                if let Some(s) = out.get_mut(*task_index).and_then(|t| t.steps.get_mut(*step)) {
                    s.qa = Some(qa.clone());
                }
            }
            RunEvent::TaskFinished { task_index, outcome, .. } => {
                if let Some(t) = out.get_mut(*task_index) {
                    t.outcome = outcome.clone();
                }
            }
            _ => {}
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::SessionStatus::*;
    use super::*;

    #[test]
    fn terminal_states_have_no_exits() {
        for from in [DoneSuccess, DoneFailure] {
            assert!(SessionStatus::ALL.iter().all(|&to| !from.can_transition(to)));
        }
    }

    #[test]
    fn success_only_through_reflecting() {
        let into_success: Vec<_> = SessionStatus::ALL.iter().filter(|s| s.can_transition(DoneSuccess)).collect();
        assert_eq!(into_success, [&Reflecting]);
        assert!(Running.can_transition(Paused) && Paused.can_transition(Running));
        assert!(!Planning.can_transition(Paused));
    }
}
