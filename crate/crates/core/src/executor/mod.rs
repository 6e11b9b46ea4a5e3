//! The step loop: perceive, prompt, parse, act.

mod prompt;
mod run;

use serde::{Deserialize, Serialize};

use crate::action::{Action, ModelResponse};
use crate::ask::{QaPair, TrustDecision};
use crate::gateway::GatewayError;
use crate::knowledge::{RetrievalScope, DEFAULT_K};
use crate::reflection::{Cadence, ReflectionError, ReflectionVerdict, DEFAULT_RESUME_BUDGET};
use crate::sim::{EnvError, EnvOutcome, ScreenRef, ScreenSnapshot};

pub use prompt::{build_prompt, ACTION_SPACE, EXECUTOR_SYSTEM};
pub use run::{run_task, Advance, RunContext, TaskRun};

/// Running list of per-step action summaries.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistorySummary {
    pub entries: Vec<String>,
}

impl HistorySummary {
    pub fn push(&mut self, summary: impl Into<String>) {
        self.entries.push(summary.into());
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn rendered(&self) -> String {
        self.entries.iter().enumerate().map(|(i, e)| format!("{}. {e}", i + 1)).collect::<Vec<_>>().join("\n")
    }

    /// Rebuilds the history a run would have had after these steps.
    pub fn from_steps(steps: &[StepRecord]) -> Self {
        Self { entries: steps.iter().filter_map(StepRecord::history_entry).map(str::to_string).collect() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", content = "detail", rename_all = "snake_case")]
pub enum StepError {
    /// The reply could not be parsed, even after one reprompt.
    Parse(String),
    /// The environment refused the action.
    Env(EnvError),
    /// The executor refused the action without sending it.
    Rejected(String),
}

impl StepError {
    pub fn code(&self) -> String {
        match self {
            Self::Parse(_) => "ParseFailure".into(),
            Self::Env(e) => e.code().into(),
            Self::Rejected(_) => "Rejected".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub index: usize,
    pub snapshot_before: ScreenSnapshot,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<ModelResponse>,
    /// The last unparseable reply, kept for failed-parse steps.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_response: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action: Option<Action>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<StepError>,
    pub snapshot_after: ScreenSnapshot,
    pub outcome: EnvOutcome,
    #[serde(default)]
    pub reflections: Vec<ReflectionVerdict>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qa: Option<QaPair>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trust: Option<TrustDecision>,
}

impl StepRecord {
    pub fn is_ask(&self) -> bool {
        matches!(self.action, Some(Action::Ask { .. })) && self.error.is_none()
    }

    /// True when the action was handed to the environment.
    pub fn executed(&self) -> bool {
        match (&self.action, &self.error) {
            (Some(Action::Ask { .. }), _) => false,
            (Some(_), None | Some(StepError::Env(_))) => true,
            _ => false,
        }
    }

    /// The history line this step contributes, if any.
    pub fn history_entry(&self) -> Option<&str> {
        if !self.executed() {
            return None;
        }
        self.response.as_ref().map(|r| r.action_summary.as_str())
    }
}

/// Where a trajectory came from, enough to replay it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Origin {
    pub scenario: String,
    pub task_id: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start: Option<ScreenRef>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    #[serde(default)]
    pub id: String,
    pub instruction: String,
    pub steps: Vec<StepRecord>,
    pub outcome: EnvOutcome,
    #[serde(default)]
    pub knowledge_used: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin: Option<Origin>,
    #[serde(default)]
    pub corrected: bool,
}

impl Trajectory {
    pub fn new(id: impl Into<String>, instruction: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            instruction: instruction.into(),
            steps: Vec::new(),
            outcome: EnvOutcome::ongoing(),
            knowledge_used: Vec::new(),
            origin: None,
            corrected: false,
        }
    }

    pub fn history(&self) -> HistorySummary {
        HistorySummary::from_steps(&self.steps)
    }

    pub fn executed_actions(&self) -> Vec<&Action> {
        self.steps.iter().filter(|s| s.executed()).filter_map(|s| s.action.as_ref()).collect()
    }

    pub fn qa_pairs(&self) -> Vec<QaPair> {
        self.steps.iter().filter_map(|s| s.qa.clone()).collect()
    }
}

pub const DEFAULT_MAX_STEPS: usize = 30;
pub const DEFAULT_ASK_CAP: usize = 3;
pub const DEFAULT_WINDOW: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExecutorConfig {
    pub max_steps: usize,
    pub action_reflection: bool,
    /// Trajectory reflector window; `None` turns it off.
    pub trajectory_window: Option<usize>,
    pub global_reflection: bool,
    pub resume_budget: u32,
    pub ask: bool,
    pub ask_cap: usize,
    pub knowledge_k: usize,
    pub retrieval_scope: RetrievalScope,
    pub temperature: f64,
    /// Judge the final outcome with the task predicate; otherwise trust the
    /// agent's own terminate status.
    pub judge_with_predicate: bool,
}

impl Default for ExecutorConfig {
    fn default() -> Self {
        Self {
            max_steps: DEFAULT_MAX_STEPS,
            action_reflection: true,
            trajectory_window: Some(DEFAULT_WINDOW),
            global_reflection: true,
            resume_budget: DEFAULT_RESUME_BUDGET,
            ask: true,
            ask_cap: DEFAULT_ASK_CAP,
            knowledge_k: DEFAULT_K,
            retrieval_scope: RetrievalScope::AtomicTask,
            temperature: 0.0,
            judge_with_predicate: true,
        }
    }
}

impl ExecutorConfig {
    /// No reflection and no asking; just the policy.
    pub fn bare() -> Self {
        Self {
            action_reflection: false,
            trajectory_window: None,
            global_reflection: false,
            ask: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ExecError> {
        if self.max_steps == 0 {
            return Err(ExecError::Config("max_steps must be at least 1".into()));
        }
        if let Some(w) = self.trajectory_window {
            Cadence::new(w).map_err(|e: ReflectionError| ExecError::Config(e.to_string()))?;
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(ExecError::Config("temperature must be finite and non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ExecError {
    #[error("policy backend failed: {error}")]
    Backend { error: GatewayError, trajectory: Box<Trajectory> },
    #[error("environment error: {0}")]
    Env(#[from] EnvError),
    #[error("invalid executor configuration: {0}")]
    Config(String),
    #[error("no pending question to answer")]
    NoPendingQuestion,
}

pub const MAX_STEPS_REASON: &str = "MaxStepsExceeded";
pub const GLOBAL_BUDGET_REASON: &str = "GlobalReflectorBudget";
pub const CANCELLED_REASON: &str = "cancelled";
