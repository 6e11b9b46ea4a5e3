use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::action::{render_response, Action, ModelResponse};
use crate::executor::{StepError, StepRecord, Trajectory};
use crate::sim::{EnvOutcome, Environment, Scenario};

use super::{EvolveError, GateResult};

/// A rejected trajectory waiting for a fix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueEntry {
    pub trajectory: Trajectory,
    pub gate: GateResult,
}

/// Replaces the action at `step` of a queued trajectory. A step equal to the
/// trajectory's length appends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepEdit {
    pub trajectory_id: String,
    pub step: usize,
    pub action: Action,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary: Option<String>,
}

pub fn group_edits(edits: Vec<StepEdit>) -> BTreeMap<String, Vec<StepEdit>> {
    let mut out: BTreeMap<String, Vec<StepEdit>> = BTreeMap::new();
    for e in edits {
        out.entry(e.trajectory_id.clone()).or_default().push(e);
    }
    out
}

/// Rebuilds a trajectory with the edits applied by replaying every executed
/// action from the original starting point. Replay stops at the first
/// terminate, so edits can also cut a trajectory short.
pub fn apply_patch(trajectory: &Trajectory, edits: &[StepEdit], scenario: &Arc<Scenario>) -> Result<Trajectory, EvolveError> {
    let origin = trajectory.origin.clone().ok_or_else(|| EvolveError::MissingOrigin(trajectory.id.clone()))?;
    if origin.scenario != scenario.name {
        return Err(EvolveError::InvalidPatch(format!("trajectory ran on scenario {:?}", origin.scenario)));
    }
    let mut by_step: BTreeMap<usize, &StepEdit> = BTreeMap::new();
    for e in edits {
        if e.trajectory_id != trajectory.id {
            return Err(EvolveError::InvalidPatch(format!("edit targets {} not {}", e.trajectory_id, trajectory.id)));
        }
        if e.step > trajectory.steps.len() {
            return Err(EvolveError::InvalidPatch(format!("step {} is past the end", e.step)));
        }
        if matches!(e.action, Action::Ask { .. }) {
            return Err(EvolveError::InvalidPatch("an edit cannot ask the user".into()));
        }
        if by_step.insert(e.step, e).is_some() {
            return Err(EvolveError::InvalidPatch(format!("step {} edited twice", e.step)));
        }
    }

    let mut plan: Vec<ModelResponse> = Vec::new();
    for i in 0..=trajectory.steps.len() {
        match (by_step.get(&i), trajectory.steps.get(i)) {
            (Some(e), old) => {
                let summary = e.summary.clone().unwrap_or_else(|| e.action.to_string());
                let thought = old.and_then(|s| s.response.as_ref()).map(|r| r.thought.clone()).unwrap_or_default();
                plan.push(ModelResponse {
                    raw: render_response(&thought, &summary, &e.action),
                    thought,
                    action_summary: summary,
                    action: e.action.clone(),
                });
            }
            (None, Some(s)) if s.executed() => {
                if let Some(r) = &s.response {
                    plan.push(r.clone());
                }
            }
            _ => {}
        }
    }

    let mut env = Environment::new(Arc::clone(scenario));
    env.reset_at(&origin.task_id, origin.seed, origin.start.as_ref())?;
    let mut fixed = Trajectory::new(trajectory.id.clone(), trajectory.instruction.clone());
    fixed.origin = Some(origin);
    fixed.knowledge_used = trajectory.knowledge_used.clone();
    fixed.corrected = true;
    for response in plan {
        let before = env.snapshot();
        let (after, outcome, error) = match env.step(&response.action) {
            Ok((after, outcome)) => (after, outcome, None),
            Err(e) => (env.snapshot(), env.outcome().clone(), Some(StepError::Env(e))),
        };
        let done = env.is_frozen();
        fixed.steps.push(StepRecord {
            index: fixed.steps.len(),
            snapshot_before: before,
            action: Some(response.action.clone()),
            response: Some(response),
            raw_response: None,
            error,
            snapshot_after: after,
            outcome,
            reflections: Vec::new(),
            qa: None,
            trust: None,
        });
        if done {
            break;
        }
    }
    fixed.outcome = if env.is_frozen() {
        env.outcome().clone()
    } else {
        EnvOutcome::failure("corrected trajectory never terminates")
    };
    Ok(fixed)
}
