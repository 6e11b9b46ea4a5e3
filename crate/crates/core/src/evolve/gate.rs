use std::fmt;

use serde::{Deserialize, Serialize};

use crate::executor::{StepError, Trajectory};
use crate::gateway::{Backend, PromptBundle, Role};
use crate::markup::tag_text;
use crate::reflection::longest_repeat;

/// Identical consecutive actions at or above this count fail the redundancy check.
pub const REDUNDANCY_LIMIT: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Discriminator {
    TaskCompletion,
    ActionValidity,
    PathRelevance,
    ReasoningCoherence,
    Redundancy,
    UserCentric,
    BehavioralAnalysis,
}

impl Discriminator {
    pub const ALL: [Discriminator; 7] = [
        Self::TaskCompletion,
        Self::ActionValidity,
        Self::PathRelevance,
        Self::ReasoningCoherence,
        Self::Redundancy,
        Self::UserCentric,
        Self::BehavioralAnalysis,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::TaskCompletion => "task_completion",
            Self::ActionValidity => "action_validity",
            Self::PathRelevance => "path_relevance",
            Self::ReasoningCoherence => "reasoning_coherence",
            Self::Redundancy => "redundancy",
            Self::UserCentric => "user_centric",
            Self::BehavioralAnalysis => "behavioral_analysis",
        }
    }

    fn question(self) -> &'static str {
        match self {
            Self::TaskCompletion => "Does the final screen show that the instruction was fully carried out?",
            Self::ActionValidity => "Was every action possible on the screen it was taken on?",
            Self::PathRelevance => "Does every step move toward the goal, with no detours into unrelated apps?",
            Self::ReasoningCoherence => "Do the step summaries follow logically from one another?",
            Self::Redundancy => "Is the trajectory free of repeated or unnecessary actions?",
            Self::UserCentric => "Would the user be satisfied with how and what was done?",
            Self::BehavioralAnalysis => "Does the agent behave like a careful human operator, reacting to what each screen shows?",
        }
    }
}

impl fmt::Display for Discriminator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscriminatorVerdict {
    pub name: Discriminator,
    pub pass: bool,
    pub rationale: String,
    /// Set when the judge was unreachable or unreadable and the rule decided.
    #[serde(default)]
    pub fallback: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Route {
    FinetuneSet,
    CorrectionQueue,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateResult {
    pub trajectory_id: String,
    pub verdicts: Vec<DiscriminatorVerdict>,
    pub accepted: bool,
    pub routed_to: Route,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl GateResult {
    /// Seven verdicts, one per discriminator, and a decision that agrees with them.
    pub fn is_sound(&self) -> bool {
        let names: Vec<_> = self.verdicts.iter().map(|v| v.name).collect();
        let all_pass = self.verdicts.iter().all(|v| v.pass);
        names == Discriminator::ALL
            && self.accepted == all_pass
            && self.routed_to == if self.accepted { Route::FinetuneSet } else { Route::CorrectionQueue }
    }
}

/// The offline decision for one discriminator.
pub fn rule_verdict(name: Discriminator, trajectory: &Trajectory) -> (bool, String) {
    match name {
        Discriminator::TaskCompletion => {
            let o = &trajectory.outcome;
            (o.is_success(), format!("outcome {:?}: {}", o.status, o.reason))
        }
        Discriminator::ActionValidity => {
            let bad: Vec<String> = trajectory
                .steps
                .iter()
                .filter_map(|s| match &s.error {
                    Some(StepError::Env(e)) => Some(format!("step {} {}", s.index, e.code())),
                    _ => None,
                })
                .collect();
            if bad.is_empty() {
                (true, "no environment errors".into())
            } else {
                (false, bad.join(", "))
            }
        }
        Discriminator::Redundancy => {
            let executed: Vec<_> = trajectory.steps.iter().filter(|s| s.executed()).cloned().collect();
            let run = longest_repeat(&executed);
            (run < REDUNDANCY_LIMIT, format!("longest run of identical actions: {run}"))
        }
        _ => (true, "no rule; passes by default".into()),
    }
}

const GATE_SYSTEM: &str = "You review a finished phone-automation trajectory along one dimension. Answer \
<verdict>pass</verdict> or <verdict>fail</verdict>, then <rationale>one or two sentences</rationale>.";

fn gate_prompt(name: Discriminator, trajectory: &Trajectory) -> PromptBundle {
    let steps: Vec<String> = trajectory
        .steps
        .iter()
        .map(|s| {
            let action = s.action.as_ref().map(|a| a.to_string()).unwrap_or_else(|| "(none)".into());
            let summary = s.response.as_ref().map(|r| r.action_summary.as_str()).unwrap_or("");
            let err = s.error.as_ref().map(|e| format!(" | error: {}", e.code())).unwrap_or_default();
            format!("step {} on {}: {action} | {summary}{err}", s.index, s.snapshot_before.screen_ref())
        })
        .collect();
    let mut b = PromptBundle::new(Role::Discriminator, GATE_SYSTEM)
        .text(format!("## Dimension\n{}", name.question()))
        .text(format!("## Instruction\n{}", trajectory.instruction))
        .text(format!("## Steps\n{}", if steps.is_empty() { "(none)".into() } else { steps.join("\n") }));
    if let Some(last) = trajectory.steps.last() {
        b = b.text("## Final screen").snapshot(&last.snapshot_after);
    }
    b.meta("discriminator", name.as_str()).meta("instruction", trajectory.instruction.clone())
}

fn parse_gate(text: &str) -> Option<(bool, String)> {
    let pass = match tag_text(text, "verdict")?.trim().to_ascii_lowercase().as_str() {
        "pass" => true,
        "fail" => false,
        _ => return None,
    };
    Some((pass, tag_text(text, "rationale").unwrap_or("").trim().to_string()))
}

/// Runs all seven judges. A judge that errors or replies unreadably is
/// replaced by its rule, with a warning.
pub fn gate_trajectory(trajectory: &Trajectory, gateway: &dyn Backend) -> GateResult {
    let mut warnings = Vec::new();
    let verdicts: Vec<DiscriminatorVerdict> = Discriminator::ALL
        .into_iter()
        .map(|name| {
            let judged = match gateway.complete(&gate_prompt(name, trajectory)) {
                Ok(reply) => parse_gate(&reply).ok_or_else(|| format!("{name} judge reply unreadable")),
                Err(e) => Err(format!("{name} judge failed: {e}")),
            };
            match judged {
                Ok((pass, rationale)) => DiscriminatorVerdict { name, pass, rationale, fallback: false },
                Err(w) => {
                    tracing::debug!(trajectory = %trajectory.id, "{w}");
                    warnings.push(w);
                    let (pass, rationale) = rule_verdict(name, trajectory);
                    DiscriminatorVerdict { name, pass, rationale, fallback: true }
                }
            }
        })
        .collect();
    let accepted = verdicts.iter().all(|v| v.pass);
    GateResult {
        trajectory_id: trajectory.id.clone(),
        verdicts,
        accepted,
        routed_to: if accepted { Route::FinetuneSet } else { Route::CorrectionQueue },
        warnings,
    }
}
