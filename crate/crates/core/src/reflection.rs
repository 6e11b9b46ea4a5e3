//! Action, trajectory and global reflectors plus the feedback they route back
//! to the executor.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::executor::{StepError, StepRecord};
use crate::gateway::{Backend, Judged, PromptBundle, Role};
use crate::markup::tag_text;
use crate::sim::ScreenSnapshot;

pub const MIN_WINDOW: usize = 3;
pub const MAX_WINDOW: usize = 5;
pub const DEFAULT_RESUME_BUDGET: u32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Action,
    Trajectory,
    Global,
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Action => "action",
            Self::Trajectory => "trajectory",
            Self::Global => "global",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReflectionVerdict {
    pub level: Level,
    pub ok: bool,
    pub diagnosis: String,
    pub suggestion: String,
    /// Inclusive step range the verdict covers.
    pub step_span: (usize, usize),
}

impl ReflectionVerdict {
    fn passing(level: Level, step_span: (usize, usize), diagnosis: &str) -> Self {
        Self { level, ok: true, diagnosis: diagnosis.into(), suggestion: String::new(), step_span }
    }

    /// Text placed in the executor's feedback section.
    pub fn feedback_line(&self) -> String {
        let mut line = format!("[{} reflection, steps {}-{}] {}", self.level, self.step_span.0, self.step_span.1, self.diagnosis);
        if !self.suggestion.is_empty() {
            line.push_str(" Suggestion: ");
            line.push_str(&self.suggestion);
        }
        line
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ReflectionError {
    #[error("trajectory window {0} is outside {MIN_WINDOW}..={MAX_WINDOW}")]
    WindowOutOfRange(usize),
}

/// Reads `<verdict>ok|not_ok</verdict><diagnosis>..</diagnosis><suggestion>..</suggestion>`.
pub fn parse_verdict(text: &str) -> Option<(bool, String, String)> {
    let v = tag_text(text, "verdict")?.trim().to_ascii_lowercase().replace(['-', ' '], "_");
    let ok = match v.as_str() {
        "ok" => true,
        "not_ok" => false,
        _ => return None,
    };
    let diagnosis = tag_text(text, "diagnosis").unwrap_or("").trim().to_string();
    let suggestion = tag_text(text, "suggestion").unwrap_or("").trim().to_string();
    if !ok && diagnosis.is_empty() {
        return None;
    }
    Some((ok, diagnosis, suggestion))
}

const VERDICT_FORMAT: &str = "Answer with <verdict>ok</verdict> or <verdict>not_ok</verdict>, then \
<diagnosis>what went wrong</diagnosis> and <suggestion>what to do next</suggestion>.";

fn judge(bundle: PromptBundle, level: Level, span: (usize, usize), gateway: &dyn Backend) -> Judged<ReflectionVerdict> {
    match gateway.complete(&bundle) {
        Err(e) => Judged::warned(
            ReflectionVerdict::passing(level, span, "reflector unavailable"),
            format!("{level} reflector failed: {e}"),
        ),
        Ok(text) => match parse_verdict(&text) {
            Some((ok, diagnosis, suggestion)) => {
                Judged::clean(ReflectionVerdict { level, ok, diagnosis, suggestion, step_span: span })
            }
            None => Judged::warned(
                ReflectionVerdict::passing(level, span, "reflector reply unreadable"),
                format!("{level} reflector reply unreadable"),
            ),
        },
    }
}

fn step_line(s: &StepRecord) -> String {
    let action = s.action.as_ref().map(|a| a.to_string()).unwrap_or_else(|| "(none)".into());
    let summary = s.response.as_ref().map(|r| r.action_summary.as_str()).unwrap_or("(no summary)");
    let error = match &s.error {
        None => String::new(),
        Some(e) => format!(" | error: {}", e.code()),
    };
    format!("step {}: {action} | {summary}{error}", s.index)
}

/// Longest run of identical consecutive actions.
pub fn longest_repeat(steps: &[StepRecord]) -> usize {
    let mut best = 0;
    let mut run = 0;
    let mut prev = None;
    for s in steps {
        match (&s.action, prev) {
            (Some(a), Some(p)) if a == p => run += 1,
            (Some(_), _) => run = 1,
            (None, _) => run = 0,
        }
        prev = s.action.as_ref();
        best = best.max(run);
    }
    best
}

pub fn action_prompt(step: &StepRecord, instruction: &str) -> PromptBundle {
    let changed = if step.snapshot_before.same_view(&step.snapshot_after) { "no" } else { "yes" };
    let env_error = match &step.error {
        Some(StepError::Env(e)) => e.code().to_string(),
        _ => "none".into(),
    };
    let action = step.action.as_ref().map(|a| a.to_string()).unwrap_or_default();
    let summary = step.response.as_ref().map(|r| r.action_summary.clone()).unwrap_or_default();
    PromptBundle::new(
        Role::ActionReflector,
        format!(
            "You check one action of a phone-operating assistant. Compare the screens before and after \
             and decide whether the result matches what the action meant to do. Name the mismatch class \
             when it does not: grounding error, misperception, or misinterpretation. {VERDICT_FORMAT}"
        ),
    )
    .text(format!("## Instruction\n{instruction}"))
    .text(format!(
        "## Action\n{action}\nIntent: {summary}\nScreen changed: {changed}\nEnv error: {env_error}"
    ))
    .text(format!("## Before\n{}", step.snapshot_before.to_text()))
    .text(format!("## After\n{}", step.snapshot_after.to_text()))
    .meta("instruction", instruction)
    .meta("screen", step.snapshot_before.screen_ref().to_string())
    .meta("step", step.index.to_string())
}

/// Judges one executed step.
pub fn reflect_action(step: &StepRecord, instruction: &str, gateway: &dyn Backend) -> Judged<ReflectionVerdict> {
    judge(action_prompt(step, instruction), Level::Action, (step.index, step.index), gateway)
}

pub fn trajectory_prompt(window: &[StepRecord], instruction: &str) -> PromptBundle {
    let lines: Vec<String> = window.iter().map(step_line).collect();
    let last = window.last().map(|s| s.snapshot_after.screen_ref().to_string()).unwrap_or_default();
    PromptBundle::new(
        Role::TrajectoryReflector,
        format!(
            "You review the last few actions of a phone-operating assistant for loops, detours and \
             actions that do not serve the instruction. {VERDICT_FORMAT}"
        ),
    )
    .text(format!("## Instruction\n{instruction}"))
    .text(format!(
        "## Recent steps\n{}\nRepeated identical actions in window: {}",
        lines.join("\n"),
        longest_repeat(window)
    ))
    .meta("instruction", instruction)
    .meta("screen", last)
}

/// Judges a sliding window of recent steps.
pub fn reflect_trajectory(window: &[StepRecord], instruction: &str, gateway: &dyn Backend) -> Judged<ReflectionVerdict> {
    let span = match (window.first(), window.last()) {
        (Some(a), Some(b)) => (a.index, b.index),
        _ => (0, 0),
    };
    judge(trajectory_prompt(window, instruction), Level::Trajectory, span, gateway)
}

pub fn global_prompt(steps: &[StepRecord], instruction: &str, final_screen: &ScreenSnapshot) -> PromptBundle {
    let lines: Vec<String> = steps.iter().map(step_line).collect();
    PromptBundle::new(
        Role::GlobalReflector,
        format!(
            "The assistant believes it has finished. Review every step and the final screen and decide \
             whether the whole instruction is really complete. When it is not, say what remains. {VERDICT_FORMAT}"
        ),
    )
    .text(format!("## Instruction\n{instruction}"))
    .text(format!("## Steps\n{}", lines.join("\n")))
    .snapshot(final_screen)
    .meta("instruction", instruction)
    .meta("screen", final_screen.screen_ref().to_string())
}

/// Judges a run at its tentative end.
pub fn reflect_global(
    steps: &[StepRecord],
    instruction: &str,
    final_screen: &ScreenSnapshot,
    gateway: &dyn Backend,
) -> Judged<ReflectionVerdict> {
    let span = (0, steps.len().saturating_sub(1));
    judge(global_prompt(steps, instruction, final_screen), Level::Global, span, gateway)
}

/// Decides when the trajectory reflector runs: every `window` steps, or
/// earlier once two action-level failures pile up since the last review.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cadence {
    window: usize,
    since_last: usize,
}

impl Cadence {
    pub fn new(window: usize) -> Result<Self, ReflectionError> {
        if !(MIN_WINDOW..=MAX_WINDOW).contains(&window) {
            return Err(ReflectionError::WindowOutOfRange(window));
        }
        Ok(Self { window, since_last: 0 })
    }

    pub fn window(&self) -> usize {
        self.window
    }

    /// Call once per recorded step; returns the window to review when due.
    pub fn observe<'a>(&mut self, steps: &'a [StepRecord]) -> Option<&'a [StepRecord]> {
        self.since_last += 1;
        let recent = &steps[steps.len().saturating_sub(self.since_last.min(self.window))..];
        let failures = recent
            .iter()
            .flat_map(|s| &s.reflections)
            .filter(|v| v.level == Level::Action && !v.ok)
            .count();
        if self.since_last >= self.window || failures >= 2 {
            self.since_last = 0;
            Some(&steps[steps.len().saturating_sub(self.window)..])
        } else {
            None
        }
    }
}

/// Latest verdict per level. An ok verdict clears its level.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackBoard {
    entries: BTreeMap<Level, ReflectionVerdict>,
}

impl FeedbackBoard {
    pub fn update(&mut self, verdict: &ReflectionVerdict) {
        if verdict.ok {
            self.entries.remove(&verdict.level);
        } else {
            self.entries.insert(verdict.level, verdict.clone());
        }
    }

    pub fn lines(&self) -> Vec<String> {
        self.entries.values().map(ReflectionVerdict::feedback_line).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn verdict(level: Level, ok: bool, d: &str) -> ReflectionVerdict {
        ReflectionVerdict { level, ok, diagnosis: d.into(), suggestion: "s".into(), step_span: (0, 0) }
    }

    #[test]
    fn verdict_parsing() {
        assert_eq!(parse_verdict("<verdict>ok</verdict>"), Some((true, String::new(), String::new())));
        assert_eq!(
            parse_verdict("<verdict>not_ok</verdict><diagnosis>missed</diagnosis><suggestion>retry</suggestion>"),
            Some((false, "missed".into(), "retry".into()))
        );
        assert_eq!(parse_verdict("<verdict>not ok</verdict><diagnosis>d</diagnosis>").map(|v| v.0), Some(false));
        assert_eq!(parse_verdict("<verdict>not_ok</verdict>"), None);
        assert_eq!(parse_verdict("looks fine"), None);
    }

    #[test]
    fn window_range_is_enforced() {
        assert_eq!(Cadence::new(2), Err(ReflectionError::WindowOutOfRange(2)));
        assert_eq!(Cadence::new(6), Err(ReflectionError::WindowOutOfRange(6)));
        assert!(Cadence::new(3).is_ok() && Cadence::new(5).is_ok());
    }

    #[test]
    fn board_keeps_latest_per_level() {
        let mut b = FeedbackBoard::default();
        b.update(&verdict(Level::Action, false, "first"));
        b.update(&verdict(Level::Trajectory, false, "loop"));
        b.update(&verdict(Level::Action, false, "second"));
        let lines = b.lines();
        assert_eq!(lines.len(), 2);
        assert!(lines[0].contains("second") && lines[1].contains("loop"));
        b.update(&verdict(Level::Action, true, ""));
        assert_eq!(b.lines().len(), 1);
    }
}
