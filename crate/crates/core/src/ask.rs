//! Deciding when to ask the user, and the paired training samples built from
//! clarified steps.

use serde::{Deserialize, Serialize};

use crate::action::Action;
use crate::gateway::{Backend, Judged, PromptBundle, Role};
use crate::markup::tag_text;
use crate::sim::{Ambiguity, ScreenSnapshot};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaPair {
    pub question: String,
    pub answer: String,
    pub step_index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrustDecision {
    pub trustworthy: bool,
    pub reason: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub proposed_question: Option<String>,
}

impl TrustDecision {
    pub fn trust(reason: impl Into<String>) -> Self {
        Self { trustworthy: true, reason: reason.into(), proposed_question: None }
    }

    pub fn distrust(reason: impl Into<String>, question: impl Into<String>) -> Self {
        Self { trustworthy: false, reason: reason.into(), proposed_question: Some(question.into()) }
    }
}

const TRUST_SYSTEM: &str = "You guard a phone-operating assistant. Decide whether the instruction, \
together with the answers the user already gave, is specific enough to act on without guessing. \
Reply with <trust>trustworthy</trust> or <trust>untrustworthy</trust>, a short <reason>, and when \
untrustworthy a single <question> for the user.";

pub fn render_qa(qa: &[QaPair]) -> String {
    if qa.is_empty() {
        return "(none)".into();
    }
    qa.iter().map(|p| format!("Q: {}\nA: {}", p.question, p.answer)).collect::<Vec<_>>().join("\n")
}

fn render_history(history: &[String]) -> String {
    if history.is_empty() {
        return "(empty)".into();
    }
    history.iter().enumerate().map(|(i, h)| format!("{}. {h}", i + 1)).collect::<Vec<_>>().join("\n")
}

pub fn trust_prompt(instruction: &str, snapshot: &ScreenSnapshot, history: &[String], qa: &[QaPair]) -> PromptBundle {
    PromptBundle::new(Role::TrustAssessor, TRUST_SYSTEM)
        .text(format!("## Instruction\n{instruction}"))
        .text(format!("## History\n{}", render_history(history)))
        .text(format!("## Clarifications\n{}", render_qa(qa)))
        .snapshot(snapshot)
        .meta("instruction", instruction)
        .meta("screen", snapshot.screen_ref().to_string())
        .meta("step", snapshot.step_index.to_string())
}

pub fn parse_trust(text: &str) -> Option<TrustDecision> {
    let verdict = tag_text(text, "trust")?.trim().to_ascii_lowercase();
    let reason = tag_text(text, "reason").unwrap_or("").trim().to_string();
    match verdict.as_str() {
        "trustworthy" => Some(TrustDecision::trust(reason)),
        "untrustworthy" => {
            let q = tag_text(text, "question")?.trim();
            (!q.is_empty()).then(|| TrustDecision::distrust(reason, q))
        }
        _ => None,
    }
}

/// An ambiguity is settled once the user answered its question or any
/// question mentioning its topic.
fn resolved(a: &Ambiguity, qa: &[QaPair]) -> bool {
    let topic = a.topic.to_lowercase();
    qa.iter().any(|p| {
        let q = p.question.trim().to_lowercase();
        q == a.question.trim().to_lowercase() || (!topic.is_empty() && q.contains(&topic))
    })
}

/// Rule used when the assessor's reply cannot be read.
pub fn rule_decision(instruction: &str, ambiguities: &[Ambiguity], qa: &[QaPair]) -> TrustDecision {
    let lower = instruction.to_lowercase();
    match ambiguities.iter().find(|a| lower.contains(&a.marker.to_lowercase()) && !resolved(a, qa)) {
        Some(a) => TrustDecision::distrust(format!("\"{}\" leaves the {} open", a.marker, a.topic), &a.question),
        None => TrustDecision::trust("no open ambiguity"),
    }
}

/// One trust decision for the current step.
///
/// A dead backend degrades to trusting the instruction; an unreadable reply
/// falls back to the declared ambiguity markers.
pub fn assess_scenario(
    instruction: &str,
    snapshot: &ScreenSnapshot,
    history: &[String],
    qa: &[QaPair],
    ambiguities: &[Ambiguity],
    gateway: &dyn Backend,
) -> Judged<TrustDecision> {
    let bundle = trust_prompt(instruction, snapshot, history, qa);
    match gateway.complete(&bundle) {
        Err(e) => Judged::warned(TrustDecision::trust("assessor unavailable"), format!("trust assessor failed: {e}")),
        Ok(text) => match parse_trust(&text) {
            Some(d) => Judged::clean(d),
            None => Judged::warned(rule_decision(instruction, ambiguities, qa), "trust assessor reply unreadable; used rule"),
        },
    }
}

/// A screen annotated for clarification training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedStep {
    pub instruction: String,
    #[serde(default)]
    pub history: Vec<String>,
    pub snapshot: ScreenSnapshot,
    pub gold: Action,
    pub needs_ask: bool,
    #[serde(default)]
    pub question: Option<String>,
    #[serde(default)]
    pub qa: Option<Vec<QaPair>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AskSample {
    pub instruction: String,
    pub history: Vec<String>,
    pub snapshot: ScreenSnapshot,
    pub qa_history: Vec<QaPair>,
    pub gold: Action,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum InterleaveError {
    #[error("step needs a question but none was given")]
    MissingQuestion,
    #[error("step needs question-answer history for its second sample")]
    MissingQa,
    #[error("gold action must be the post-clarification action, not an ask")]
    AskGold,
}

/// Splits one screen into a without-answers sample and a with-answers sample.
///
/// The first sample's gold becomes the question when the step needs one; the
/// second always keeps the original action.
pub fn interleave_training_samples(step: &AnnotatedStep) -> Result<[AskSample; 2], InterleaveError> {
    if matches!(step.gold, Action::Ask { .. }) {
        return Err(InterleaveError::AskGold);
    }
    let first_gold = if step.needs_ask {
        let q = step.question.as_deref().filter(|q| !q.trim().is_empty()).ok_or(InterleaveError::MissingQuestion)?;
        Action::ask(q)
    } else {
        step.gold.clone()
    };
    let qa = match (&step.qa, step.needs_ask) {
        (Some(qa), _) if !qa.is_empty() => qa.clone(),
        (_, true) => return Err(InterleaveError::MissingQa),
        (other, false) => other.clone().unwrap_or_default(),
    };
    let base = |qa_history: Vec<QaPair>, gold: Action| AskSample {
        instruction: step.instruction.clone(),
        history: step.history.clone(),
        snapshot: step.snapshot.clone(),
        qa_history,
        gold,
    };
    Ok([base(Vec::new(), first_gold), base(qa, step.gold.clone())])
}

/// Interleaves the pairs of many steps: first, second, first, second, ...
pub fn interleave_batch(steps: &[AnnotatedStep]) -> Result<Vec<AskSample>, InterleaveError> {
    let mut out = Vec::with_capacity(steps.len() * 2);
    for s in steps {
        out.extend(interleave_training_samples(s)?);
    }
    Ok(out)
}
