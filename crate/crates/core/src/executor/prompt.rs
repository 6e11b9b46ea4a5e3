use crate::ask::{render_qa, QaPair};
use crate::gateway::{PromptBundle, Role};
use crate::knowledge::KnowledgeDoc;
use crate::sim::ScreenSnapshot;

use super::HistorySummary;

pub const EXECUTOR_SYSTEM: &str = "You operate a phone to carry out the user's instruction, one action per turn. \
Reply in exactly three blocks: <thinking>your reasoning</thinking>, <summary>one sentence describing the \
action</summary>, and <action>one JSON object</action>.";

pub const ACTION_SPACE: &str = "## Action space
{\"action\":\"click\",\"coordinate\":[x,y]}
{\"action\":\"long_press\",\"coordinate\":[x,y],\"time\":seconds}
{\"action\":\"swipe\",\"coordinate\":[x,y],\"coordinate2\":[x,y]}
{\"action\":\"type\",\"text\":\"...\"}
{\"action\":\"clear_text\"}
{\"action\":\"system_button\",\"button\":\"Back|Home|Menu|Enter\"}
{\"action\":\"open\",\"text\":\"app name\"}
{\"action\":\"wait\",\"time\":seconds}
{\"action\":\"answer\",\"text\":\"...\"}
{\"action\":\"terminate\",\"status\":\"success|failure\"}
Coordinates are integer pixels from the top-left corner.";

/// Assembles the executor prompt. Sections always appear in the same order,
/// empty ones included, so identical inputs give identical bytes.
pub fn build_prompt(
    instruction: &str,
    history: &HistorySummary,
    snapshot: &ScreenSnapshot,
    knowledge: &[KnowledgeDoc],
    feedback: &[String],
    qa: &[QaPair],
) -> PromptBundle {
    let knowledge_text = if knowledge.is_empty() {
        "(none)".to_string()
    } else {
        knowledge
            .iter()
            .map(|d| if d.title.is_empty() { format!("[{}] {}", d.id, d.body) } else { format!("[{}] {}: {}", d.id, d.title, d.body) })
            .collect::<Vec<_>>()
            .join("\n")
    };
    let history_text = if history.is_empty() { "(empty)".to_string() } else { history.rendered() };
    let feedback_text = if feedback.is_empty() {
        "(none)".to_string()
    } else {
        feedback.iter().map(|f| format!("- {f}")).collect::<Vec<_>>().join("\n")
    };
    PromptBundle::new(Role::Executor, EXECUTOR_SYSTEM)
        .text(format!("## Instruction\n{instruction}"))
        .text(format!("## Knowledge\n{knowledge_text}"))
        .text(format!("## History\n{history_text}"))
        .text(format!("## Feedback\n{feedback_text}"))
        .text(format!("## Clarifications\n{}", render_qa(qa)))
        .snapshot(snapshot)
        .text(ACTION_SPACE)
        .meta("instruction", instruction)
        .meta("screen", snapshot.screen_ref().to_string())
        .meta("step", snapshot.step_index.to_string())
}
