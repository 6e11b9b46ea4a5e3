//! Splitting composite instructions into atomic tasks and carrying what one
//! task learned into the next.

use serde::{Deserialize, Serialize};

use crate::ask::QaPair;
use crate::events::{RunEvent, Sink};
use crate::executor::{Advance, ExecError, ExecutorConfig, Origin, RunContext, TaskRun, Trajectory};
use crate::gateway::{Backend, GatewayError, Judged, PromptBundle, Role};
use crate::markup::{all_tags, tag_text};
use crate::sim::{EnvOutcome, Environment};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Classification {
    Atomic,
    Composite,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AtomicTask {
    pub index: usize,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rewritten_text: Option<String>,
}

impl AtomicTask {
    pub fn new(index: usize, text: impl Into<String>) -> Self {
        Self { index, text: text.into(), rewritten_text: None }
    }

    /// The text the executor actually receives.
    pub fn effective(&self) -> &str {
        self.rewritten_text.as_deref().unwrap_or(&self.text)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fact {
    pub key: String,
    pub value: String,
    /// Steps of the source trajectory the fact was read from.
    pub steps: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractedMemory {
    pub facts: Vec<Fact>,
    pub source_task_index: usize,
}

impl ExtractedMemory {
    pub fn empty(source_task_index: usize) -> Self {
        Self { facts: Vec::new(), source_task_index }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum OrchestrationError {
    #[error("instruction is empty")]
    InvalidInstruction,
    #[error("decomposition produced {0} task(s); at least 2 are needed")]
    DegenerateDecomposition(usize),
    #[error("backend failed: {0}")]
    Backend(#[from] GatewayError),
}

const CLASSIFIER_SYSTEM: &str = "Decide whether a phone instruction is a single atomic task or a composite \
of several tasks that could each be handed to an assistant on their own. Reply with \
<verdict>atomic</verdict> or <verdict>composite</verdict>.";

const ORCHESTRATOR_SYSTEM: &str = "Split a composite phone instruction into the sequence of atomic tasks it \
contains, in order. Keep each task at the level of a user request; do not plan individual taps. Reply with \
one <task>...</task> block per task.";

const EXTRACTOR_SYSTEM: &str = "Read the finished task's steps and screens and pull out the facts the next \
task will need. Reply with <facts>[{\"key\": ..., \"value\": ..., \"steps\": [step numbers]}]</facts>; \
use an empty list when nothing is needed.";

const REWRITER_SYSTEM: &str = "Rewrite the next task so that it states the given facts explicitly and can be \
done without remembering the previous task. Reply with <task>...</task>.";

/// Separators the rule fallbacks treat as task boundaries, longest first.
const SEPARATORS: [&str; 6] = [", and then ", ", then ", ", and ", " then ", " and ", ","];

fn mentions_app(lower: &str, app: &str) -> bool {
    let app = app.to_lowercase();
    lower.match_indices(&app).any(|(i, _)| {
        let before = lower[..i].chars().next_back();
        let after = lower[i + app.len()..].chars().next();
        !before.is_some_and(char::is_alphanumeric) && !after.is_some_and(char::is_alphanumeric)
    })
}

/// Conjunctions or two named apps mean composite.
pub fn rule_classification(instruction: &str, app_names: &[&str]) -> Classification {
    let lower = instruction.to_lowercase();
    let conjunction = lower.contains(';') || SEPARATORS.iter().any(|s| lower.contains(s));
    let apps = app_names.iter().filter(|a| mentions_app(&lower, a)).count();
    if conjunction || apps >= 2 {
        Classification::Composite
    } else {
        Classification::Atomic
    }
}

pub fn classify(
    instruction: &str,
    app_names: &[&str],
    gateway: &dyn Backend,
) -> Result<Judged<Classification>, OrchestrationError> {
    if instruction.trim().is_empty() {
        return Err(OrchestrationError::InvalidInstruction);
    }
    let bundle = PromptBundle::new(Role::TaskClassifier, CLASSIFIER_SYSTEM)
        .text(format!("## Instruction\n{instruction}"))
        .meta("instruction", instruction);
    let text = gateway.complete(&bundle)?;
    let parsed = tag_text(&text, "verdict").map(|v| v.trim().to_ascii_lowercase());
    Ok(match parsed.as_deref() {
        Some("atomic") => Judged::clean(Classification::Atomic),
        Some("composite") => Judged::clean(Classification::Composite),
        _ => Judged::warned(rule_classification(instruction, app_names), "classifier reply unreadable; used rule"),
    })
}

/// Splits on conjunctions.
pub fn rule_split(instruction: &str) -> Vec<String> {
    let mut text = instruction.replace(';', "\u{1f}");
    for sep in SEPARATORS {
        text = text.replace(sep, "\u{1f}");
    }
    text.split('\u{1f}')
        .map(|p| p.trim().trim_end_matches('.').trim().to_string())
        .filter(|p| !p.is_empty())
        .collect()
}

fn numbered(parts: Vec<String>) -> Vec<AtomicTask> {
    parts.into_iter().enumerate().map(|(i, t)| AtomicTask::new(i, t)).collect()
}

pub fn decompose(instruction: &str, gateway: &dyn Backend) -> Result<Judged<Vec<AtomicTask>>, OrchestrationError> {
    if instruction.trim().is_empty() {
        return Err(OrchestrationError::InvalidInstruction);
    }
    let bundle = PromptBundle::new(Role::TaskOrchestrator, ORCHESTRATOR_SYSTEM)
        .text(format!("## Instruction\n{instruction}"))
        .meta("instruction", instruction);
    let text = gateway.complete(&bundle)?;
    let parts: Vec<String> = all_tags(&text, "task").into_iter().map(|t| t.trim().to_string()).filter(|t| !t.is_empty()).collect();
    let (parts, warning) = if parts.is_empty() {
        (rule_split(instruction), Some("orchestrator reply unreadable; split on conjunctions"))
    } else {
        (parts, None)
    };
    if parts.len() < 2 {
        return Err(OrchestrationError::DegenerateDecomposition(parts.len()));
    }
    let tasks = numbered(parts);
    Ok(match warning {
        Some(w) => Judged::warned(tasks, w),
        None => Judged::clean(tasks),
    })
}

#[derive(Debug, Deserialize)]
struct FactFile {
    key: String,
    value: serde_json::Value,
    #[serde(default)]
    steps: Vec<usize>,
}

fn extractor_prompt(trajectory: &Trajectory, next_task: Option<&str>) -> PromptBundle {
    let mut lines = Vec::new();
    for s in &trajectory.steps {
        let summary = s.response.as_ref().map(|r| r.action_summary.as_str()).unwrap_or("(no action)");
        lines.push(format!("step {}: {summary}\n  screen after: {}", s.index, s.snapshot_after.visible_text().join(" | ")));
    }
    PromptBundle::new(Role::TaskExtractor, EXTRACTOR_SYSTEM)
        .text(format!("## Finished task\n{}", trajectory.instruction))
        .text(format!("## Next task\n{}", next_task.unwrap_or("(none)")))
        .text(format!("## Steps\n{}", lines.join("\n")))
        .meta("instruction", trajectory.instruction.as_str())
}

/// Distills facts from a finished task. Facts that cite no existing step
/// are dropped.
pub fn extract_memory(
    trajectory: &Trajectory,
    source_task_index: usize,
    next_task: Option<&str>,
    gateway: &dyn Backend,
) -> Result<Judged<ExtractedMemory>, OrchestrationError> {
    let text = gateway.complete(&extractor_prompt(trajectory, next_task))?;
    let Some(body) = tag_text(&text, "facts") else {
        return Ok(Judged::warned(ExtractedMemory::empty(source_task_index), "extractor reply unreadable; no facts"));
    };
    let raw: Vec<FactFile> = match serde_json::from_str(body.trim()) {
        Ok(v) => v,
        Err(e) => {
            return Ok(Judged::warned(
                ExtractedMemory::empty(source_task_index),
                format!("extractor facts unreadable: {e}"),
            ))
        }
    };
    let n = trajectory.steps.len();
    let mut dropped = 0;
    let facts: Vec<Fact> = raw
        .into_iter()
        .filter_map(|f| {
            let value = match f.value {
                serde_json::Value::String(s) => s,
                other => other.to_string(),
            };
            let keep = !f.steps.is_empty() && f.steps.iter().all(|&s| s < n);
            if !keep {
                dropped += 1;
            }
            keep.then_some(Fact { key: f.key, value, steps: f.steps })
        })
        .collect();
    let memory = ExtractedMemory { facts, source_task_index };
    Ok(if dropped > 0 {
        Judged::warned(memory, format!("dropped {dropped} fact(s) without valid step provenance"))
    } else {
        Judged::clean(memory)
    })
}

fn fallback_rewrite(text: &str, facts: &[Fact]) -> String {
    let known: Vec<String> = facts.iter().map(|f| format!("{} = {}", f.key, f.value)).collect();
    format!("{}. Known information: {}", text.trim().trim_end_matches('.'), known.join("; "))
}

/// Folds the memory into the next task's text. No facts means no change.
pub fn rewrite_task(
    next: &AtomicTask,
    memory: &ExtractedMemory,
    gateway: &dyn Backend,
) -> Result<Judged<AtomicTask>, OrchestrationError> {
    let mut task = next.clone();
    if memory.facts.is_empty() {
        task.rewritten_text = Some(next.text.clone());
        return Ok(Judged::clean(task));
    }
    let facts: Vec<String> = memory.facts.iter().map(|f| format!("- {}: {}", f.key, f.value)).collect();
    let bundle = PromptBundle::new(Role::TaskRewriter, REWRITER_SYSTEM)
        .text(format!("## Next task\n{}", next.text))
        .text(format!("## Facts\n{}", facts.join("\n")))
        .meta("instruction", next.text.as_str());
    let text = gateway.complete(&bundle)?;
    match tag_text(&text, "task").map(str::trim).filter(|t| !t.is_empty()) {
        Some(t) => {
            task.rewritten_text = Some(t.to_string());
            Ok(Judged::clean(task))
        }
        None => {
            task.rewritten_text = Some(fallback_rewrite(&next.text, &memory.facts));
            Ok(Judged::warned(task, "rewriter reply unreadable; appended facts"))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlanConfig {
    /// Classify and decompose; off runs the instruction as one task.
    pub orchestrate: bool,
    pub memory_transfer: bool,
    /// Hand every earlier task's facts forward, not just the previous one's.
    pub accumulate_memory: bool,
}

impl Default for PlanConfig {
    fn default() -> Self {
        Self { orchestrate: true, memory_transfer: true, accumulate_memory: false }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PlanError {
    #[error(transparent)]
    Orchestration(#[from] OrchestrationError),
    #[error(transparent)]
    Exec(#[from] ExecError),
}

#[derive(Debug, Clone, PartialEq)]
pub enum PlanAdvance {
    Planned,
    Continue,
    Reflecting,
    AwaitingUser(String),
    TaskFinished(usize, EnvOutcome),
    Finished(EnvOutcome),
}

/// A user instruction carried from planning through every atomic task.
#[derive(Debug, Clone)]
pub struct PlanRun {
    instruction: String,
    id_prefix: String,
    origin: Option<Origin>,
    config: PlanConfig,
    tasks: Vec<AtomicTask>,
    composite: bool,
    planned: bool,
    current: Option<TaskRun>,
    done: Vec<Trajectory>,
    memories: Vec<ExtractedMemory>,
    outcome: Option<EnvOutcome>,
}

impl PlanRun {
    pub fn new(instruction: impl Into<String>, id_prefix: impl Into<String>, config: PlanConfig) -> Self {
        Self {
            instruction: instruction.into(),
            id_prefix: id_prefix.into(),
            origin: None,
            config,
            tasks: Vec::new(),
            composite: false,
            planned: false,
            current: None,
            done: Vec::new(),
            memories: Vec::new(),
            outcome: None,
        }
    }

    pub fn with_origin(mut self, origin: Origin) -> Self {
        self.origin = Some(origin);
        self
    }

    pub fn instruction(&self) -> &str {
        &self.instruction
    }

    pub fn tasks(&self) -> &[AtomicTask] {
        &self.tasks
    }

    pub fn is_composite(&self) -> bool {
        self.composite
    }

    pub fn memories(&self) -> &[ExtractedMemory] {
        &self.memories
    }

    pub fn outcome(&self) -> Option<&EnvOutcome> {
        self.outcome.as_ref()
    }

    pub fn pending_question(&self) -> Option<&str> {
        self.current.as_ref().and_then(TaskRun::pending_question)
    }

    /// Finished trajectories followed by the one in progress.
    pub fn trajectories(&self) -> Vec<Trajectory> {
        let mut out = self.done.clone();
        if let Some(c) = &self.current {
            out.push(c.trajectory().clone());
        }
        out
    }

    fn qa_so_far(&self) -> Vec<QaPair> {
        self.done.iter().flat_map(Trajectory::qa_pairs).collect()
    }

    fn warn<T>(judged: Judged<T>, sink: Sink) -> T {
        if let Some(w) = judged.warning {
            sink(RunEvent::Warning { message: w });
        }
        judged.value
    }

    fn finish(&mut self, outcome: EnvOutcome, sink: Sink) -> PlanAdvance {
        self.outcome = Some(outcome.clone());
        sink(RunEvent::Finished { outcome: outcome.clone() });
        PlanAdvance::Finished(outcome)
    }

    fn plan(&mut self, env: &Environment, ctx: &RunContext, sink: Sink) -> Result<(), PlanError> {
        let apps: Vec<String> = env.scenario().app_names().into_iter().map(str::to_string).collect();
        let app_refs: Vec<&str> = apps.iter().map(String::as_str).collect();
        let class = if self.config.orchestrate {
            Self::warn(classify(&self.instruction, &app_refs, ctx.gateway)?, sink)
        } else if self.instruction.trim().is_empty() {
            return Err(OrchestrationError::InvalidInstruction.into());
        } else {
            Classification::Atomic
        };
        self.tasks = vec![AtomicTask::new(0, self.instruction.clone())];
        if class == Classification::Composite {
            match decompose(&self.instruction, ctx.gateway) {
                Ok(j) => {
                    self.tasks = Self::warn(j, sink);
                    self.composite = true;
                }
                Err(OrchestrationError::DegenerateDecomposition(n)) => sink(RunEvent::Warning {
                    message: format!("decomposition gave {n} task(s); running the instruction as one task"),
                }),
                Err(e) => return Err(e.into()),
            }
        }
        self.planned = true;
        sink(RunEvent::Plan { composite: self.composite, tasks: self.tasks.clone() });
        Ok(())
    }

    fn start_next(&mut self, ctx: &RunContext, sink: Sink) -> Result<(), PlanError> {
        let k = self.done.len();
        if k > 0 && self.config.memory_transfer {
            let memory = if self.config.accumulate_memory {
                ExtractedMemory {
                    facts: self.memories.iter().flat_map(|m| m.facts.clone()).collect(),
                    source_task_index: k - 1,
                }
            } else {
                self.memories.last().cloned().unwrap_or_else(|| ExtractedMemory::empty(k - 1))
            };
            let task = Self::warn(rewrite_task(&self.tasks[k], &memory, ctx.gateway)?, sink);
            self.tasks[k] = task.clone();
            sink(RunEvent::Rewrite { task_index: k, task });
        }
        let mut config: ExecutorConfig = ctx.config.clone();
        if k + 1 < self.tasks.len() {
            config.judge_with_predicate = false;
        }
        let run = TaskRun::start(
            k,
            format!("{}-t{k}", self.id_prefix),
            self.tasks[k].effective(),
            self.origin.clone(),
            &config,
            sink,
        )?
        .with_qa(self.qa_so_far());
        self.current = Some(run);
        Ok(())
    }

    /// Performs one planning action or one executor step.
    pub fn advance(&mut self, env: &mut Environment, ctx: &RunContext, sink: Sink) -> Result<PlanAdvance, PlanError> {
        if let Some(o) = &self.outcome {
            return Ok(PlanAdvance::Finished(o.clone()));
        }
        if !self.planned {
            self.plan(env, ctx, sink)?;
            return Ok(PlanAdvance::Planned);
        }
        if self.current.is_none() {
            self.start_next(ctx, sink)?;
        }
        let k = self.done.len();
        let mut config = ctx.config.clone();
        if k + 1 < self.tasks.len() {
            config.judge_with_predicate = false;
        }
        let task_ctx = RunContext { config: &config, instruction: Some(&self.instruction), ..*ctx };
        let run = self.current.as_mut().expect("task started");
        let step = run.advance(env, &task_ctx, sink)?;
        Ok(match step {
            Advance::Continue => PlanAdvance::Continue,
            Advance::Reflecting => PlanAdvance::Reflecting,
            Advance::AwaitingUser(q) => PlanAdvance::AwaitingUser(q),
            Advance::Finished(outcome) => {
                let trajectory = self.current.take().expect("task started").into_trajectory();
                self.done.push(trajectory);
                let last = k + 1 == self.tasks.len();
                if !outcome.is_success() {
                    let reason = if self.tasks.len() > 1 {
                        format!("task {k} failed: {}", outcome.reason)
                    } else {
                        outcome.reason.clone()
                    };
                    return Ok(self.finish(EnvOutcome::failure(reason), sink));
                }
                if last {
                    return Ok(self.finish(outcome, sink));
                }
                env.reopen();
                if self.config.memory_transfer {
                    let next = self.tasks[k + 1].text.clone();
                    let memory = Self::warn(extract_memory(&self.done[k], k, Some(&next), ctx.gateway)?, sink);
                    sink(RunEvent::Memory { task_index: k, memory: memory.clone() });
                    self.memories.push(memory);
                }
                PlanAdvance::TaskFinished(k, outcome)
            }
        })
    }

    pub fn answer(&mut self, answer: &str, env: &mut Environment, sink: Sink) -> Result<QaPair, PlanError> {
        let run = self.current.as_mut().ok_or(ExecError::NoPendingQuestion)?;
        Ok(run.answer(answer, env, sink)?)
    }

    pub fn cancel(&mut self, env: &mut Environment, sink: Sink) -> EnvOutcome {
        if let Some(o) = &self.outcome {
            return o.clone();
        }
        if let Some(mut run) = self.current.take() {
            run.cancel(env, sink);
            self.done.push(run.into_trajectory());
        }
        match self.finish(EnvOutcome::failure(crate::executor::CANCELLED_REASON), sink) {
            PlanAdvance::Finished(o) => o,
            _ => unreachable!(),
        }
    }

    /// Runs to the end, answering questions through `user`.
    pub fn run_to_end(
        &mut self,
        env: &mut Environment,
        ctx: &RunContext,
        sink: Sink,
        user: &mut dyn FnMut(&str) -> Option<String>,
    ) -> Result<EnvOutcome, PlanError> {
        loop {
            match self.advance(env, ctx, sink)? {
                PlanAdvance::Finished(o) => return Ok(o),
                PlanAdvance::AwaitingUser(q) => match user(&q) {
                    Some(a) => {
                        self.answer(&a, env, sink)?;
                    }
                    None => {
                        let o = self.cancel(env, sink);
                        return Ok(o);
                    }
                },
                _ => {}
            }
        }
    }
}
