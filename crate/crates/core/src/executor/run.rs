use crate::action::{parse_response, Action, ModelResponse, ParseFailure, TerminateStatus};
use crate::ask::{assess_scenario, QaPair};
use crate::events::{RunEvent, Sink};
use crate::gateway::{Backend, Judged};
use crate::knowledge::{KnowledgeDoc, KnowledgeStore, RetrievalScope};
use crate::reflection::{reflect_action, reflect_global, reflect_trajectory, Cadence, FeedbackBoard, ReflectionVerdict};
use crate::sim::{EnvOutcome, Environment, ScreenSnapshot};

use super::{
    build_prompt, ExecError, ExecutorConfig, HistorySummary, Origin, StepError, StepRecord, Trajectory,
    CANCELLED_REASON, GLOBAL_BUDGET_REASON, MAX_STEPS_REASON,
};

/// Shared collaborators for a run.
#[derive(Clone, Copy)]
pub struct RunContext<'a> {
    pub gateway: &'a dyn Backend,
    pub knowledge: Option<&'a KnowledgeStore>,
    pub config: &'a ExecutorConfig,
    /// The user's whole instruction, for instruction-scoped retrieval.
    pub instruction: Option<&'a str>,
}

impl<'a> RunContext<'a> {
    pub fn new(gateway: &'a dyn Backend, config: &'a ExecutorConfig) -> Self {
        Self { gateway, knowledge: None, config, instruction: None }
    }

    pub fn with_knowledge(mut self, store: &'a KnowledgeStore) -> Self {
        self.knowledge = Some(store);
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Advance {
    Continue,
    /// The agent terminated and the global reflector reviews next.
    Reflecting,
    AwaitingUser(String),
    Finished(EnvOutcome),
}

/// One atomic task in progress. Each [`advance`](TaskRun::advance) call
/// performs at most one step, so callers can pause between steps.
#[derive(Debug, Clone)]
pub struct TaskRun {
    task_index: usize,
    trajectory: Trajectory,
    history: HistorySummary,
    board: FeedbackBoard,
    notices: Vec<String>,
    qa: Vec<QaPair>,
    cadence: Option<Cadence>,
    asks: usize,
    resumes: u32,
    pending_question: Option<(usize, String)>,
    pending_global: bool,
    finished: bool,
}

const FORMAT_REPROMPT: &str = "## Format error\nYour previous reply could not be parsed";

impl TaskRun {
    pub fn start(
        task_index: usize,
        id: impl Into<String>,
        instruction: impl Into<String>,
        origin: Option<Origin>,
        config: &ExecutorConfig,
        sink: Sink,
    ) -> Result<Self, ExecError> {
        config.validate()?;
        let mut trajectory = Trajectory::new(id, instruction);
        trajectory.origin = origin;
        sink(RunEvent::TaskStarted {
            task_index,
            trajectory_id: trajectory.id.clone(),
            instruction: trajectory.instruction.clone(),
            origin: trajectory.origin.clone(),
        });
        let cadence = config.trajectory_window.map(Cadence::new).transpose().map_err(|e| ExecError::Config(e.to_string()))?;
        Ok(Self {
            task_index,
            trajectory,
            history: HistorySummary::default(),
            board: FeedbackBoard::default(),
            notices: Vec::new(),
            qa: Vec::new(),
            cadence,
            asks: 0,
            resumes: 0,
            pending_question: None,
            pending_global: false,
            finished: false,
        })
    }

    /// Seeds answers the user gave earlier in the same session.
    pub fn with_qa(mut self, qa: Vec<QaPair>) -> Self {
        self.qa = qa;
        self
    }

    pub fn task_index(&self) -> usize {
        self.task_index
    }

    pub fn trajectory(&self) -> &Trajectory {
        &self.trajectory
    }

    pub fn into_trajectory(self) -> Trajectory {
        self.trajectory
    }

    pub fn qa(&self) -> &[QaPair] {
        &self.qa
    }

    pub fn history(&self) -> &HistorySummary {
        &self.history
    }

    pub fn pending_question(&self) -> Option<&str> {
        self.pending_question.as_ref().map(|(_, q)| q.as_str())
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    pub fn feedback(&self) -> Vec<String> {
        let mut lines = self.board.lines();
        lines.extend(self.notices.iter().cloned());
        lines
    }

    /// Records the user's answer to the pending question.
    pub fn answer(&mut self, answer: &str, env: &mut Environment, sink: Sink) -> Result<QaPair, ExecError> {
        let (step, question) = self.pending_question.take().ok_or(ExecError::NoPendingQuestion)?;
        let qa = QaPair { question, answer: answer.to_string(), step_index: step };
        self.trajectory.steps[step].qa = Some(qa.clone());
        self.qa.push(qa.clone());
        env.clear_pending_question();
        sink(RunEvent::Answer { task_index: self.task_index, step, qa: qa.clone() });
        Ok(qa)
    }

    pub fn cancel(&mut self, env: &mut Environment, sink: Sink) -> EnvOutcome {
        if self.finished {
            return self.trajectory.outcome.clone();
        }
        self.pending_question = None;
        env.clear_pending_question();
        self.finish(EnvOutcome::failure(CANCELLED_REASON), sink)
    }

    fn finish(&mut self, outcome: EnvOutcome, sink: Sink) -> EnvOutcome {
        self.trajectory.outcome = outcome.clone();
        self.finished = true;
        sink(RunEvent::TaskFinished {
            task_index: self.task_index,
            trajectory_id: self.trajectory.id.clone(),
            outcome: outcome.clone(),
        });
        outcome
    }

    fn warn<T>(&self, judged: Judged<T>, sink: Sink) -> T {
        if let Some(w) = judged.warning {
            sink(RunEvent::Warning { message: format!("task {}: {w}", self.task_index) });
        }
        judged.value
    }

    fn knowledge(&mut self, ctx: &RunContext, sink: Sink) -> Vec<KnowledgeDoc> {
        let Some(store) = ctx.knowledge else { return Vec::new() };
        let query = match ctx.config.retrieval_scope {
            RetrievalScope::AtomicTask => self.trajectory.instruction.as_str(),
            RetrievalScope::Instruction => ctx.instruction.unwrap_or(&self.trajectory.instruction),
        };
        let docs: Vec<KnowledgeDoc> = store.retrieve(query, ctx.config.knowledge_k).into_iter().map(|r| r.doc).collect();
        let fresh: Vec<String> =
            docs.iter().map(|d| d.id.clone()).filter(|id| !self.trajectory.knowledge_used.contains(id)).collect();
        if !fresh.is_empty() {
            self.trajectory.knowledge_used.extend(fresh.iter().cloned());
            sink(RunEvent::Knowledge { task_index: self.task_index, ids: fresh });
        }
        docs
    }

    fn outcome_for(&self, env: &Environment, ctx: &RunContext, status: TerminateStatus) -> EnvOutcome {
        if ctx.config.judge_with_predicate {
            return env.outcome().clone();
        }
        match status {
            TerminateStatus::Success => EnvOutcome::success("agent reported success"),
            TerminateStatus::Failure => EnvOutcome::failure("agent reported failure"),
        }
    }

    fn emit_step(&self, sink: Sink) {
        let record = self.trajectory.steps.last().expect("a step was recorded").clone();
        sink(RunEvent::Step { task_index: self.task_index, record: Box::new(record) });
    }

    fn attach(&mut self, verdict: ReflectionVerdict, sink: Sink) {
        self.board.update(&verdict);
        sink(RunEvent::Reflection { task_index: self.task_index, verdict: verdict.clone() });
        self.trajectory.steps.last_mut().expect("a step was recorded").reflections.push(verdict);
    }

    /// Performs at most one step.
    pub fn advance(&mut self, env: &mut Environment, ctx: &RunContext, sink: Sink) -> Result<Advance, ExecError> {
        if self.finished {
            return Ok(Advance::Finished(self.trajectory.outcome.clone()));
        }
        if let Some((_, q)) = &self.pending_question {
            return Ok(Advance::AwaitingUser(q.clone()));
        }
        if self.pending_global {
            return self.global_review(env, ctx, sink);
        }
        if self.trajectory.steps.len() >= ctx.config.max_steps {
            let reason = format!("{MAX_STEPS_REASON}: {} steps", ctx.config.max_steps);
            return Ok(Advance::Finished(self.finish(EnvOutcome::failure(reason), sink)));
        }

        let before = env.snapshot();
        let index = self.trajectory.steps.len();
        let docs = self.knowledge(ctx, sink);
        let instruction = self.trajectory.instruction.clone();

        let mut trust = None;
        if ctx.config.ask && self.asks < ctx.config.ask_cap {
            let ambiguities = env.task().map(|t| t.ambiguities.clone()).unwrap_or_default();
            let judged = assess_scenario(&instruction, &before, &self.history.entries, &self.qa, &ambiguities, ctx.gateway);
            let decision = self.warn(judged, sink);
            if let (false, Some(question)) = (decision.trustworthy, decision.proposed_question.clone()) {
                let ask = Action::ask(&question);
                env.step(&ask)?;
                self.trajectory.steps.push(StepRecord {
                    index,
                    snapshot_before: before.clone(),
                    response: None,
                    raw_response: None,
                    action: Some(ask),
                    error: None,
                    snapshot_after: before,
                    outcome: env.outcome().clone(),
                    reflections: Vec::new(),
                    qa: None,
                    trust: Some(decision),
                });
                self.asks += 1;
                self.pending_question = Some((index, question.clone()));
                self.emit_step(sink);
                sink(RunEvent::Ask { task_index: self.task_index, step: index, question: question.clone() });
                return Ok(Advance::AwaitingUser(question));
            }
            trust = Some(decision);
        }

        let feedback = self.feedback();
        let bundle = build_prompt(&instruction, &self.history, &before, &docs, &feedback, &self.qa)
            .temperature(ctx.config.temperature)
            .meta("task_index", self.task_index.to_string());
        self.notices.clear();
        let parsed = match self.query(ctx, &bundle)? {
            Ok(r) => Ok(r),
            Err((failure, _)) => {
                let retry = bundle.clone().text(format!(
                    "{FORMAT_REPROMPT} ({failure}). Reply again with <thinking>, <summary> and <action> blocks."
                ));
                self.query(ctx, &retry)?
            }
        };

        let mut record = StepRecord {
            index,
            snapshot_before: before.clone(),
            response: None,
            raw_response: None,
            action: None,
            error: None,
            snapshot_after: before.clone(),
            outcome: env.outcome().clone(),
            reflections: Vec::new(),
            qa: None,
            trust,
        };
        let mut terminated = None;
        match parsed {
            Err((failure, raw)) => {
                record.raw_response = Some(raw);
                record.error = Some(StepError::Parse(failure.to_string()));
            }
            Ok(response) if matches!(response.action, Action::Ask { .. }) => {
                record.action = Some(response.action.clone());
                record.response = Some(response);
                record.error = Some(StepError::Rejected("ask actions come only from the trust check".into()));
                self.notices.push(
                    "Your ask action was not sent; clarifying questions are raised separately. Choose a screen action."
                        .into(),
                );
            }
            Ok(response) => {
                let action = response.action.clone();
                match env.step(&action) {
                    Ok((after, outcome)) => {
                        record.snapshot_after = after;
                        record.outcome = outcome;
                        if let Action::Terminate { status } = action {
                            terminated = Some(status);
                        }
                    }
                    Err(e) => {
                        record.snapshot_after = env.snapshot();
                        record.outcome = env.outcome().clone();
                        record.error = Some(StepError::Env(e));
                    }
                }
                self.history.push(response.action_summary.clone());
                record.action = Some(action);
                record.response = Some(response);
            }
        }
        self.trajectory.steps.push(record);

        let last = self.trajectory.steps.last().expect("just pushed");
        if ctx.config.action_reflection && last.executed() && terminated.is_none() {
            let judged = reflect_action(last, &instruction, ctx.gateway);
            let verdict = self.warn(judged, sink);
            self.attach(verdict, sink);
        }
        if let Some(cadence) = self.cadence.as_mut() {
            if let Some(window) = cadence.observe(&self.trajectory.steps).map(<[StepRecord]>::to_vec) {
                let judged = reflect_trajectory(&window, &instruction, ctx.gateway);
                let verdict = self.warn(judged, sink);
                self.attach(verdict, sink);
            }
        }

        match terminated {
            Some(_) if ctx.config.global_reflection => {
                self.pending_global = true;
                Ok(Advance::Reflecting)
            }
            Some(status) => {
                self.emit_step(sink);
                let outcome = self.outcome_for(env, ctx, status);
                Ok(Advance::Finished(self.finish(outcome, sink)))
            }
            None => {
                self.emit_step(sink);
                Ok(Advance::Continue)
            }
        }
    }

    /// Asks the policy once; the inner error carries the parse failure and
    /// the raw reply.
    #[allow(clippy::type_complexity)]
    fn query(
        &self,
        ctx: &RunContext,
        bundle: &crate::gateway::PromptBundle,
    ) -> Result<Result<ModelResponse, (ParseFailure, String)>, ExecError> {
        let raw = ctx.gateway.complete(bundle).map_err(|error| ExecError::Backend {
            error,
            trajectory: Box::new(self.trajectory.clone()),
        })?;
        Ok(parse_response(&raw).map_err(|f| (f, raw)))
    }

    fn global_review(&mut self, env: &mut Environment, ctx: &RunContext, sink: Sink) -> Result<Advance, ExecError> {
        self.pending_global = false;
        let final_screen: ScreenSnapshot = env.snapshot();
        let judged = reflect_global(&self.trajectory.steps, &self.trajectory.instruction, &final_screen, ctx.gateway);
        let verdict = self.warn(judged, sink);
        let ok = verdict.ok;
        self.attach(verdict, sink);
        self.emit_step(sink);
        let status = match self.trajectory.steps.last().and_then(|s| s.action.as_ref()) {
            Some(Action::Terminate { status }) => *status,
            _ => TerminateStatus::Failure,
        };
        if ok {
            let outcome = self.outcome_for(env, ctx, status);
            return Ok(Advance::Finished(self.finish(outcome, sink)));
        }
        if self.resumes < ctx.config.resume_budget {
            self.resumes += 1;
            env.reopen();
            return Ok(Advance::Continue);
        }
        Ok(Advance::Finished(self.finish(EnvOutcome::failure(GLOBAL_BUDGET_REASON), sink)))
    }

    /// Drives the run to its end, answering questions through `user`. A
    /// `None` answer ends the run as a failure.
    pub fn run_to_end(
        &mut self,
        env: &mut Environment,
        ctx: &RunContext,
        sink: Sink,
        user: &mut dyn FnMut(&str) -> Option<String>,
    ) -> Result<EnvOutcome, ExecError> {
        loop {
            match self.advance(env, ctx, sink)? {
                Advance::Continue | Advance::Reflecting => {}
                Advance::AwaitingUser(q) => match user(&q) {
                    Some(a) => {
                        self.answer(&a, env, sink)?;
                    }
                    None => {
                        self.pending_question = None;
                        env.clear_pending_question();
                        return Ok(self.finish(EnvOutcome::failure("question left unanswered"), sink));
                    }
                },
                Advance::Finished(o) => return Ok(o),
            }
        }
    }
}

/// Runs one task on a freshly reset environment without asking anyone.
pub fn run_task(
    instruction: &str,
    env: &mut Environment,
    ctx: &RunContext,
) -> Result<Trajectory, ExecError> {
    let mut sink = |_e: RunEvent| {};
    let mut run = TaskRun::start(0, "run", instruction, None, ctx.config, &mut sink)?;
    run.run_to_end(env, ctx, &mut sink, &mut |_| None)?;
    Ok(run.into_trajectory())
}
