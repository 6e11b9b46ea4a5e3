//! Live sessions. Each session's step loop runs on its own thread and is the
//! only writer of the session's state; API calls leave requests in the
//! session's control block and wait for the loop to act on them at the next
//! step boundary.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tokio::sync::broadcast;

use gui_agent::ask::QaPair;
use gui_agent::events::{replay_trajectories, RunEvent, SessionStatus};
use gui_agent::executor::{ExecutorConfig, Origin, RunContext, Trajectory, CANCELLED_REASON};
use gui_agent::gateway::Backend;
use gui_agent::knowledge::KnowledgeStore;
use gui_agent::orchestration::{AtomicTask, PlanAdvance, PlanConfig, PlanRun};
use gui_agent::sim::{EnvOutcome, Environment};

use crate::catalog::Catalog;
use crate::config::RuntimeConfig;
use crate::store::{IndexEntry, SessionStore, StoreError};

/// How long an API call waits for the step loop to act on a request.
pub const ACK_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSession {
    pub session_id: String,
    pub instruction: String,
    pub scenario: String,
    pub task: String,
    pub seed: u64,
    pub status: SessionStatus,
    pub plan: Vec<AtomicTask>,
    /// Step records emitted so far, across all atomic tasks.
    pub steps: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pending_question: Option<String>,
    #[serde(default)]
    pub qa: Vec<QaPair>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outcome: Option<EnvOutcome>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Unix milliseconds.
    pub created_at: u64,
    pub updated_at: u64,
    pub last_seq: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeqEvent {
    pub seq: u64,
    pub event: RunEvent,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateRequest {
    pub scenario: String,
    pub task: String,
    /// Defaults to the task's own instruction.
    #[serde(default)]
    pub instruction: Option<String>,
    #[serde(default)]
    pub seed: u64,
    /// Script file name inside the configured scripts directory.
    #[serde(default)]
    pub script: Option<String>,
    /// Field overrides merged onto the service's executor settings.
    #[serde(default)]
    pub executor: Option<serde_json::Value>,
    #[serde(default)]
    pub plan: Option<serde_json::Value>,
    /// Pause before the first executor step.
    #[serde(default)]
    pub start_paused: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Pause,
    Resume,
    Cancel,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SessionError {
    #[error("unknown scenario {0:?}")]
    UnknownScenario(String),
    #[error("unknown task {0:?}")]
    UnknownTask(String),
    #[error("unknown session {0:?}")]
    UnknownSession(String),
    #[error("invalid request: {0}")]
    Validation(String),
    #[error("no question is pending")]
    NoPendingQuestion,
    #[error("cannot {command:?} a session that is {from}")]
    InvalidTransition { from: SessionStatus, command: Command },
    #[error("session {0} was restored from disk and has no live run")]
    Detached(String),
    #[error("storage error: {0}")]
    Store(String),
}

impl From<StoreError> for SessionError {
    fn from(e: StoreError) -> Self {
        Self::Store(e.to_string())
    }
}

pub fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

#[derive(Debug, Default)]
struct Control {
    pause: bool,
    cancel: bool,
    answer: Option<String>,
}

struct Inner {
    record: RunSession,
    events: Vec<SeqEvent>,
    control: Control,
}

/// The session index, rewritten whenever a status changes.
struct Index {
    entries: Mutex<BTreeMap<String, IndexEntry>>,
    store: SessionStore,
}

impl Index {
    fn update(&self, record: &RunSession) {
        let mut e = self.entries.lock().expect("index lock");
        e.insert(
            record.session_id.clone(),
            IndexEntry { session_id: record.session_id.clone(), status: record.status, created_at: record.created_at },
        );
        let list: Vec<IndexEntry> = e.values().cloned().collect();
        if let Err(err) = self.store.write_index(&list) {
            tracing::error!(%err, "cannot write session index");
        }
    }
}

pub struct Shared {
    inner: Mutex<Inner>,
    cond: Condvar,
    tx: broadcast::Sender<SeqEvent>,
    store: SessionStore,
    index: Arc<Index>,
    detached: bool,
}

enum Move {
    Step,
    Answer(String),
    Cancel,
}

fn apply(record: &mut RunSession, event: &RunEvent) {
    match event {
        RunEvent::Status { status } => {
            record.status = *status;
            if *status != SessionStatus::AwaitingUser {
                record.pending_question = None;
            }
        }
        RunEvent::Plan { tasks, .. } => record.plan = tasks.clone(),
        RunEvent::Rewrite { task_index, task } => {
            if let Some(t) = record.plan.get_mut(*task_index) {
                *t = task.clone();
            }
        }
        RunEvent::Step { .. } => record.steps += 1,
        RunEvent::Answer { qa, .. } => record.qa.push(qa.clone()),
        RunEvent::Finished { outcome } => record.outcome = Some(outcome.clone()),
        _ => {}
    }
}

impl Shared {
    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().expect("session lock")
    }

    fn publish_locked(&self, g: &mut Inner, event: RunEvent) {
        let seq = g.record.last_seq + 1;
        g.record.last_seq = seq;
        apply(&mut g.record, &event);
        g.record.updated_at = now_ms();
        let se = SeqEvent { seq, event };
        if let Err(e) = self.store.append_event(&g.record.session_id, &se) {
            tracing::error!(%e, "cannot append event");
        }
        if let Err(e) = self.store.write_session(&g.record) {
            tracing::error!(%e, "cannot write session");
        }
        g.events.push(se.clone());
        let _ = self.tx.send(se);
        self.cond.notify_all();
    }

    fn publish(&self, event: RunEvent) {
        let mut g = self.lock();
        self.publish_locked(&mut g, event);
    }

    fn set_status_locked(&self, g: &mut Inner, to: SessionStatus, question: Option<String>) {
        let from = g.record.status;
        if from == to {
            return;
        }
        if !from.can_transition(to) {
            tracing::error!(session = %g.record.session_id, %from, %to, "undeclared status transition skipped");
            return;
        }
        g.record.pending_question = question;
        self.publish_locked(g, RunEvent::Status { status: to });
        self.index.update(&g.record);
    }

    fn set_status(&self, to: SessionStatus, question: Option<String>) {
        let mut g = self.lock();
        self.set_status_locked(&mut g, to, question);
    }

    pub fn status(&self) -> SessionStatus {
        self.lock().record.status
    }

    pub fn record(&self) -> RunSession {
        self.lock().record.clone()
    }

    pub fn is_detached(&self) -> bool {
        self.detached
    }

    pub fn events_after(&self, after: u64) -> Vec<SeqEvent> {
        self.lock().events.iter().filter(|e| e.seq > after).cloned().collect()
    }

    /// Subscribes first, then reads the backlog, so no event falls between.
    pub fn subscribe_after(&self, after: u64) -> (Vec<SeqEvent>, broadcast::Receiver<SeqEvent>, bool) {
        let g = self.lock();
        let rx = self.tx.subscribe();
        let backlog = g.events.iter().filter(|e| e.seq > after).cloned().collect();
        (backlog, rx, g.record.status.is_terminal() || self.detached)
    }

    /// Trajectories rebuilt from the event log.
    pub fn trajectories(&self) -> Vec<Trajectory> {
        let g = self.lock();
        replay_trajectories(g.events.iter().map(|e| &e.event))
    }

    /// Waits until `done` holds or the timeout passes, returning the record
    /// either way.
    pub fn wait_for(&self, timeout: Duration, done: impl Fn(&RunSession) -> bool) -> RunSession {
        let deadline = Instant::now() + timeout;
        let mut g = self.lock();
        while !done(&g.record) {
            let left = deadline.saturating_duration_since(Instant::now());
            if left.is_zero() {
                break;
            }
            g = self.cond.wait_timeout(g, left).expect("session lock").0;
        }
        g.record.clone()
    }

    fn next_move(&self) -> Move {
        let mut g = self.lock();
        loop {
            if g.control.cancel {
                return Move::Cancel;
            }
            match g.record.status {
                SessionStatus::AwaitingUser => {
                    if let Some(a) = g.control.answer.take() {
                        return Move::Answer(a);
                    }
                }
                SessionStatus::Paused => {
                    if !g.control.pause {
                        self.set_status_locked(&mut g, SessionStatus::Running, None);
                        return Move::Step;
                    }
                }
                SessionStatus::Running if g.control.pause => {
                    self.set_status_locked(&mut g, SessionStatus::Paused, None);
                    continue;
                }
                _ => return Move::Step,
            }
            g = self.cond.wait(g).expect("session lock");
        }
    }

    pub fn post_answer(&self, answer: &str) -> Result<RunSession, SessionError> {
        let answer = answer.trim();
        if answer.is_empty() {
            return Err(SessionError::Validation("answer is empty".into()));
        }
        let mut g = self.lock();
        if g.record.status != SessionStatus::AwaitingUser {
            // A repeated post of the answer that was just recorded is a no-op.
            return match g.record.qa.last() {
                Some(q) if q.answer == answer => Ok(g.record.clone()),
                _ => Err(SessionError::NoPendingQuestion),
            };
        }
        if self.detached {
            return Err(SessionError::Detached(g.record.session_id.clone()));
        }
        match &g.control.answer {
            Some(p) if p != answer => return Err(SessionError::NoPendingQuestion),
            Some(_) => {}
            None => g.control.answer = Some(answer.to_string()),
        }
        let before = g.record.qa.len();
        let question = g.record.pending_question.clone();
        self.cond.notify_all();
        drop(g);
        Ok(self.wait_for(ACK_TIMEOUT, |r| {
            r.status.is_terminal()
                || (r.qa.len() > before && (r.status != SessionStatus::AwaitingUser || r.pending_question != question))
        }))
    }

    pub fn control(&self, command: Command) -> Result<RunSession, SessionError> {
        use SessionStatus::*;
        let mut g = self.lock();
        let from = g.record.status;
        let invalid = Err(SessionError::InvalidTransition { from, command });
        match command {
            Command::Pause => {
                if !matches!(from, Planning | Running | Reflecting) || self.detached {
                    return invalid;
                }
                g.control.pause = true;
                self.cond.notify_all();
                drop(g);
                Ok(self.wait_for(ACK_TIMEOUT, |r| matches!(r.status, Paused | AwaitingUser) || r.status.is_terminal()))
            }
            Command::Resume => {
                if from == Paused {
                    g.control.pause = false;
                    self.cond.notify_all();
                    drop(g);
                    return Ok(self.wait_for(ACK_TIMEOUT, |r| r.status != Paused));
                }
                if g.control.pause && !from.is_terminal() {
                    g.control.pause = false;
                    return Ok(g.record.clone());
                }
                invalid
            }
            Command::Cancel => {
                if from.is_terminal() {
                    return invalid;
                }
                if self.detached {
                    self.publish_locked(&mut g, RunEvent::Finished { outcome: EnvOutcome::failure(CANCELLED_REASON) });
                    self.set_status_locked(&mut g, DoneFailure, None);
                    return Ok(g.record.clone());
                }
                g.control.cancel = true;
                self.cond.notify_all();
                drop(g);
                Ok(self.wait_for(ACK_TIMEOUT, |r| r.status.is_terminal()))
            }
        }
    }
}

/// The step loop for one session.
fn drive(
    shared: Arc<Shared>,
    mut env: Environment,
    mut plan: PlanRun,
    gateway: Arc<dyn Backend>,
    knowledge: Arc<KnowledgeStore>,
    config: ExecutorConfig,
) {
    use SessionStatus::*;
    let ctx = RunContext::new(gateway.as_ref(), &config).with_knowledge(&knowledge);
    let sink_shared = Arc::clone(&shared);
    let mut sink = move |e: RunEvent| sink_shared.publish(e);
    let finish = |plan: &PlanRun, to: SessionStatus| {
        let id = shared.lock().record.session_id.clone();
        if let Err(e) = shared.store.write_trajectories(&id, &plan.trajectories()) {
            tracing::error!(%e, "cannot write trajectories");
        }
        shared.set_status(to, None);
    };
    loop {
        match shared.next_move() {
            Move::Cancel => {
                plan.cancel(&mut env, &mut sink);
                finish(&plan, DoneFailure);
                return;
            }
            Move::Answer(a) => {
                if let Err(e) = plan.answer(&a, &mut env, &mut sink) {
                    tracing::warn!(%e, "answer not applied");
                }
                shared.set_status(Running, None);
            }
            Move::Step => {
                let step = plan.advance(&mut env, &ctx, &mut sink);
                let status = shared.status();
                match step {
                    Ok(PlanAdvance::Planned) => shared.set_status(Running, None),
                    Ok(PlanAdvance::Continue | PlanAdvance::TaskFinished(..)) => {
                        if status == Reflecting {
                            shared.set_status(Running, None);
                        }
                    }
                    Ok(PlanAdvance::Reflecting) => shared.set_status(Reflecting, None),
                    Ok(PlanAdvance::AwaitingUser(q)) => {
                        if status == Reflecting {
                            shared.set_status(Running, None);
                        }
                        shared.set_status(AwaitingUser, Some(q));
                    }
                    Ok(PlanAdvance::Finished(o)) => {
                        if o.is_success() {
                            if status != Reflecting {
                                shared.set_status(Reflecting, None);
                            }
                            finish(&plan, DoneSuccess);
                        } else {
                            finish(&plan, DoneFailure);
                        }
                        return;
                    }
                    Err(e) => {
                        let message = e.to_string();
                        sink(RunEvent::Warning { message: message.clone() });
                        sink(RunEvent::Finished { outcome: EnvOutcome::failure(message.clone()) });
                        shared.lock().record.error = Some(message);
                        finish(&plan, DoneFailure);
                        return;
                    }
                }
            }
        }
    }
}

fn merge<T: Serialize + DeserializeOwned>(base: &T, over: Option<serde_json::Value>, what: &str) -> Result<T, SessionError> {
    let Some(over) = over else {
        return serde_json::from_value(serde_json::to_value(base).expect("settings serialize"))
            .map_err(|e| SessionError::Validation(e.to_string()));
    };
    let serde_json::Value::Object(fields) = over else {
        return Err(SessionError::Validation(format!("{what} overrides must be an object")));
    };
    let mut value = serde_json::to_value(base).expect("settings serialize");
    let obj = value.as_object_mut().expect("settings are objects");
    for (k, v) in fields {
        obj.insert(k, v);
    }
    serde_json::from_value(value).map_err(|e| SessionError::Validation(format!("{what}: {e}")))
}

pub type GatewayFactory = Arc<dyn Fn(Option<&Path>) -> Result<Arc<dyn Backend>, String> + Send + Sync>;

/// Every session the service knows about, live or restored.
pub struct SessionManager {
    config: RuntimeConfig,
    catalog: Catalog,
    knowledge: Arc<KnowledgeStore>,
    store: SessionStore,
    index: Arc<Index>,
    sessions: Mutex<BTreeMap<String, Arc<Shared>>>,
    next_id: Mutex<u64>,
    gateways: GatewayFactory,
}

impl SessionManager {
    /// Opens the store and restores every persisted session. Sessions that
    /// were mid-run when the service stopped are closed as interrupted;
    /// finished and waiting sessions come back unchanged but detached.
    pub fn open(
        config: RuntimeConfig,
        catalog: Catalog,
        knowledge: Arc<KnowledgeStore>,
        gateways: Option<GatewayFactory>,
    ) -> Result<Self, SessionError> {
        let store = SessionStore::new(&config.data_dir)?;
        let gateways = gateways.unwrap_or_else(|| {
            let cfg = config.clone();
            Arc::new(move |script: Option<&Path>| cfg.backend(script).map_err(|e| e.to_string()))
        });
        let index = Arc::new(Index { entries: Mutex::new(BTreeMap::new()), store: store.clone() });
        let mut sessions = BTreeMap::new();
        let mut next = 1;
        for entry in store.read_index()? {
            let record = store.read_session(&entry.session_id)?;
            let events = store.read_events(&entry.session_id)?;
            if let Some(n) = record.session_id.strip_prefix("s-").and_then(|n| n.parse::<u64>().ok()) {
                next = next.max(n + 1);
            }
            index.entries.lock().expect("index lock").insert(record.session_id.clone(), entry);
            let (tx, _) = broadcast::channel(1024);
            let shared = Arc::new(Shared {
                inner: Mutex::new(Inner { record, events, control: Control::default() }),
                cond: Condvar::new(),
                tx,
                store: store.clone(),
                index: Arc::clone(&index),
                detached: true,
            });
            let status = shared.status();
            if !status.is_terminal() && status != SessionStatus::AwaitingUser {
                let mut g = shared.lock();
                g.record.error = Some("interrupted by a service restart".into());
                shared.publish_locked(&mut g, RunEvent::Finished { outcome: EnvOutcome::failure("interrupted") });
                shared.set_status_locked(&mut g, SessionStatus::DoneFailure, None);
            }
            sessions.insert(shared.record().session_id.clone(), shared);
        }
        Ok(Self {
            config,
            catalog,
            knowledge,
            store,
            index,
            sessions: Mutex::new(sessions),
            next_id: Mutex::new(next),
            gateways,
        })
    }

    pub fn catalog(&self) -> &Catalog {
        &self.catalog
    }

    pub fn knowledge(&self) -> &Arc<KnowledgeStore> {
        &self.knowledge
    }

    pub fn config(&self) -> &RuntimeConfig {
        &self.config
    }

    pub fn store(&self) -> &SessionStore {
        &self.store
    }

    pub fn get(&self, id: &str) -> Result<Arc<Shared>, SessionError> {
        self.sessions.lock().expect("sessions lock").get(id).cloned().ok_or_else(|| SessionError::UnknownSession(id.into()))
    }

    pub fn list(&self) -> Vec<RunSession> {
        self.sessions.lock().expect("sessions lock").values().map(|s| s.record()).collect()
    }

    fn script_path(&self, name: &str) -> Result<PathBuf, SessionError> {
        let plain = !name.is_empty() && Path::new(name).file_name().is_some_and(|f| f == name);
        if !plain {
            return Err(SessionError::Validation(format!("script {name:?} must be a plain file name")));
        }
        let dir = self.config.scripts_dir.as_ref().ok_or_else(|| SessionError::Validation("no scripts directory configured".into()))?;
        let path = dir.join(name);
        if !path.is_file() {
            return Err(SessionError::Validation(format!("no script named {name:?}")));
        }
        Ok(path)
    }

    pub fn create(&self, req: CreateRequest) -> Result<RunSession, SessionError> {
        let scenario = self.catalog.get(&req.scenario).ok_or_else(|| SessionError::UnknownScenario(req.scenario.clone()))?;
        let task = scenario.task(&req.task).ok_or_else(|| SessionError::UnknownTask(req.task.clone()))?;
        let instruction = req.instruction.clone().unwrap_or_else(|| task.instruction.clone());
        if instruction.trim().is_empty() {
            return Err(SessionError::Validation("instruction is empty".into()));
        }
        let exec: ExecutorConfig = merge(&self.config.executor, req.executor.clone(), "executor")?;
        exec.validate().map_err(|e| SessionError::Validation(e.to_string()))?;
        let plan_cfg: PlanConfig = merge(&self.config.plan, req.plan.clone(), "plan")?;
        let script = req.script.as_deref().map(|s| self.script_path(s)).transpose()?;
        let gateway = (self.gateways)(script.as_deref()).map_err(SessionError::Validation)?;
        let mut env = Environment::new(Arc::clone(scenario));
        env.reset(&req.task, req.seed).map_err(|e| SessionError::Validation(e.to_string()))?;

        let id = {
            let mut n = self.next_id.lock().expect("id lock");
            let id = format!("s-{:04}", *n);
            *n += 1;
            id
        };
        let origin = Origin { scenario: scenario.name.clone(), task_id: req.task.clone(), seed: req.seed, start: None };
        let plan = PlanRun::new(instruction.clone(), id.clone(), plan_cfg).with_origin(origin);
        let now = now_ms();
        let record = RunSession {
            session_id: id.clone(),
            instruction,
            scenario: req.scenario.clone(),
            task: req.task.clone(),
            seed: req.seed,
            status: SessionStatus::Planning,
            plan: Vec::new(),
            steps: 0,
            pending_question: None,
            qa: Vec::new(),
            outcome: None,
            error: None,
            created_at: now,
            updated_at: now,
            last_seq: 0,
        };
        let (tx, _) = broadcast::channel(1024);
        let shared = Arc::new(Shared {
            inner: Mutex::new(Inner {
                record,
                events: Vec::new(),
                control: Control { pause: req.start_paused, ..Control::default() },
            }),
            cond: Condvar::new(),
            tx,
            store: self.store.clone(),
            index: Arc::clone(&self.index),
            detached: false,
        });
        shared.publish(RunEvent::Status { status: SessionStatus::Planning });
        self.index.update(&shared.record());
        let snapshot = shared.record();
        self.sessions.lock().expect("sessions lock").insert(id.clone(), Arc::clone(&shared));
        let knowledge = Arc::clone(&self.knowledge);
        std::thread::Builder::new()
            .name(format!("session-{id}"))
            .spawn(move || drive(shared, env, plan, gateway, knowledge, exec))
            .map_err(|e| SessionError::Store(e.to_string()))?;
        Ok(snapshot)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_merge_onto_settings() {
        let base = ExecutorConfig::default();
        let merged: ExecutorConfig = merge(&base, Some(serde_json::json!({"max_steps": 7})), "executor").unwrap();
        assert_eq!(merged.max_steps, 7);
        assert_eq!(merged.resume_budget, base.resume_budget);
        assert!(merge(&base, Some(serde_json::json!({"max_step": 7})), "executor").is_err());
        assert!(merge(&base, Some(serde_json::json!([1])), "executor").is_err());
        assert_eq!(merge(&base, None, "executor").unwrap(), base);
    }

    #[test]
    fn events_update_the_record() {
        let mut r = RunSession {
            session_id: "s-0001".into(),
            instruction: "x".into(),
            scenario: "a".into(),
            task: "b".into(),
            seed: 0,
            status: SessionStatus::Running,
            plan: vec![AtomicTask::new(0, "first")],
            steps: 0,
            pending_question: Some("q".into()),
            qa: vec![],
            outcome: None,
            error: None,
            created_at: 0,
            updated_at: 0,
            last_seq: 0,
        };
        let mut rewritten = AtomicTask::new(0, "first");
        rewritten.rewritten_text = Some("first, with facts".into());
        apply(&mut r, &RunEvent::Rewrite { task_index: 0, task: rewritten.clone() });
        assert_eq!(r.plan[0], rewritten);
        apply(&mut r, &RunEvent::Status { status: SessionStatus::Reflecting });
        assert!(r.pending_question.is_none());
        apply(&mut r, &RunEvent::Finished { outcome: EnvOutcome::failure("cancelled") });
        assert_eq!(r.outcome.unwrap().reason, "cancelled");
    }
}
