use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::predicate::StateValue;
use super::scenario::{BBox, Scenario, ScreenDef, ScreenRef, SwipeDirection, TaskDef, Transition, Trigger, WidgetKind};
use crate::action::{Action, SystemButton};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Widget {
    pub id: String,
    pub kind: WidgetKind,
    pub text: String,
    pub bbox: BBox,
    #[serde(default)]
    pub state: BTreeMap<String, String>,
}

/// Immutable observation of the current screen.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ScreenSnapshot {
    pub app: String,
    pub screen_id: String,
    pub widgets: Vec<Widget>,
    pub screen_width: u32,
    pub screen_height: u32,
    pub step_index: u64,
}

impl ScreenSnapshot {
    pub fn screen_ref(&self) -> ScreenRef {
        ScreenRef::new(&self.app, &self.screen_id)
    }

    /// Topmost widget whose box contains the point; later widgets draw on top.
    pub fn hit(&self, x: u32, y: u32) -> Option<&Widget> {
        self.widgets.iter().rev().find(|w| w.bbox.contains(x, y))
    }

    pub fn widget(&self, id: &str) -> Option<&Widget> {
        self.widgets.iter().find(|w| w.id == id)
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("snapshot serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    /// Same screen content, ignoring the step counter.
    pub fn same_view(&self, other: &ScreenSnapshot) -> bool {
        self.app == other.app && self.screen_id == other.screen_id && self.widgets == other.widgets
    }

    /// TOML rendering used in prompts.
    pub fn to_text(&self) -> String {
        toml::to_string(self).unwrap_or_else(|_| serde_json::to_string_pretty(self).unwrap_or_default())
    }

    pub fn visible_text(&self) -> Vec<&str> {
        self.widgets.iter().map(|w| w.text.as_str()).filter(|t| !t.is_empty()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeStatus {
    Ongoing,
    Success,
    Failure,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvOutcome {
    pub status: OutcomeStatus,
    pub reason: String,
}

impl EnvOutcome {
    pub fn ongoing() -> Self {
        Self { status: OutcomeStatus::Ongoing, reason: String::new() }
    }

    pub fn success(reason: impl Into<String>) -> Self {
        Self { status: OutcomeStatus::Success, reason: reason.into() }
    }

    pub fn failure(reason: impl Into<String>) -> Self {
        Self { status: OutcomeStatus::Failure, reason: reason.into() }
    }

    pub fn is_terminal(&self) -> bool {
        self.status != OutcomeStatus::Ongoing
    }

    pub fn is_success(&self) -> bool {
        self.status == OutcomeStatus::Success
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
pub enum EnvError {
    #[error("no text field has focus")]
    NoFocusedField,
    #[error("no app named {0:?}")]
    UnknownApp(String),
    #[error("environment is frozen after terminate")]
    Frozen,
    #[error("unknown task {0:?}")]
    UnknownTask(String),
    #[error("environment has not been reset for a task")]
    NotReset,
    #[error("unknown start screen {0}")]
    UnknownScreen(String),
}

impl EnvError {
    /// Stable short name, used in prompts and reports.
    pub fn code(&self) -> &'static str {
        match self {
            Self::NoFocusedField => "NoFocusedField",
            Self::UnknownApp(_) => "UnknownApp",
            Self::Frozen => "Frozen",
            Self::UnknownTask(_) => "UnknownTask",
            Self::NotReset => "NotReset",
            Self::UnknownScreen(_) => "UnknownScreen",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvErrorRecord {
    pub step_index: u64,
    pub error: EnvError,
}

/// A single-owner simulated device.
#[derive(Debug, Clone)]
pub struct Environment {
    scenario: Arc<Scenario>,
    task: Option<usize>,
    state: BTreeMap<String, StateValue>,
    current: ScreenRef,
    pages: BTreeMap<ScreenRef, u32>,
    fields: BTreeMap<(ScreenRef, String), String>,
    toggles: BTreeMap<(ScreenRef, String), bool>,
    focus: Option<(ScreenRef, String)>,
    back_stack: Vec<ScreenRef>,
    step_index: u64,
    frozen: bool,
    pending_question: Option<String>,
    errors: Vec<EnvErrorRecord>,
    outcome: EnvOutcome,
}

impl Environment {
    pub fn new(scenario: Arc<Scenario>) -> Self {
        let home = scenario.home.clone();
        Self {
            state: scenario.initial_state.clone(),
            scenario,
            task: None,
            current: home,
            pages: BTreeMap::new(),
            fields: BTreeMap::new(),
            toggles: BTreeMap::new(),
            focus: None,
            back_stack: Vec::new(),
            step_index: 0,
            frozen: false,
            pending_question: None,
            errors: Vec::new(),
            outcome: EnvOutcome::ongoing(),
        }
    }

    pub fn scenario(&self) -> &Arc<Scenario> {
        &self.scenario
    }

    pub fn task(&self) -> Option<&TaskDef> {
        self.task.map(|i| &self.scenario.tasks[i])
    }

    pub fn state(&self) -> &BTreeMap<String, StateValue> {
        &self.state
    }

    pub fn step_index(&self) -> u64 {
        self.step_index
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn pending_question(&self) -> Option<&str> {
        self.pending_question.as_deref()
    }

    pub fn clear_pending_question(&mut self) {
        self.pending_question = None;
    }

    pub fn errors(&self) -> &[EnvErrorRecord] {
        &self.errors
    }

    pub fn outcome(&self) -> &EnvOutcome {
        &self.outcome
    }

    /// Restores the initial state with the task's reset list applied and
    /// returns the starting snapshot. The seed picks among the task's random
    /// starts when it declares any.
    pub fn reset(&mut self, task_id: &str, seed: u64) -> Result<ScreenSnapshot, EnvError> {
        self.reset_at(task_id, seed, None)
    }

    /// Like [`reset`](Self::reset) but with an explicit start screen.
    pub fn reset_at(&mut self, task_id: &str, seed: u64, start: Option<&ScreenRef>) -> Result<ScreenSnapshot, EnvError> {
        let idx = self
            .scenario
            .tasks
            .iter()
            .position(|t| t.id == task_id)
            .ok_or_else(|| EnvError::UnknownTask(task_id.to_string()))?;
        let task = &self.scenario.tasks[idx];
        let start = match start {
            Some(s) => {
                if self.scenario.screen(s).is_none() {
                    return Err(EnvError::UnknownScreen(s.to_string()));
                }
                s.clone()
            }
            None if !task.random_starts.is_empty() => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                task.random_starts[rng.random_range(0..task.random_starts.len())].clone()
            }
            None => task.start.clone().unwrap_or_else(|| self.scenario.home.clone()),
        };
        let mut state = self.scenario.initial_state.clone();
        state.extend(task.reset.clone());
        *self = Self::new(Arc::clone(&self.scenario));
        self.state = state;
        self.task = Some(idx);
        self.navigate_to(start, false);
        self.outcome = self.evaluate(false);
        Ok(self.snapshot())
    }

    pub fn snapshot(&self) -> ScreenSnapshot {
        let def = self.current_def();
        let page = self.page();
        let widgets = def
            .widgets
            .iter()
            .filter(|w| w.page.is_none_or(|p| p == page))
            .map(|w| {
                let key = (self.current.clone(), w.id.clone());
                let mut state = w.state.clone();
                let mut text = interpolate(&w.text, &self.state);
                match w.kind {
                    WidgetKind::TextField => {
                        let content = self.fields.get(&key).cloned().unwrap_or_default();
                        let focused = self.focus.as_ref() == Some(&key);
                        state.insert("focused".into(), focused.to_string());
                        if !content.is_empty() {
                            state.insert("hint".into(), text);
                            text = content;
                        }
                    }
                    WidgetKind::Toggle => {
                        state.insert("checked".into(), self.toggle_value(&key, w.bind.as_deref()).to_string());
                    }
                    _ => {}
                }
                Widget { id: w.id.clone(), kind: w.kind, text, bbox: w.bbox, state }
            })
            .collect();
        ScreenSnapshot {
            app: self.current.app.clone(),
            screen_id: self.current.screen.clone(),
            widgets,
            screen_width: self.scenario.screen_width,
            screen_height: self.scenario.screen_height,
            step_index: self.step_index,
        }
    }

    /// Applies one action.
    ///
    /// Failed actions still consume a step: the step counter advances, the
    /// error is logged, and no other state changes.
    pub fn step(&mut self, action: &Action) -> Result<(ScreenSnapshot, EnvOutcome), EnvError> {
        if self.task.is_none() {
            return Err(EnvError::NotReset);
        }
        if self.frozen {
            return Err(EnvError::Frozen);
        }
        if let Action::Ask { text } = action {
            self.pending_question = Some(text.clone());
            return Ok((self.snapshot(), self.outcome.clone()));
        }
        if let Err(e) = self.apply(action) {
            self.step_index += 1;
            self.errors.push(EnvErrorRecord { step_index: self.step_index, error: e.clone() });
            return Err(e);
        }
        self.step_index += 1;
        let terminal = matches!(action, Action::Terminate { .. });
        if terminal {
            self.frozen = true;
        }
        self.outcome = self.evaluate(terminal);
        Ok((self.snapshot(), self.outcome.clone()))
    }

    /// Lifts the terminate freeze so execution can resume.
    pub fn reopen(&mut self) {
        self.frozen = false;
        self.outcome = self.evaluate(false);
    }

    /// Evaluates the task predicate without mutating anything.
    pub fn run_success_check(&self) -> Result<EnvOutcome, EnvError> {
        if self.task.is_none() {
            return Err(EnvError::NotReset);
        }
        Ok(self.evaluate(self.frozen))
    }

    fn evaluate(&self, final_check: bool) -> EnvOutcome {
        let Some(task) = self.task() else {
            return EnvOutcome::ongoing();
        };
        if task.success.eval(&self.state) {
            EnvOutcome::success(format!("predicate holds: {}", task.success))
        } else if final_check {
            EnvOutcome::failure(format!("predicate does not hold: {}", task.success))
        } else {
            EnvOutcome::ongoing()
        }
    }

    fn current_def(&self) -> &ScreenDef {
        self.scenario.screen(&self.current).expect("current screen exists")
    }

    fn page(&self) -> u32 {
        self.pages.get(&self.current).copied().unwrap_or(0)
    }

    fn toggle_value(&self, key: &(ScreenRef, String), bind: Option<&str>) -> bool {
        if let Some(k) = bind {
            return self.state.get(k).is_some_and(StateValue::truthy);
        }
        self.toggles.get(key).copied().unwrap_or(false)
    }

    fn navigate_to(&mut self, target: ScreenRef, push: bool) {
        if push && target != self.current {
            self.back_stack.push(self.current.clone());
        }
        if target != self.current {
            self.focus = None;
        }
        self.pages.insert(target.clone(), 0);
        self.state.insert("app".into(), StateValue::Str(target.app.clone()));
        self.state.insert("screen".into(), StateValue::Str(target.to_string()));
        self.current = target;
    }

    fn fire(&mut self, t: Transition) {
        for (k, v) in t.set {
            self.state.insert(k, v);
        }
        for (k, v) in t.append {
            match self.state.get_mut(&k) {
                Some(StateValue::List(items)) => items.push(v),
                _ => {
                    self.state.insert(k, StateValue::List(vec![v]));
                }
            }
        }
        if let Some(target) = t.target {
            self.navigate_to(target, true);
        }
    }

    fn transition(&self, trigger: &Trigger) -> Option<Transition> {
        self.current_def().transitions.iter().find(|t| &t.trigger == trigger).cloned()
    }

    fn apply(&mut self, action: &Action) -> Result<(), EnvError> {
        match action {
            Action::Click { coordinate } | Action::LongPress { coordinate, .. } => {
                let long = matches!(action, Action::LongPress { .. });
                let snapshot = self.snapshot();
                let Some(hit) = snapshot.hit(coordinate.x, coordinate.y) else {
                    return Ok(());
                };
                let wid = hit.id.clone();
                let kind = hit.kind;
                let trigger = if long { Trigger::LongPress(wid.clone()) } else { Trigger::Click(wid.clone()) };
                let key = (self.current.clone(), wid.clone());
                if !long {
                    match kind {
                        WidgetKind::TextField => self.focus = Some(key.clone()),
                        WidgetKind::Toggle => {
                            let bind = self.current_def().widget(&wid).and_then(|w| w.bind.clone());
                            let next = !self.toggle_value(&key, bind.as_deref());
                            self.toggles.insert(key, next);
                            if let Some(k) = bind {
                                self.state.insert(k, StateValue::Bool(next));
                            }
                        }
                        _ => {}
                    }
                }
                if let Some(t) = self.transition(&trigger) {
                    self.fire(t);
                }
                Ok(())
            }
            Action::Type { text } => {
                let key = self.focused_field()?;
                let entry = self.fields.entry(key.clone()).or_default();
                entry.push_str(text);
                let content = entry.clone();
                self.sync_field(&key, content);
                Ok(())
            }
            Action::ClearText => {
                let key = self.focused_field()?;
                self.fields.insert(key.clone(), String::new());
                self.sync_field(&key, String::new());
                Ok(())
            }
            Action::Swipe { coordinate, coordinate2 } => {
                let dir = SwipeDirection::of((coordinate.x, coordinate.y), (coordinate2.x, coordinate2.y));
                if let Some(t) = self.transition(&Trigger::Swipe(dir)) {
                    self.fire(t);
                    return Ok(());
                }
                let pages = self.current_def().pages;
                let page = self.page();
                let next = match dir {
                    // Finger moving up scrolls the content down.
                    SwipeDirection::Up => (page + 1).min(pages - 1),
                    SwipeDirection::Down => page.saturating_sub(1),
                    _ => page,
                };
                self.pages.insert(self.current.clone(), next);
                Ok(())
            }
            Action::SystemButton { button } => {
                if let Some(t) = self.transition(&Trigger::Button(*button)) {
                    self.fire(t);
                    return Ok(());
                }
                match button {
                    SystemButton::Home => {
                        self.back_stack.clear();
                        let home = self.scenario.home.clone();
                        self.navigate_to(home, false);
                    }
                    SystemButton::Back => {
                        if let Some(prev) = self.back_stack.pop() {
                            self.navigate_to(prev, false);
                        }
                    }
                    SystemButton::Menu | SystemButton::Enter => {}
                }
                Ok(())
            }
            Action::Open { text } => {
                let app = self
                    .scenario
                    .app_by_launch_name(text)
                    .ok_or_else(|| EnvError::UnknownApp(text.clone()))?;
                let target = ScreenRef::new(&app.name, &app.entry);
                self.navigate_to(target, true);
                Ok(())
            }
            Action::Wait { .. } => Ok(()),
            Action::Answer { text } => {
                self.state.insert("answer".into(), StateValue::Str(text.clone()));
                Ok(())
            }
            Action::Terminate { .. } | Action::Ask { .. } => Ok(()),
        }
    }

    fn focused_field(&self) -> Result<(ScreenRef, String), EnvError> {
        match &self.focus {
            Some(key) if key.0 == self.current => Ok(key.clone()),
            _ => Err(EnvError::NoFocusedField),
        }
    }

    fn sync_field(&mut self, key: &(ScreenRef, String), content: String) {
        let bind = self.current_def().widget(&key.1).and_then(|w| w.bind.clone());
        if let Some(k) = bind {
            self.state.insert(k, StateValue::Str(content));
        }
    }
}

fn interpolate(text: &str, state: &BTreeMap<String, StateValue>) -> String {
    if !text.contains('{') {
        return text.to_string();
    }
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        match after.find('}') {
            Some(close) => {
                let key = &after[..close];
                out.push_str(&state.get(key).map(StateValue::display).unwrap_or_default());
                rest = &after[close + 1..];
            }
            None => {
                out.push_str(&rest[open..]);
                rest = "";
            }
        }
    }
    out.push_str(rest);
    out
}
