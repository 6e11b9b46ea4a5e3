//! Scenario documents: apps as screen graphs, initial state, and tasks.
//!
//! Scenarios are TOML. Screens are addressed as `App/screen`; inside an app's
//! own transitions a bare screen id refers to the same app.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::predicate::{Predicate, StateValue};
use crate::action::{parse_action, Action, SystemButton};

/// Keys maintained by the environment itself.
pub const BUILTIN_KEYS: [&str; 3] = ["app", "screen", "answer"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[u32; 4]", into = "[u32; 4]")]
pub struct BBox {
    pub left: u32,
    pub top: u32,
    pub right: u32,
    pub bottom: u32,
}

impl BBox {
    pub const fn new(left: u32, top: u32, right: u32, bottom: u32) -> Self {
        Self { left, top, right, bottom }
    }

    /// Closed containment, used for hit-testing.
    pub fn contains(&self, x: u32, y: u32) -> bool {
        self.left <= x && x <= self.right && self.top <= y && y <= self.bottom
    }

    /// Open containment, used for grounding rewards.
    pub fn strictly_contains(&self, x: u32, y: u32) -> bool {
        self.left < x && x < self.right && self.top < y && y < self.bottom
    }

    pub fn center(&self) -> (u32, u32) {
        ((self.left + self.right) / 2, (self.top + self.bottom) / 2)
    }

    pub fn is_well_formed(&self) -> bool {
        self.left < self.right && self.top < self.bottom
    }
}

impl From<[u32; 4]> for BBox {
    fn from(v: [u32; 4]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [u32; 4] {
    fn from(b: BBox) -> Self {
        [b.left, b.top, b.right, b.bottom]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WidgetKind {
    Button,
    TextField,
    Label,
    ListItem,
    Toggle,
    Icon,
}

/// Screen address `App/screen`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ScreenRef {
    pub app: String,
    pub screen: String,
}

impl ScreenRef {
    pub fn new(app: impl Into<String>, screen: impl Into<String>) -> Self {
        Self { app: app.into(), screen: screen.into() }
    }

    fn resolve(raw: &str, current_app: &str) -> Self {
        match raw.split_once('/') {
            Some((a, s)) => Self::new(a, s),
            None => Self::new(current_app, raw),
        }
    }
}

impl fmt::Display for ScreenRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.app, self.screen)
    }
}

impl TryFrom<String> for ScreenRef {
    type Error = String;
    fn try_from(s: String) -> Result<Self, String> {
        match s.split_once('/') {
            Some((a, b)) if !a.is_empty() && !b.is_empty() => Ok(Self::new(a, b)),
            _ => Err(format!("screen reference {s:?} must look like App/screen")),
        }
    }
}

impl From<ScreenRef> for String {
    fn from(r: ScreenRef) -> String {
        r.to_string()
    }
}

/// Direction of a swipe gesture's finger movement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SwipeDirection {
    Up,
    Down,
    Left,
    Right,
}

impl SwipeDirection {
    /// Dominant axis of the displacement; ties resolve to the vertical axis.
    pub fn of(from: (u32, u32), to: (u32, u32)) -> Self {
        let dx = i64::from(to.0) - i64::from(from.0);
        let dy = i64::from(to.1) - i64::from(from.1);
        if dx.abs() > dy.abs() {
            if dx > 0 { Self::Right } else { Self::Left }
        } else if dy > 0 {
            Self::Down
        } else {
            Self::Up
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "up" => Some(Self::Up),
            "down" => Some(Self::Down),
            "left" => Some(Self::Left),
            "right" => Some(Self::Right),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Trigger {
    Click(String),
    LongPress(String),
    Button(SystemButton),
    Swipe(SwipeDirection),
}

impl Trigger {
    fn parse(s: &str) -> Option<Self> {
        let (verb, arg) = s.split_once(':')?;
        match verb {
            "click" => Some(Self::Click(arg.to_string())),
            "long_press" => Some(Self::LongPress(arg.to_string())),
            "button" => SystemButton::parse(arg).map(Self::Button),
            "swipe" => SwipeDirection::parse(arg).map(Self::Swipe),
            _ => None,
        }
    }

    fn widget(&self) -> Option<&str> {
        match self {
            Self::Click(w) | Self::LongPress(w) => Some(w),
            _ => None,
        }
    }
}

// ---- file format ----

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub name: String,
    #[serde(default = "default_width")]
    pub screen_width: u32,
    #[serde(default = "default_height")]
    pub screen_height: u32,
    pub home: String,
    #[serde(default)]
    pub start_screens: Vec<String>,
    #[serde(default)]
    pub state: BTreeMap<String, StateValue>,
    pub apps: Vec<AppFile>,
    #[serde(default)]
    pub tasks: Vec<TaskFile>,
    #[serde(default)]
    pub equivalences: Vec<EquivalenceFile>,
}

fn default_width() -> u32 {
    1080
}

fn default_height() -> u32 {
    2400
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct AppFile {
    pub name: String,
    pub entry: String,
    pub screens: Vec<ScreenFile>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ScreenFile {
    pub id: String,
    #[serde(default = "one")]
    pub pages: u32,
    #[serde(default)]
    pub widgets: Vec<WidgetFile>,
    #[serde(default)]
    pub transitions: Vec<TransitionFile>,
}

fn one() -> u32 {
    1
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct WidgetFile {
    pub id: String,
    pub kind: WidgetKind,
    #[serde(default)]
    pub text: String,
    pub bbox: BBox,
    /// Scroll page the widget lives on; absent means always visible.
    #[serde(default)]
    pub page: Option<u32>,
    /// State key mirrored by a text field's contents or a toggle's value.
    #[serde(default)]
    pub bind: Option<String>,
    #[serde(default)]
    pub state: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct TransitionFile {
    pub on: String,
    #[serde(default)]
    pub target: Option<String>,
    #[serde(default)]
    pub set: BTreeMap<String, StateValue>,
    #[serde(default)]
    pub append: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct TaskFile {
    pub id: String,
    pub instruction: String,
    pub success: String,
    #[serde(default)]
    pub reset: BTreeMap<String, StateValue>,
    #[serde(default)]
    pub start: Option<String>,
    #[serde(default)]
    pub random_starts: Vec<String>,
    #[serde(default)]
    pub ambiguities: Vec<Ambiguity>,
}

/// An instruction phrase that is underspecified without user input.
#[derive(Debug, Clone, PartialEq, Eq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct Ambiguity {
    pub marker: String,
    pub topic: String,
    pub question: String,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct EquivalenceFile {
    pub screen: String,
    pub forms: Vec<FormFile>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct FormFile {
    #[serde(default)]
    pub action: Option<String>,
    #[serde(default)]
    pub widget: Option<String>,
}

// ---- validated model ----

#[derive(Debug, Clone)]
pub struct WidgetDef {
    pub id: String,
    pub kind: WidgetKind,
    pub text: String,
    pub bbox: BBox,
    pub page: Option<u32>,
    pub bind: Option<String>,
    pub state: BTreeMap<String, String>,
}

#[derive(Debug, Clone)]
pub struct Transition {
    pub trigger: Trigger,
    pub target: Option<ScreenRef>,
    pub set: BTreeMap<String, StateValue>,
    pub append: BTreeMap<String, String>,
}

#[derive(Debug, Clone)]
pub struct ScreenDef {
    pub id: String,
    pub pages: u32,
    pub widgets: Vec<WidgetDef>,
    pub transitions: Vec<Transition>,
}

impl ScreenDef {
    pub fn widget(&self, id: &str) -> Option<&WidgetDef> {
        self.widgets.iter().find(|w| w.id == id)
    }
}

#[derive(Debug, Clone)]
pub struct AppDef {
    pub name: String,
    pub entry: String,
    pub screens: Vec<ScreenDef>,
}

#[derive(Debug, Clone)]
pub struct TaskDef {
    pub id: String,
    pub instruction: String,
    pub success: Predicate,
    pub reset: BTreeMap<String, StateValue>,
    pub start: Option<ScreenRef>,
    pub random_starts: Vec<ScreenRef>,
    pub ambiguities: Vec<Ambiguity>,
}

/// One alternative way to perform the same step.
#[derive(Debug, Clone, PartialEq)]
pub enum ActionForm {
    Action(Action),
    /// A click anywhere inside the named widget.
    Widget(String),
}

#[derive(Debug, Clone)]
pub struct Equivalence {
    pub screen: ScreenRef,
    pub forms: Vec<ActionForm>,
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub screen_width: u32,
    pub screen_height: u32,
    pub home: ScreenRef,
    pub start_screens: Vec<ScreenRef>,
    pub initial_state: BTreeMap<String, StateValue>,
    pub apps: Vec<AppDef>,
    pub tasks: Vec<TaskDef>,
    pub equivalences: Vec<Equivalence>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ScenarioError {
    #[error("schema error at {path}: {reason}")]
    SchemaError { path: String, reason: String },
    #[error("transition at {from} targets missing screen {target}")]
    DanglingTransition { from: String, target: String },
    #[error("{path} references undeclared state key {key:?}")]
    UnknownStateKey { path: String, key: String },
    #[error("cannot read scenario {0}")]
    Io(String),
}

fn schema(path: impl Into<String>, reason: impl Into<String>) -> ScenarioError {
    ScenarioError::SchemaError { path: path.into(), reason: reason.into() }
}

impl Scenario {
    pub fn load_str(src: &str) -> Result<Self, ScenarioError> {
        let file: ScenarioFile = toml::from_str(src).map_err(|e| {
            let path = e.span().map(|s| format!("byte {}", s.start)).unwrap_or_else(|| "document".into());
            schema(path, e.message().to_string())
        })?;
        Self::from_file(file)
    }

    pub fn load_path(path: &Path) -> Result<Self, ScenarioError> {
        let src = std::fs::read_to_string(path).map_err(|e| ScenarioError::Io(format!("{}: {e}", path.display())))?;
        Self::load_str(&src)
    }

    pub fn from_file(file: ScenarioFile) -> Result<Self, ScenarioError> {
        let (w, h) = (file.screen_width, file.screen_height);
        if w == 0 || h == 0 {
            return Err(schema("screen_width", "screen dimensions must be positive"));
        }
        let declared: BTreeSet<String> = file
            .state
            .keys()
            .cloned()
            .chain(BUILTIN_KEYS.iter().map(|s| s.to_string()))
            .collect();
        let check_key = |path: &str, key: &str| -> Result<(), ScenarioError> {
            if declared.contains(key) {
                Ok(())
            } else {
                Err(ScenarioError::UnknownStateKey { path: path.to_string(), key: key.to_string() })
            }
        };

        let mut apps = Vec::new();
        let mut app_names = BTreeSet::new();
        for (ai, app) in file.apps.iter().enumerate() {
            let apath = format!("apps[{ai}]");
            if app.name.trim().is_empty() || app.name.contains('/') {
                return Err(schema(&apath, "app name must be non-empty and contain no '/'"));
            }
            if !app_names.insert(app.name.to_lowercase()) {
                return Err(schema(&apath, format!("duplicate app {:?}", app.name)));
            }
            let mut screens = Vec::new();
            let mut screen_ids = BTreeSet::new();
            for (si, screen) in app.screens.iter().enumerate() {
                let spath = format!("{apath}.screens[{si}]");
                if !screen_ids.insert(screen.id.clone()) {
                    return Err(schema(&spath, format!("duplicate screen {:?}", screen.id)));
                }
                if screen.pages == 0 {
                    return Err(schema(&spath, "pages must be at least 1"));
                }
                let mut widget_ids = BTreeSet::new();
                let mut widgets = Vec::new();
                for (wi, wf) in screen.widgets.iter().enumerate() {
                    let wpath = format!("{spath}.widgets[{wi}]");
                    if !widget_ids.insert(wf.id.clone()) {
                        return Err(schema(&wpath, format!("duplicate widget id {:?}", wf.id)));
                    }
                    if !wf.bbox.is_well_formed() {
                        return Err(schema(&wpath, "bbox must satisfy left < right and top < bottom"));
                    }
                    if wf.bbox.right >= w || wf.bbox.bottom >= h {
                        return Err(schema(&wpath, "bbox lies outside the screen"));
                    }
                    if let Some(page) = wf.page {
                        if page >= screen.pages {
                            return Err(schema(&wpath, "page beyond the screen's page count"));
                        }
                    }
                    if let Some(key) = &wf.bind {
                        check_key(&wpath, key)?;
                    }
                    for key in template_keys(&wf.text) {
                        check_key(&wpath, &key)?;
                    }
                    widgets.push(WidgetDef {
                        id: wf.id.clone(),
                        kind: wf.kind,
                        text: wf.text.clone(),
                        bbox: wf.bbox,
                        page: wf.page,
                        bind: wf.bind.clone(),
                        state: wf.state.clone(),
                    });
                }
                let mut transitions = Vec::new();
                for (ti, tf) in screen.transitions.iter().enumerate() {
                    let tpath = format!("{spath}.transitions[{ti}]");
                    let trigger = Trigger::parse(&tf.on)
                        .ok_or_else(|| schema(&tpath, format!("bad trigger {:?}", tf.on)))?;
                    if let Some(wid) = trigger.widget() {
                        if !widget_ids.contains(wid) {
                            return Err(schema(&tpath, format!("trigger names unknown widget {wid:?}")));
                        }
                    }
                    for key in tf.set.keys().chain(tf.append.keys()) {
                        check_key(&tpath, key)?;
                    }
                    transitions.push(Transition {
                        trigger,
                        target: tf.target.as_deref().map(|t| ScreenRef::resolve(t, &app.name)),
                        set: tf.set.clone(),
                        append: tf.append.clone(),
                    });
                }
                screens.push(ScreenDef { id: screen.id.clone(), pages: screen.pages, widgets, transitions });
            }
            if !screen_ids.contains(&app.entry) {
                return Err(ScenarioError::DanglingTransition {
                    from: format!("{apath}.entry"),
                    target: format!("{}/{}", app.name, app.entry),
                });
            }
            apps.push(AppDef { name: app.name.clone(), entry: app.entry.clone(), screens });
        }

        let mut scenario = Scenario {
            name: file.name.clone(),
            screen_width: w,
            screen_height: h,
            home: ScreenRef::new("", ""),
            start_screens: Vec::new(),
            initial_state: file.state.clone(),
            apps,
            tasks: Vec::new(),
            equivalences: Vec::new(),
        };

        for app in &scenario.apps {
            for screen in &app.screens {
                for t in &screen.transitions {
                    if let Some(target) = &t.target {
                        if scenario.screen(target).is_none() {
                            return Err(ScenarioError::DanglingTransition {
                                from: format!("{}/{}", app.name, screen.id),
                                target: target.to_string(),
                            });
                        }
                    }
                }
            }
        }

        let screen_ref = |path: &str, raw: &str, s: &Scenario| -> Result<ScreenRef, ScenarioError> {
            let r = ScreenRef::try_from(raw.to_string()).map_err(|e| schema(path, e))?;
            if s.screen(&r).is_none() {
                return Err(ScenarioError::DanglingTransition { from: path.to_string(), target: raw.to_string() });
            }
            Ok(r)
        };
        scenario.home = screen_ref("home", &file.home, &scenario)?;
        scenario.start_screens = file
            .start_screens
            .iter()
            .enumerate()
            .map(|(i, s)| screen_ref(&format!("start_screens[{i}]"), s, &scenario))
            .collect::<Result<_, _>>()?;

        let mut task_ids = BTreeSet::new();
        for (ti, tf) in file.tasks.iter().enumerate() {
            let tpath = format!("tasks[{ti}]");
            if !task_ids.insert(tf.id.clone()) {
                return Err(schema(&tpath, format!("duplicate task id {:?}", tf.id)));
            }
            if tf.instruction.trim().is_empty() {
                return Err(schema(&tpath, "instruction must be non-empty"));
            }
            let success = Predicate::parse(&tf.success).map_err(|e| schema(format!("{tpath}.success"), e.to_string()))?;
            for key in success.keys() {
                check_key(&format!("{tpath}.success"), key)?;
            }
            for key in tf.reset.keys() {
                check_key(&format!("{tpath}.reset"), key)?;
            }
            let start = tf.start.as_deref().map(|s| screen_ref(&format!("{tpath}.start"), s, &scenario)).transpose()?;
            let random_starts = tf
                .random_starts
                .iter()
                .map(|s| screen_ref(&format!("{tpath}.random_starts"), s, &scenario))
                .collect::<Result<_, _>>()?;
            scenario.tasks.push(TaskDef {
                id: tf.id.clone(),
                instruction: tf.instruction.clone(),
                success,
                reset: tf.reset.clone(),
                start,
                random_starts,
                ambiguities: tf.ambiguities.clone(),
            });
        }

        for (ei, ef) in file.equivalences.iter().enumerate() {
            let epath = format!("equivalences[{ei}]");
            let screen = screen_ref(&format!("{epath}.screen"), &ef.screen, &scenario)?;
            let def = scenario.screen(&screen).expect("checked above");
            let mut forms = Vec::new();
            for (fi, form) in ef.forms.iter().enumerate() {
                let fpath = format!("{epath}.forms[{fi}]");
                match (&form.action, &form.widget) {
                    (Some(a), None) => {
                        let action = parse_action(a).map_err(|e| schema(&fpath, e.to_string()))?;
                        forms.push(ActionForm::Action(action));
                    }
                    (None, Some(wid)) => {
                        if def.widget(wid).is_none() {
                            return Err(schema(&fpath, format!("unknown widget {wid:?}")));
                        }
                        forms.push(ActionForm::Widget(wid.clone()));
                    }
                    _ => return Err(schema(&fpath, "a form names exactly one of action or widget")),
                }
            }
            if forms.len() < 2 {
                return Err(schema(&epath, "an equivalence needs at least two forms"));
            }
            scenario.equivalences.push(Equivalence { screen, forms });
        }
        Ok(scenario)
    }

    pub fn app(&self, name: &str) -> Option<&AppDef> {
        self.apps.iter().find(|a| a.name == name)
    }

    /// Case-insensitive exact app-name lookup used by `open`.
    pub fn app_by_launch_name(&self, name: &str) -> Option<&AppDef> {
        let wanted = name.trim().to_lowercase();
        self.apps.iter().find(|a| a.name.to_lowercase() == wanted)
    }

    pub fn screen(&self, r: &ScreenRef) -> Option<&ScreenDef> {
        self.app(&r.app)?.screens.iter().find(|s| s.id == r.screen)
    }

    pub fn task(&self, id: &str) -> Option<&TaskDef> {
        self.tasks.iter().find(|t| t.id == id)
    }

    pub fn app_names(&self) -> Vec<&str> {
        self.apps.iter().map(|a| a.name.as_str()).collect()
    }
}

/// `{key}` placeholders in widget text.
pub(crate) fn template_keys(text: &str) -> Vec<String> {
    let mut keys = Vec::new();
    let mut rest = text;
    while let Some(open) = rest.find('{') {
        let after = &rest[open + 1..];
        match after.find('}') {
            Some(close) => {
                keys.push(after[..close].to_string());
                rest = &after[close + 1..];
            }
            None => break,
        }
    }
    keys
}
