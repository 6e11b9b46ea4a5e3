//! Typed action space and the three-part model response format.
//!
//! A model response is three tagged blocks, in order:
//!
//! ```text
//! <thinking>reasoning</thinking>
//! <summary>one-sentence description of the action</summary>
//! <action>{"action":"click","coordinate":[120,340]}</action>
//! ```
//!
//! Whitespace around and between the blocks is ignored, and a single
//! commentary line may follow the action block. Anything else is a layout
//! failure. The action block holds exactly one JSON object whose `action`
//! field names the kind; the remaining fields are that kind's parameters.

use std::fmt;

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::{Map, Value};

use crate::markup;

pub const THOUGHT_TAG: &str = "thinking";
pub const SUMMARY_TAG: &str = "summary";
pub const ACTION_TAG: &str = "action";

/// Pixel position, origin at the top-left corner of the screen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Coordinate {
    pub x: u32,
    pub y: u32,
}

impl Coordinate {
    pub const fn new(x: u32, y: u32) -> Self {
        Self { x, y }
    }
}

impl fmt::Display for Coordinate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.x, self.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SystemButton {
    Back,
    Home,
    Menu,
    Enter,
}

impl SystemButton {
    pub const ALL: [SystemButton; 4] = [Self::Back, Self::Home, Self::Menu, Self::Enter];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Back => "Back",
            Self::Home => "Home",
            Self::Menu => "Menu",
            Self::Enter => "Enter",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|b| b.as_str() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TerminateStatus {
    Success,
    Failure,
}

impl TerminateStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Success => "success",
            Self::Failure => "failure",
        }
    }
}

/// Discriminant of [`Action`], also the wire value of the `action` field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ActionKind {
    Click,
    LongPress,
    Swipe,
    Type,
    ClearText,
    SystemButton,
    Open,
    Wait,
    Answer,
    Terminate,
    Ask,
}

impl ActionKind {
    pub const ALL: [ActionKind; 11] = [
        Self::Click,
        Self::LongPress,
        Self::Swipe,
        Self::Type,
        Self::ClearText,
        Self::SystemButton,
        Self::Open,
        Self::Wait,
        Self::Answer,
        Self::Terminate,
        Self::Ask,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Click => "click",
            Self::LongPress => "long_press",
            Self::Swipe => "swipe",
            Self::Type => "type",
            Self::ClearText => "clear_text",
            Self::SystemButton => "system_button",
            Self::Open => "open",
            Self::Wait => "wait",
            Self::Answer => "answer",
            Self::Terminate => "terminate",
            Self::Ask => "ask",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == s)
    }

    /// Parameter field names accepted for this kind, sorted.
    pub fn params(self) -> &'static [&'static str] {
        match self {
            Self::Click => &["coordinate"],
            Self::LongPress => &["coordinate", "time"],
            Self::Swipe => &["coordinate", "coordinate2"],
            Self::Type | Self::Open | Self::Answer | Self::Ask => &["text"],
            Self::ClearText => &[],
            Self::SystemButton => &["button"],
            Self::Wait => &["time"],
            Self::Terminate => &["status"],
        }
    }
}

impl fmt::Display for ActionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One executable agent action.
///
/// Durations are seconds and always finite and strictly positive when the
/// value came through [`parse_action`] or [`Action::validate`].
#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    Click { coordinate: Coordinate },
    LongPress { coordinate: Coordinate, time: f64 },
    Swipe { coordinate: Coordinate, coordinate2: Coordinate },
    Type { text: String },
    ClearText,
    SystemButton { button: SystemButton },
    Open { text: String },
    Wait { time: f64 },
    Answer { text: String },
    Terminate { status: TerminateStatus },
    Ask { text: String },
}

impl Action {
    pub fn click(x: u32, y: u32) -> Self {
        Self::Click { coordinate: Coordinate::new(x, y) }
    }

    pub fn swipe(from: (u32, u32), to: (u32, u32)) -> Self {
        Self::Swipe {
            coordinate: Coordinate::new(from.0, from.1),
            coordinate2: Coordinate::new(to.0, to.1),
        }
    }

    pub fn type_text(text: impl Into<String>) -> Self {
        Self::Type { text: text.into() }
    }

    pub fn open(app: impl Into<String>) -> Self {
        Self::Open { text: app.into() }
    }

    pub fn ask(question: impl Into<String>) -> Self {
        Self::Ask { text: question.into() }
    }

    pub fn terminate(success: bool) -> Self {
        Self::Terminate {
            status: if success { TerminateStatus::Success } else { TerminateStatus::Failure },
        }
    }

    pub fn kind(&self) -> ActionKind {
        match self {
            Self::Click { .. } => ActionKind::Click,
            Self::LongPress { .. } => ActionKind::LongPress,
            Self::Swipe { .. } => ActionKind::Swipe,
            Self::Type { .. } => ActionKind::Type,
            Self::ClearText => ActionKind::ClearText,
            Self::SystemButton { .. } => ActionKind::SystemButton,
            Self::Open { .. } => ActionKind::Open,
            Self::Wait { .. } => ActionKind::Wait,
            Self::Answer { .. } => ActionKind::Answer,
            Self::Terminate { .. } => ActionKind::Terminate,
            Self::Ask { .. } => ActionKind::Ask,
        }
    }

    /// The tap point of click and long-press actions.
    pub fn tap_point(&self) -> Option<Coordinate> {
        match self {
            Self::Click { coordinate } | Self::LongPress { coordinate, .. } => Some(*coordinate),
            _ => None,
        }
    }

    /// Free-text parameter of text-carrying kinds.
    pub fn text(&self) -> Option<&str> {
        match self {
            Self::Type { text } | Self::Open { text } | Self::Answer { text } | Self::Ask { text } => {
                Some(text)
            }
            _ => None,
        }
    }

    /// Checks the value-level constraints the type system does not encode.
    pub fn validate(&self) -> Result<(), ParseFailure> {
        match self {
            Self::LongPress { time, .. } | Self::Wait { time } => check_duration(*time),
            _ => Ok(()),
        }
    }

    pub fn to_json(&self) -> Value {
        let mut map = Map::new();
        map.insert("action".into(), Value::String(self.kind().as_str().into()));
        let coord = |c: &Coordinate| Value::from(vec![c.x, c.y]);
        match self {
            Self::Click { coordinate } => {
                map.insert("coordinate".into(), coord(coordinate));
            }
            Self::LongPress { coordinate, time } => {
                map.insert("coordinate".into(), coord(coordinate));
                map.insert("time".into(), Value::from(*time));
            }
            Self::Swipe { coordinate, coordinate2 } => {
                map.insert("coordinate".into(), coord(coordinate));
                map.insert("coordinate2".into(), coord(coordinate2));
            }
            Self::Type { text } | Self::Open { text } | Self::Answer { text } | Self::Ask { text } => {
                map.insert("text".into(), Value::String(text.clone()));
            }
            Self::ClearText => {}
            Self::SystemButton { button } => {
                map.insert("button".into(), Value::String(button.as_str().into()));
            }
            Self::Wait { time } => {
                map.insert("time".into(), Value::from(*time));
            }
            Self::Terminate { status } => {
                map.insert("status".into(), Value::String(status.as_str().into()));
            }
        }
        Value::Object(map)
    }

    pub fn from_json(value: &Value) -> Result<Self, ParseFailure> {
        let obj = value
            .as_object()
            .ok_or_else(|| ParseFailure::MalformedAction("action block is not a JSON object".into()))?;
        let kind_name = match obj.get("action") {
            Some(Value::String(s)) => s.as_str(),
            Some(_) => return Err(bad("action", "must be a string")),
            None => return Err(ParseFailure::MalformedAction("missing \"action\" field".into())),
        };
        let kind = ActionKind::parse(kind_name)
            .ok_or_else(|| ParseFailure::UnknownActionKind(kind_name.to_string()))?;
        let allowed = kind.params();
        for key in obj.keys() {
            if key != "action" && !allowed.contains(&key.as_str()) {
                return Err(bad(key, &format!("not a parameter of {kind}")));
            }
        }
        let action = match kind {
            ActionKind::Click => Self::Click { coordinate: coord_param(obj, "coordinate")? },
            ActionKind::LongPress => Self::LongPress {
                coordinate: coord_param(obj, "coordinate")?,
                time: duration_param(obj, "time")?,
            },
            ActionKind::Swipe => Self::Swipe {
                coordinate: coord_param(obj, "coordinate")?,
                coordinate2: coord_param(obj, "coordinate2")?,
            },
            ActionKind::Type => Self::Type { text: text_param(obj, "text")? },
            ActionKind::ClearText => Self::ClearText,
            ActionKind::SystemButton => {
                let raw = text_param(obj, "button")?;
                let button = SystemButton::parse(&raw)
                    .ok_or_else(|| bad("button", &format!("{raw:?} is not one of Back, Home, Menu, Enter")))?;
                Self::SystemButton { button }
            }
            ActionKind::Open => Self::Open { text: text_param(obj, "text")? },
            ActionKind::Wait => Self::Wait { time: duration_param(obj, "time")? },
            ActionKind::Answer => Self::Answer { text: text_param(obj, "text")? },
            ActionKind::Terminate => {
                let raw = text_param(obj, "status")?;
                let status = match raw.as_str() {
                    "success" => TerminateStatus::Success,
                    "failure" => TerminateStatus::Failure,
                    _ => return Err(bad("status", &format!("{raw:?} is not success or failure"))),
                };
                Self::Terminate { status }
            }
            ActionKind::Ask => Self::Ask { text: text_param(obj, "text")? },
        };
        Ok(action)
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&serialize_action(self))
    }
}

impl Serialize for Action {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.to_json().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Action {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let value = Value::deserialize(d)?;
        Action::from_json(&value).map_err(D::Error::custom)
    }
}

fn bad(name: &str, reason: &str) -> ParseFailure {
    ParseFailure::BadParameter { name: name.to_string(), reason: reason.to_string() }
}

fn check_duration(t: f64) -> Result<(), ParseFailure> {
    if t.is_finite() && t > 0.0 {
        Ok(())
    } else {
        Err(bad("time", "must be a finite number of seconds greater than zero"))
    }
}

fn required<'a>(obj: &'a Map<String, Value>, name: &str) -> Result<&'a Value, ParseFailure> {
    obj.get(name).ok_or_else(|| bad(name, "missing"))
}

fn coord_param(obj: &Map<String, Value>, name: &str) -> Result<Coordinate, ParseFailure> {
    let arr = required(obj, name)?
        .as_array()
        .ok_or_else(|| bad(name, "must be a two-element integer array"))?;
    if arr.len() != 2 {
        return Err(bad(name, "must be a two-element integer array"));
    }
    let component = |v: &Value| {
        v.as_u64()
            .and_then(|n| u32::try_from(n).ok())
            .ok_or_else(|| bad(name, "components must be non-negative integers"))
    };
    Ok(Coordinate::new(component(&arr[0])?, component(&arr[1])?))
}

fn text_param(obj: &Map<String, Value>, name: &str) -> Result<String, ParseFailure> {
    match required(obj, name)? {
        Value::String(s) => Ok(s.clone()),
        _ => Err(bad(name, "must be a string")),
    }
}

fn duration_param(obj: &Map<String, Value>, name: &str) -> Result<f64, ParseFailure> {
    let t = required(obj, name)?.as_f64().ok_or_else(|| bad(name, "must be a number"))?;
    check_duration(t)?;
    Ok(t)
}

/// Which of the three response sections a failure refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Section {
    Thought,
    Summary,
    Action,
}

impl fmt::Display for Section {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Thought => "thought",
            Self::Summary => "summary",
            Self::Action => "action",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ParseFailure {
    #[error("missing {0} section")]
    MissingSection(Section),
    #[error("malformed response layout: {0}")]
    MalformedLayout(String),
    #[error("malformed action: {0}")]
    MalformedAction(String),
    #[error("unknown action kind {0:?}")]
    UnknownActionKind(String),
    #[error("bad parameter {name}: {reason}")]
    BadParameter { name: String, reason: String },
}

impl ParseFailure {
    /// The response section that failed.
    pub fn section(&self) -> Section {
        match self {
            Self::MissingSection(s) => *s,
            Self::MalformedLayout(_) => Section::Thought,
            Self::MalformedAction(_) | Self::UnknownActionKind(_) | Self::BadParameter { .. } => {
                Section::Action
            }
        }
    }
}

/// Decodes the JSON body of an action block.
pub fn parse_action(text: &str) -> Result<Action, ParseFailure> {
    let value: Value = serde_json::from_str(text.trim())
        .map_err(|e| ParseFailure::MalformedAction(e.to_string()))?;
    Action::from_json(&value)
}

/// Canonical wire encoding: compact JSON with keys in lexicographic order.
pub fn serialize_action(action: &Action) -> String {
    // serde_json's default map is ordered, and "action" sorts before every
    // parameter name.
    action.to_json().to_string()
}

/// A successfully parsed three-part model output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelResponse {
    pub thought: String,
    pub action_summary: String,
    pub action: Action,
    pub raw: String,
}

/// Parses a raw model output into its three sections.
pub fn parse_response(raw: &str) -> Result<ModelResponse, ParseFailure> {
    let thought = markup::find_tag(raw, THOUGHT_TAG);
    let summary = markup::find_tag(raw, SUMMARY_TAG);
    let action = markup::find_tag(raw, ACTION_TAG);
    let (thought, summary, action) = match (thought, summary, action) {
        (None, _, _) => return Err(ParseFailure::MissingSection(Section::Thought)),
        (_, None, _) => return Err(ParseFailure::MissingSection(Section::Summary)),
        (_, _, None) => return Err(ParseFailure::MissingSection(Section::Action)),
        (Some(t), Some(s), Some(a)) => (t, s, a),
    };
    if !(thought.end <= summary.start && summary.end <= action.start) {
        return Err(ParseFailure::MalformedLayout(
            "sections must appear in the order thinking, summary, action".into(),
        ));
    }
    let gaps = [&raw[..thought.start], &raw[thought.end..summary.start], &raw[summary.end..action.start]];
    if gaps.iter().any(|g| !g.trim().is_empty()) {
        return Err(ParseFailure::MalformedLayout("unexpected text between sections".into()));
    }
    let trailing = raw[action.end..].lines().filter(|l| !l.trim().is_empty()).count();
    if trailing > 1 {
        return Err(ParseFailure::MalformedLayout(
            "at most one commentary line may follow the action block".into(),
        ));
    }
    if thought.inner.trim().is_empty() {
        return Err(ParseFailure::MissingSection(Section::Thought));
    }
    if summary.inner.trim().is_empty() {
        return Err(ParseFailure::MissingSection(Section::Summary));
    }
    let parsed = parse_action(action.inner)?;
    Ok(ModelResponse {
        thought: thought.inner.trim().to_string(),
        action_summary: summary.inner.trim().to_string(),
        action: parsed,
        raw: raw.to_string(),
    })
}

/// Decodes just the action block, ignoring the rest of the layout.
pub fn extract_action(raw: &str) -> Result<Action, ParseFailure> {
    let block = markup::tag_text(raw, ACTION_TAG).ok_or(ParseFailure::MissingSection(Section::Action))?;
    parse_action(block)
}

/// Renders a response in the canonical three-part layout.
pub fn render_response(thought: &str, summary: &str, action: &Action) -> String {
    format!(
        "{}\n{}\n{}",
        markup::wrap(THOUGHT_TAG, thought),
        markup::wrap(SUMMARY_TAG, summary),
        markup::wrap(ACTION_TAG, &serialize_action(action))
    )
}
