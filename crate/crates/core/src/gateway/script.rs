//! Deterministic scripted backend.
//!
//! A script is an ordered list of rules. The first rule whose matcher accepts
//! a bundle answers it. Script files are TOML:
//!
//! ```toml
//! default = "<verdict>ok</verdict>"
//!
//! [[rules]]
//! role = "executor"
//! screen = "Launcher/home"
//! instruction = ["Wi-Fi"]
//! repeat_last = true
//!
//! [[rules.turns]]
//! summary = "Open Settings"
//! action = '{"action":"open","text":"Settings"}'
//! ```

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Mutex;

use serde::Deserialize;

use super::{Backend, GatewayError, PromptBundle, Role};
use crate::action::{parse_action, render_response};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Responses are consumed one per matching call.
    #[default]
    Sequence,
    /// Responses wrap around.
    Cycle,
    /// The bundle's `step` meta value indexes the responses.
    ByStep,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct TurnFile {
    #[serde(default)]
    thought: Option<String>,
    summary: String,
    action: String,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RuleFile {
    #[serde(default)]
    role: Option<String>,
    #[serde(default)]
    screen: Option<String>,
    #[serde(default)]
    instruction: Vec<String>,
    #[serde(default)]
    contains: Vec<String>,
    #[serde(default)]
    absent: Vec<String>,
    #[serde(default)]
    meta: BTreeMap<String, String>,
    #[serde(default)]
    mode: Mode,
    #[serde(default)]
    repeat_last: bool,
    #[serde(default)]
    responses: Vec<String>,
    #[serde(default)]
    turns: Vec<TurnFile>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScriptFile {
    #[serde(default)]
    default: Option<String>,
    #[serde(default)]
    rules: Vec<RuleFile>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rule {
    pub role: Option<Role>,
    pub screen: Option<String>,
    pub instruction: Vec<String>,
    pub contains: Vec<String>,
    pub absent: Vec<String>,
    pub meta: BTreeMap<String, String>,
    pub mode: Mode,
    pub repeat_last: bool,
    pub responses: Vec<String>,
}

impl Rule {
    pub fn for_role(role: Role, responses: impl IntoIterator<Item = impl Into<String>>) -> Self {
        Self {
            role: Some(role),
            screen: None,
            instruction: Vec::new(),
            contains: Vec::new(),
            absent: Vec::new(),
            meta: BTreeMap::new(),
            mode: Mode::Sequence,
            repeat_last: false,
            responses: responses.into_iter().map(Into::into).collect(),
        }
    }

    pub fn containing(mut self, needle: &str) -> Self {
        self.contains.push(needle.to_string());
        self
    }

    pub fn repeating(mut self) -> Self {
        self.repeat_last = true;
        self
    }

    fn matches(&self, bundle: &PromptBundle, haystack: &str) -> bool {
        if self.role.is_some_and(|r| r != bundle.role) {
            return false;
        }
        if let Some(screen) = &self.screen {
            if bundle.meta.get("screen") != Some(screen) {
                return false;
            }
        }
        let instruction = bundle.meta.get("instruction").map(String::as_str).unwrap_or("");
        self.instruction.iter().all(|n| instruction.contains(n.as_str()))
            && self.contains.iter().all(|n| haystack.contains(n.as_str()))
            && !self.absent.iter().any(|n| haystack.contains(n.as_str()))
            && self.meta.iter().all(|(k, v)| bundle.meta.get(k) == Some(v))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ScriptError {
    #[error("script parse error: {0}")]
    Parse(String),
    #[error("rule {index}: {reason}")]
    InvalidRule { index: usize, reason: String },
    #[error("a script needs at least one rule or a default response")]
    Empty,
    #[error("cannot read script {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Script {
    pub rules: Vec<Rule>,
    pub default: Option<String>,
}

impl Script {
    pub fn new(rules: Vec<Rule>, default: Option<String>) -> Result<Self, ScriptError> {
        if rules.is_empty() && default.is_none() {
            return Err(ScriptError::Empty);
        }
        for (index, r) in rules.iter().enumerate() {
            if r.responses.is_empty() {
                return Err(ScriptError::InvalidRule { index, reason: "no responses".into() });
            }
        }
        Ok(Self { rules, default })
    }

    pub fn load_str(src: &str) -> Result<Self, ScriptError> {
        let file: ScriptFile = toml::from_str(src).map_err(|e| ScriptError::Parse(e.message().to_string()))?;
        let mut rules = Vec::with_capacity(file.rules.len());
        for (index, rf) in file.rules.into_iter().enumerate() {
            let invalid = |reason: String| ScriptError::InvalidRule { index, reason };
            let role = rf.role.as_deref().map(str::parse::<Role>).transpose().map_err(invalid)?;
            let mut responses = rf.responses;
            for turn in rf.turns {
                let action = parse_action(&turn.action).map_err(|e| invalid(e.to_string()))?;
                let thought = turn.thought.unwrap_or_else(|| format!("Next I will {}.", lowercase_first(&turn.summary)));
                responses.push(render_response(&thought, &turn.summary, &action));
            }
            rules.push(Rule {
                role,
                screen: rf.screen,
                instruction: rf.instruction,
                contains: rf.contains,
                absent: rf.absent,
                meta: rf.meta,
                mode: rf.mode,
                repeat_last: rf.repeat_last,
                responses,
            });
        }
        Self::new(rules, file.default)
    }

    pub fn load_path(path: &Path) -> Result<Self, ScriptError> {
        let src = std::fs::read_to_string(path).map_err(|e| ScriptError::Io(format!("{}: {e}", path.display())))?;
        Self::load_str(&src)
    }
}

fn lowercase_first(s: &str) -> String {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) => c.to_lowercase().chain(chars).collect(),
        None => String::new(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TranscriptEntry {
    pub role: Role,
    pub prompt: String,
    pub meta: BTreeMap<String, String>,
    pub temperature: f64,
    pub response: Result<String, GatewayError>,
}

#[derive(Debug, Default)]
struct ScriptState {
    consumed: Vec<usize>,
    transcript: Vec<TranscriptEntry>,
}

/// Backend answering from a [`Script`]. Pure given the script and the
/// sequence of calls made against it.
#[derive(Debug)]
pub struct ScriptedBackend {
    script: Script,
    state: Mutex<ScriptState>,
}

impl ScriptedBackend {
    pub fn new(script: Script) -> Self {
        let consumed = vec![0; script.rules.len()];
        Self { script, state: Mutex::new(ScriptState { consumed, transcript: Vec::new() }) }
    }

    pub fn parse(src: &str) -> Result<Self, ScriptError> {
        Script::load_str(src).map(Self::new)
    }

    /// Every call made so far, in order.
    pub fn transcript(&self) -> Vec<TranscriptEntry> {
        self.state.lock().expect("script state").transcript.clone()
    }

    pub fn calls_for(&self, role: Role) -> Vec<TranscriptEntry> {
        self.transcript().into_iter().filter(|e| e.role == role).collect()
    }

    fn answer(&self, bundle: &PromptBundle, state: &mut ScriptState) -> Result<String, GatewayError> {
        let haystack = bundle.full_text();
        let Some(index) = self.script.rules.iter().position(|r| r.matches(bundle, &haystack)) else {
            return self.script.default.clone().ok_or(GatewayError::ScriptExhausted(bundle.role));
        };
        let rule = &self.script.rules[index];
        let n = rule.responses.len();
        let pick = match rule.mode {
            Mode::Sequence => {
                let used = state.consumed[index];
                state.consumed[index] += 1;
                if used < n {
                    Some(used)
                } else if rule.repeat_last {
                    Some(n - 1)
                } else {
                    None
                }
            }
            Mode::Cycle => {
                let used = state.consumed[index];
                state.consumed[index] += 1;
                Some(used % n)
            }
            Mode::ByStep => {
                let step = bundle.meta.get("step").and_then(|s| s.parse::<usize>().ok()).unwrap_or(0);
                Some(step.min(n - 1))
            }
        };
        match pick {
            Some(i) => Ok(rule.responses[i].clone()),
            None => self.script.default.clone().ok_or(GatewayError::ScriptExhausted(bundle.role)),
        }
    }
}

impl Backend for ScriptedBackend {
    fn complete(&self, bundle: &PromptBundle) -> Result<String, GatewayError> {
        bundle.validate()?;
        let mut state = self.state.lock().expect("script state");
        let response = self.answer(bundle, &mut state);
        state.transcript.push(TranscriptEntry {
            role: bundle.role,
            prompt: bundle.full_text(),
            meta: bundle.meta.clone(),
            temperature: bundle.decoding.temperature,
            response: response.clone(),
        });
        response
    }
}
