//! Backend abstraction shared by every model-driven role.

mod http;
mod script;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::sim::ScreenSnapshot;

pub use http::{GatewayConfig, HttpBackend};
pub use script::{Mode, Rule, Script, ScriptError, ScriptedBackend, TranscriptEntry};

/// Every framework role that talks to a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Executor,
    ActionReflector,
    TrajectoryReflector,
    GlobalReflector,
    TaskClassifier,
    TaskOrchestrator,
    TaskExtractor,
    TaskRewriter,
    Discriminator,
    QueryExpander,
    MultipathJudge,
    SopExtractor,
    QueryRewriter,
    ProfileAnalyzer,
    TrustAssessor,
}

impl Role {
    pub const ALL: [Role; 15] = [
        Self::Executor,
        Self::ActionReflector,
        Self::TrajectoryReflector,
        Self::GlobalReflector,
        Self::TaskClassifier,
        Self::TaskOrchestrator,
        Self::TaskExtractor,
        Self::TaskRewriter,
        Self::Discriminator,
        Self::QueryExpander,
        Self::MultipathJudge,
        Self::SopExtractor,
        Self::QueryRewriter,
        Self::ProfileAnalyzer,
        Self::TrustAssessor,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Executor => "executor",
            Self::ActionReflector => "action_reflector",
            Self::TrajectoryReflector => "trajectory_reflector",
            Self::GlobalReflector => "global_reflector",
            Self::TaskClassifier => "task_classifier",
            Self::TaskOrchestrator => "task_orchestrator",
            Self::TaskExtractor => "task_extractor",
            Self::TaskRewriter => "task_rewriter",
            Self::Discriminator => "discriminator",
            Self::QueryExpander => "query_expander",
            Self::MultipathJudge => "multipath_judge",
            Self::SopExtractor => "sop_extractor",
            Self::QueryRewriter => "query_rewriter",
            Self::ProfileAnalyzer => "profile_analyzer",
            Self::TrustAssessor => "trust_assessor",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Role {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL.into_iter().find(|r| r.as_str() == s).ok_or_else(|| format!("unknown role {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decoding {
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for Decoding {
    fn default() -> Self {
        Self { temperature: 0.0, max_tokens: 1024, seed: None }
    }
}

/// Default sampling temperature for diversified rollouts.
pub const ROLLOUT_TEMPERATURE: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "value", rename_all = "snake_case")]
pub enum UserPart {
    Text(String),
    Snapshot(ScreenSnapshot),
}

/// Everything a backend needs to produce one completion.
///
/// `meta` carries structured facts about the call (current screen, step,
/// instruction) that scripted backends match on; live backends ignore it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub role: Role,
    pub system_text: String,
    pub user_parts: Vec<UserPart>,
    pub decoding: Decoding,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
}

impl PromptBundle {
    pub fn new(role: Role, system_text: impl Into<String>) -> Self {
        Self {
            role,
            system_text: system_text.into(),
            user_parts: Vec::new(),
            decoding: Decoding::default(),
            meta: BTreeMap::new(),
        }
    }

    pub fn text(mut self, part: impl Into<String>) -> Self {
        self.user_parts.push(UserPart::Text(part.into()));
        self
    }

    pub fn snapshot(mut self, snap: &ScreenSnapshot) -> Self {
        self.user_parts.push(UserPart::Snapshot(snap.clone()));
        self
    }

    pub fn meta(mut self, key: &str, value: impl Into<String>) -> Self {
        self.meta.insert(key.to_string(), value.into());
        self
    }

    pub fn temperature(mut self, t: f64) -> Self {
        self.decoding.temperature = t;
        self
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if !(self.decoding.temperature >= 0.0 && self.decoding.temperature.is_finite()) {
            return Err(GatewayError::InvalidBundle("temperature must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// The user message as sent to a live backend.
    pub fn render_user(&self) -> String {
        let mut out = String::new();
        for (i, part) in self.user_parts.iter().enumerate() {
            if i > 0 {
                out.push_str("\n\n");
            }
            match part {
                UserPart::Text(t) => out.push_str(t),
                UserPart::Snapshot(s) => {
                    out.push_str("## Current screen\n");
                    out.push_str(&s.to_text());
                }
            }
        }
        out
    }

    /// System and user text together, the haystack for content matchers.
    pub fn full_text(&self) -> String {
        format!("{}\n\n{}", self.system_text, self.render_user())
    }

    /// Canonical byte encoding, stable for identical inputs.
    pub fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("prompt bundle serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GatewayError {
    #[error("backend timed out")]
    Timeout,
    #[error("transport error: {0}")]
    Transport(String),
    #[error("script exhausted for role {0}")]
    ScriptExhausted(Role),
    #[error("invalid prompt bundle: {0}")]
    InvalidBundle(String),
    #[error("backend misconfigured: {0}")]
    Config(String),
}

/// A model backend. Implementations must be safe to share across sessions.
pub trait Backend: Send + Sync {
    fn complete(&self, bundle: &PromptBundle) -> Result<String, GatewayError>;
}

pub type Gateway = Arc<dyn Backend>;

/// A judged value plus the warning raised when the judge had to be bypassed.
#[derive(Debug, Clone, PartialEq)]
pub struct Judged<T> {
    pub value: T,
    pub warning: Option<String>,
}

impl<T> Judged<T> {
    pub fn clean(value: T) -> Self {
        Self { value, warning: None }
    }

    pub fn warned(value: T, warning: impl Into<String>) -> Self {
        Self { value, warning: Some(warning.into()) }
    }
}

/// A backend that fails every call, for exercising degradation paths.
#[derive(Debug, Default, Clone, Copy)]
pub struct FailingBackend;

impl Backend for FailingBackend {
    fn complete(&self, _bundle: &PromptBundle) -> Result<String, GatewayError> {
        Err(GatewayError::Transport("backend unavailable".into()))
    }
}

/// Routes selected roles to a different backend.
pub struct RoleRouter {
    default: Gateway,
    routes: BTreeMap<Role, Gateway>,
}

impl RoleRouter {
    pub fn new(default: Gateway) -> Self {
        Self { default, routes: BTreeMap::new() }
    }

    pub fn route(mut self, role: Role, backend: Gateway) -> Self {
        self.routes.insert(role, backend);
        self
    }
}

impl Backend for RoleRouter {
    fn complete(&self, bundle: &PromptBundle) -> Result<String, GatewayError> {
        self.routes.get(&bundle.role).unwrap_or(&self.default).complete(bundle)
    }
}
