//! Service configuration: a TOML file plus `GUI_AGENT_*` environment overrides.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use gui_agent::executor::ExecutorConfig;
use gui_agent::gateway::{Backend, GatewayConfig, HttpBackend, Script, ScriptedBackend};
use gui_agent::orchestration::PlanConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {reason}")]
    Parse { path: String, reason: String },
    #[error("bad value for {key}: {value:?}")]
    BadEnv { key: String, value: String },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RuntimeConfig {
    /// Live chat-completions endpoint. Ignored when `script` is set.
    pub gateway: Option<GatewayConfig>,
    /// Scripted backend used for every session that does not name its own.
    pub script: Option<PathBuf>,
    /// Directory sessions may pick a script from by file name.
    pub scripts_dir: Option<PathBuf>,
    pub scenarios_dir: PathBuf,
    pub knowledge_dir: Option<PathBuf>,
    pub data_dir: PathBuf,
    /// Shared bearer token for the HTTP API.
    pub token: Option<String>,
    pub executor: ExecutorConfig,
    pub plan: PlanConfig,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        Self {
            gateway: None,
            script: None,
            scripts_dir: None,
            scenarios_dir: PathBuf::from("fixtures/scenarios"),
            knowledge_dir: None,
            data_dir: PathBuf::from("data"),
            token: None,
            executor: ExecutorConfig::default(),
            plan: PlanConfig::default(),
        }
    }
}

fn parse_env<T: std::str::FromStr>(key: &str, value: String) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::BadEnv { key: key.into(), value })
}

impl RuntimeConfig {
    /// Reads a config file; relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let src = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Parse { path: path.display().to_string(), reason: e.to_string() })?;
        let mut cfg: Self = toml::from_str(&src)
            .map_err(|e| ConfigError::Parse { path: path.display().to_string(), reason: e.message().to_string() })?;
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut cfg.scenarios_dir);
        fix(&mut cfg.data_dir);
        cfg.script.iter_mut().for_each(fix);
        cfg.scripts_dir.iter_mut().for_each(fix);
        cfg.knowledge_dir.iter_mut().for_each(fix);
        Ok(cfg)
    }

    pub fn apply_env(&mut self, get: impl Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
        if let Some(v) = get("GUI_AGENT_SERVER_TOKEN") {
            self.token = Some(v);
        }
        if let Some(v) = get("GUI_AGENT_DATA_DIR") {
            self.data_dir = v.into();
        }
        if let Some(v) = get("GUI_AGENT_SCRIPT") {
            self.script = Some(v.into());
        }
        if let Some(v) = get("GUI_AGENT_MAX_STEPS") {
            self.executor.max_steps = parse_env("GUI_AGENT_MAX_STEPS", v)?;
        }
        if let Some(v) = get("GUI_AGENT_RESUME_BUDGET") {
            self.executor.resume_budget = parse_env("GUI_AGENT_RESUME_BUDGET", v)?;
        }
        if let Some(v) = get("GUI_AGENT_TEMPERATURE") {
            self.executor.temperature = parse_env("GUI_AGENT_TEMPERATURE", v)?;
        }
        if let Some(v) = get("GUI_AGENT_ENDPOINT") {
            match &mut self.gateway {
                Some(g) => g.endpoint = v,
                None => self.gateway = Some(GatewayConfig::new(v)),
            }
        }
        if let Some(g) = &mut self.gateway {
            g.apply_env(&get).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        self.executor.validate().map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    /// A fresh backend for one run. Scripted backends keep per-run state, so
    /// every session gets its own.
    pub fn backend(&self, script: Option<&Path>) -> Result<Arc<dyn Backend>, ConfigError> {
        if let Some(path) = script.or(self.script.as_deref()) {
            let s = Script::load_path(path).map_err(|e| ConfigError::Invalid(e.to_string()))?;
            return Ok(Arc::new(ScriptedBackend::new(s)));
        }
        match &self.gateway {
            Some(g) => Ok(Arc::new(HttpBackend::new(g.clone()).map_err(|e| ConfigError::Invalid(e.to_string()))?)),
            None => Err(ConfigError::Invalid("no script and no gateway configured".into())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn env_overrides_apply() {
        let mut c = RuntimeConfig::default();
        let env = |k: &str| match k {
            "GUI_AGENT_MAX_STEPS" => Some("12".to_string()),
            "GUI_AGENT_ENDPOINT" => Some("http://localhost:9/v1".to_string()),
            _ => None,
        };
        c.apply_env(env).unwrap();
        assert_eq!(c.executor.max_steps, 12);
        assert_eq!(c.gateway.unwrap().endpoint, "http://localhost:9/v1");
    }

    #[test]
    fn zero_steps_is_rejected() {
        let mut c = RuntimeConfig::default();
        assert!(c.apply_env(|k| (k == "GUI_AGENT_MAX_STEPS").then(|| "0".to_string())).is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "scenario_dir = \"x\"\n").unwrap();
        assert!(RuntimeConfig::load(&p).is_err());
        std::fs::write(&p, "scenarios_dir = \"sc\"\n[executor]\nmax_steps = 5\n").unwrap();
        let c = RuntimeConfig::load(&p).unwrap();
        assert_eq!(c.scenarios_dir, dir.path().join("sc"));
        assert_eq!(c.executor.max_steps, 5);
    }
}
