use std::path::Path;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{Backend, GatewayError, PromptBundle};

/// Connection settings for an OpenAI-compatible chat-completions endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GatewayConfig {
    pub endpoint: String,
    #[serde(default)]
    pub token: Option<String>,
    #[serde(default = "default_model")]
    pub model: String,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default = "default_retries")]
    pub retries: u32,
    #[serde(default = "default_backoff")]
    pub backoff_ms: u64,
}

fn default_model() -> String {
    "gui-agent".into()
}
fn default_timeout() -> u64 {
    60
}
fn default_retries() -> u32 {
    2
}
fn default_backoff() -> u64 {
    250
}

impl GatewayConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            token: None,
            model: default_model(),
            timeout_secs: default_timeout(),
            retries: default_retries(),
            backoff_ms: default_backoff(),
        }
    }

    pub fn from_toml(src: &str) -> Result<Self, GatewayError> {
        toml::from_str(src).map_err(|e| GatewayError::Config(e.to_string()))
    }

    /// Reads a TOML config file, then applies `GUI_AGENT_*` environment overrides.
    pub fn load(path: &Path) -> Result<Self, GatewayError> {
        let src = std::fs::read_to_string(path).map_err(|e| GatewayError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&src)?;
        cfg.apply_env(|k| std::env::var(k).ok())?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self, get: impl Fn(&str) -> Option<String>) -> Result<(), GatewayError> {
        if let Some(v) = get("GUI_AGENT_ENDPOINT") {
            self.endpoint = v;
        }
        if let Some(v) = get("GUI_AGENT_TOKEN") {
            self.token = Some(v);
        }
        if let Some(v) = get("GUI_AGENT_MODEL") {
            self.model = v;
        }
        if let Some(v) = get("GUI_AGENT_TIMEOUT_SECS") {
            self.timeout_secs = v.parse().map_err(|_| GatewayError::Config(format!("bad timeout {v:?}")))?;
        }
        if let Some(v) = get("GUI_AGENT_RETRIES") {
            self.retries = v.parse().map_err(|_| GatewayError::Config(format!("bad retry count {v:?}")))?;
        }
        Ok(())
    }
}

/// Blocking client for a chat-completions endpoint.
pub struct HttpBackend {
    config: GatewayConfig,
    agent: ureq::Agent,
}

impl HttpBackend {
    pub fn new(config: GatewayConfig) -> Result<Self, GatewayError> {
        if config.endpoint.trim().is_empty() {
            return Err(GatewayError::Config("endpoint is empty".into()));
        }
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs.max(1))))
            .http_status_as_error(false)
            .build()
            .new_agent();
        Ok(Self { config, agent })
    }

    fn body(&self, bundle: &PromptBundle) -> serde_json::Value {
        let mut body = json!({
            "model": self.config.model,
            "messages": [
                {"role": "system", "content": bundle.system_text},
                {"role": "user", "content": bundle.render_user()},
            ],
            "temperature": bundle.decoding.temperature,
            "max_tokens": bundle.decoding.max_tokens,
        });
        if let Some(seed) = bundle.decoding.seed {
            body["seed"] = json!(seed);
        }
        body
    }

    fn attempt(&self, body: &serde_json::Value) -> Result<String, Attempt> {
        let mut req = self.agent.post(&self.config.endpoint).header("content-type", "application/json");
        if let Some(token) = &self.config.token {
            req = req.header("authorization", format!("Bearer {token}"));
        }
        let resp = req.send_json(body).map_err(|e| match e {
            ureq::Error::Timeout(_) => Attempt::Retry(GatewayError::Timeout),
            other => Attempt::Retry(GatewayError::Transport(other.to_string())),
        })?;
        let status = resp.status().as_u16();
        let text = resp
            .into_body()
            .read_to_string()
            .map_err(|e| Attempt::Retry(GatewayError::Transport(e.to_string())))?;
        if status == 429 || status >= 500 {
            return Err(Attempt::Retry(GatewayError::Transport(format!("status {status}"))));
        }
        if status >= 400 {
            return Err(Attempt::Fatal(GatewayError::Transport(format!("status {status}: {text}"))));
        }
        let value: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| Attempt::Fatal(GatewayError::Transport(format!("bad response body: {e}"))))?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| Attempt::Fatal(GatewayError::Transport("response has no message content".into())))
    }
}

enum Attempt {
    Retry(GatewayError),
    Fatal(GatewayError),
}

impl Backend for HttpBackend {
    fn complete(&self, bundle: &PromptBundle) -> Result<String, GatewayError> {
        bundle.validate()?;
        let body = self.body(bundle);
        let mut delay = self.config.backoff_ms;
        let mut tries = 0;
        loop {
            match self.attempt(&body) {
                Ok(text) => return Ok(text),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retry(e)) => {
                    if tries >= self.config.retries {
                        return Err(e);
                    }
                    tries += 1;
                    tracing::warn!(role = %bundle.role, attempt = tries, error = %e, "retrying backend call");
                    thread::sleep(Duration::from_millis(delay));
                    delay = delay.saturating_mul(2);
                }
            }
        }
    }
}
