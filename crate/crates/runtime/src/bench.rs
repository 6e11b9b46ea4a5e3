//! Task suites run one task at a time, each with a fresh backend and
//! environment, reported as a fixed-width table.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use gui_agent::executor::{run_task, ExecutorConfig, RunContext};
use gui_agent::gateway::Backend;
use gui_agent::knowledge::KnowledgeStore;
use gui_agent::sim::{Environment, Scenario};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSuite {
    pub scenario: PathBuf,
    #[serde(default)]
    pub script: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    pub tasks: Vec<String>,
    #[serde(default)]
    pub executor: Option<ExecutorConfig>,
}

impl BenchSuite {
    /// Relative paths resolve against the suite file's directory.
    pub fn load(path: &Path) -> Result<Self, String> {
        let src = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let mut suite: Self = toml::from_str(&src).map_err(|e| format!("{}: {}", path.display(), e.message()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        if suite.scenario.is_relative() {
            suite.scenario = base.join(&suite.scenario);
        }
        if let Some(s) = &mut suite.script {
            if s.is_relative() {
                *s = base.join(&*s);
            }
        }
        if suite.tasks.is_empty() {
            return Err(format!("{}: suite has no tasks", path.display()));
        }
        Ok(suite)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub task: String,
    pub success: bool,
    pub steps: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub scenario: String,
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn successes(&self) -> usize {
        self.rows.iter().filter(|r| r.success).count()
    }

    pub fn success_rate(&self) -> f64 {
        if self.rows.is_empty() {
            0.0
        } else {
            self.successes() as f64 / self.rows.len() as f64
        }
    }

    pub fn table(&self) -> String {
        let w = self.rows.iter().map(|r| r.task.len()).max().unwrap_or(4).max(4);
        let mut out = format!("{:<w$}  {:<7}  {:>5}  reason\n", "task", "result", "steps");
        out.push_str(&format!("{}  {}  {}  {}\n", "-".repeat(w), "-".repeat(7), "-".repeat(5), "-".repeat(6)));
        for r in &self.rows {
            let result = if r.success { "success" } else { "failure" };
            out.push_str(format!("{:<w$}  {:<7}  {:>5}  {}", r.task, result, r.steps, r.reason).trim_end());
            out.push('\n');
        }
        out.push_str(&format!(
            "success rate: {}/{} ({:.1}%)\n",
            self.successes(),
            self.rows.len(),
            100.0 * self.success_rate()
        ));
        out
    }
}

/// Runs every task in the suite. `backend` is called once per task.
pub fn run_bench(
    suite: &BenchSuite,
    scenario: &Arc<Scenario>,
    config: &ExecutorConfig,
    knowledge: Option<&KnowledgeStore>,
    backend: &dyn Fn() -> Result<Arc<dyn Backend>, String>,
) -> Result<BenchReport, String> {
    let config = suite.executor.as_ref().unwrap_or(config);
    let mut rows = Vec::with_capacity(suite.tasks.len());
    for id in &suite.tasks {
        let task = scenario.task(id).ok_or_else(|| format!("unknown task {id:?}"))?;
        let gw = backend()?;
        let mut env = Environment::new(Arc::clone(scenario));
        env.reset(id, suite.seed).map_err(|e| e.to_string())?;
        let mut ctx = RunContext::new(gw.as_ref(), config);
        if let Some(k) = knowledge {
            ctx = ctx.with_knowledge(k);
        }
        let row = match run_task(&task.instruction, &mut env, &ctx) {
            Ok(t) => BenchRow {
                task: id.clone(),
                success: t.outcome.is_success(),
                steps: t.steps.iter().filter(|s| s.executed()).count(),
                reason: if t.outcome.is_success() { String::new() } else { t.outcome.reason.clone() },
            },
            Err(e) => BenchRow { task: id.clone(), success: false, steps: 0, reason: e.to_string() },
        };
        rows.push(row);
    }
    Ok(BenchReport { scenario: scenario.name.clone(), rows })
}
