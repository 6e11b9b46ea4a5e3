use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::events::RunEvent;
use crate::executor::{ExecError, ExecutorConfig, Origin, RunContext, TaskRun, Trajectory};
use crate::gateway::Backend;
use crate::sim::{Environment, Scenario, ScreenRef};

use super::{EvolveError, QueryRecord};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Diversity {
    pub vary_start: bool,
    pub temperature: f64,
}

impl Default for Diversity {
    fn default() -> Self {
        Self { vary_start: false, temperature: 0.0 }
    }
}

/// One repeat of a rollout. A failed run keeps whatever trajectory it had.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatOutcome {
    pub repeat: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start: Option<ScreenRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trajectory: Option<Trajectory>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Runs `query` `repeats` times, each on a fresh environment. Repeats run one
/// after another so a scripted backend sees them in a fixed order.
pub fn rollout(
    query: &QueryRecord,
    scenario: &Arc<Scenario>,
    repeats: usize,
    gateway: &dyn Backend,
    diversity: Diversity,
    config: &ExecutorConfig,
    seed: u64,
) -> Result<Vec<RepeatOutcome>, EvolveError> {
    if repeats == 0 {
        return Err(EvolveError::InvalidConfig("repeats must be at least 1".into()));
    }
    let starts = &scenario.start_screens;
    if diversity.vary_start && starts.len() < 2 {
        return Err(EvolveError::InvalidConfig("varying the start needs at least two start screens".into()));
    }
    if scenario.task(&query.task).is_none() {
        return Err(EvolveError::UnknownTask(query.task.clone()));
    }
    let cfg = ExecutorConfig { temperature: diversity.temperature, ask: false, ..config.clone() };
    cfg.validate().map_err(|e| EvolveError::InvalidConfig(e.to_string()))?;
    let ctx = RunContext::new(gateway, &cfg);

    let mut out = Vec::with_capacity(repeats);
    for i in 0..repeats {
        let start = diversity.vary_start.then(|| starts[i % starts.len()].clone());
        let mut env = Environment::new(Arc::clone(scenario));
        env.reset_at(&query.task, seed, start.as_ref())?;
        let origin = Origin { scenario: scenario.name.clone(), task_id: query.task.clone(), seed, start: start.clone() };
        let mut sink = |_e: RunEvent| {};
        let mut run = TaskRun::start(0, format!("{}-r{i}", query.id), &query.text, Some(origin), &cfg, &mut sink)
            .map_err(|e| EvolveError::InvalidConfig(e.to_string()))?;
        let result = run.run_to_end(&mut env, &ctx, &mut sink, &mut |_| None);
        let (trajectory, error) = match result {
            Ok(_) => (Some(run.into_trajectory()), None),
            Err(ExecError::Backend { error, trajectory }) => (Some(*trajectory), Some(error.to_string())),
            Err(e) => (None, Some(e.to_string())),
        };
        out.push(RepeatOutcome { repeat: i, start, trajectory, error });
    }
    Ok(out)
}
