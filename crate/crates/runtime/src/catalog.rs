use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use serde::Serialize;

use gui_agent::sim::{Scenario, ScenarioError, ScreenRef};

/// Every scenario in a directory, by name.
#[derive(Debug, Clone, Default)]
pub struct Catalog {
    scenarios: BTreeMap<String, Arc<Scenario>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskSummary {
    pub id: String,
    pub instruction: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioSummary {
    pub name: String,
    pub apps: Vec<String>,
    pub start_screens: Vec<ScreenRef>,
    pub tasks: Vec<TaskSummary>,
}

impl Catalog {
    pub fn load_dir(dir: &Path) -> Result<Self, ScenarioError> {
        let mut paths: Vec<_> = std::fs::read_dir(dir)
            .map_err(|e| ScenarioError::Io(format!("{}: {e}", dir.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "toml"))
            .collect();
        paths.sort();
        let mut scenarios = BTreeMap::new();
        for p in paths {
            let s = Scenario::load_path(&p)?;
            scenarios.insert(s.name.clone(), Arc::new(s));
        }
        Ok(Self { scenarios })
    }

    pub fn from_scenarios(list: impl IntoIterator<Item = Scenario>) -> Self {
        Self { scenarios: list.into_iter().map(|s| (s.name.clone(), Arc::new(s))).collect() }
    }

    pub fn get(&self, name: &str) -> Option<&Arc<Scenario>> {
        self.scenarios.get(name)
    }

    pub fn summaries(&self) -> Vec<ScenarioSummary> {
        self.scenarios
            .values()
            .map(|s| ScenarioSummary {
                name: s.name.clone(),
                apps: s.app_names().into_iter().map(str::to_string).collect(),
                start_screens: s.start_screens.clone(),
                tasks: s.tasks.iter().map(|t| TaskSummary { id: t.id.clone(), instruction: t.instruction.clone() }).collect(),
            })
            .collect()
    }
}
