use serde::{Deserialize, Serialize};

use crate::gateway::{Backend, PromptBundle, Role};
use crate::markup::all_tags;

use super::{read_records, write_records, EvolveError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryOrigin {
    Seed,
    Expanded,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub id: String,
    pub text: String,
    pub origin: QueryOrigin,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent_id: Option<String>,
    /// Scenario task whose reset state and success check the query runs against.
    pub task: String,
}

impl QueryRecord {
    pub fn seed(id: impl Into<String>, text: impl Into<String>, task: impl Into<String>) -> Self {
        Self { id: id.into(), text: text.into(), origin: QueryOrigin::Seed, parent_id: None, task: task.into() }
    }
}

fn norm(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// Queries, unique by case-insensitive text.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct QueryPool {
    records: Vec<QueryRecord>,
}

impl QueryPool {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn records(&self) -> &[QueryRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&QueryRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn contains_text(&self, text: &str) -> bool {
        let n = norm(text);
        self.records.iter().any(|r| norm(&r.text) == n)
    }

    pub fn seeds(&self) -> Vec<QueryRecord> {
        self.records.iter().filter(|r| r.origin == QueryOrigin::Seed).cloned().collect()
    }

    /// Adds a record unless its text or id is already present. Expanded
    /// records must name a seed in the pool.
    pub fn insert(&mut self, record: QueryRecord) -> Result<bool, EvolveError> {
        if record.text.trim().is_empty() {
            return Err(EvolveError::InvalidConfig(format!("query {} has empty text", record.id)));
        }
        if record.origin == QueryOrigin::Expanded {
            let parent = record.parent_id.as_deref().and_then(|p| self.get(p));
            if !matches!(parent, Some(p) if p.origin == QueryOrigin::Seed) {
                return Err(EvolveError::InvalidConfig(format!("query {} does not reference a seed", record.id)));
            }
        }
        if self.contains_text(&record.text) || self.get(&record.id).is_some() {
            return Ok(false);
        }
        self.records.push(record);
        Ok(true)
    }

    pub fn from_jsonl(text: &str) -> Result<Self, EvolveError> {
        let mut pool = Self::new();
        // Seeds first so expansions can find their parents regardless of file order.
        let mut records: Vec<QueryRecord> = read_records(text)?;
        records.sort_by_key(|r| r.origin == QueryOrigin::Expanded);
        for r in records {
            pool.insert(r)?;
        }
        Ok(pool)
    }

    pub fn to_jsonl(&self) -> String {
        write_records(&self.records)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpandReport {
    pub added: Vec<QueryRecord>,
    /// Seeds whose expander call failed.
    pub warnings: Vec<String>,
}

const EXPANDER_SYSTEM: &str = "You write new phone-automation requests in the spirit of an example request. \
Each must be something a user could plausibly ask and must be answerable on the same apps. Wrap each \
request in <query>..</query>.";

fn expander_prompt(seed: &QueryRecord, n: usize) -> PromptBundle {
    PromptBundle::new(Role::QueryExpander, EXPANDER_SYSTEM)
        .text(format!("## Example request\n{}", seed.text))
        .text(format!("Write up to {n} new requests."))
        .meta("seed", seed.id.clone())
        .meta("instruction", seed.text.clone())
}

/// Asks the expander for up to `n_per_seed` variants of every seed in the
/// pool and adds the new ones.
pub fn expand_queries(pool: &mut QueryPool, n_per_seed: usize, gateway: &dyn Backend) -> Result<ExpandReport, EvolveError> {
    let seeds = pool.seeds();
    if seeds.is_empty() {
        return Err(EvolveError::EmptySeedPool);
    }
    let mut report = ExpandReport { added: Vec::new(), warnings: Vec::new() };
    for seed in &seeds {
        let reply = match gateway.complete(&expander_prompt(seed, n_per_seed)) {
            Ok(r) => r,
            Err(e) => {
                tracing::warn!(seed = %seed.id, error = %e, "query expander failed");
                report.warnings.push(format!("expander failed for {}: {e}", seed.id));
                continue;
            }
        };
        let mut next = pool.records().iter().filter(|r| r.parent_id.as_deref() == Some(&seed.id)).count() + 1;
        let mut taken = 0;
        for text in all_tags(&reply, "query") {
            if taken == n_per_seed {
                break;
            }
            let text = text.trim();
            if text.is_empty() {
                continue;
            }
            let record = QueryRecord {
                id: format!("{}-x{next}", seed.id),
                text: text.to_string(),
                origin: QueryOrigin::Expanded,
                parent_id: Some(seed.id.clone()),
                task: seed.task.clone(),
            };
            if pool.insert(record.clone())? {
                report.added.push(record);
                next += 1;
                taken += 1;
            }
        }
    }
    Ok(report)
}
