//! Per-user intent memory: procedures learned from past runs, plus stable
//! preferences, used to rewrite a new request before it is executed.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::action::Action;
use crate::executor::Trajectory;
use crate::gateway::{Backend, PromptBundle, Role};
use crate::knowledge::{tokenize, LexicalIndex};
use crate::markup::{all_tags, find_tag, tag_text};

/// Answers given this many times or more become a preference when the
/// profile analyzer is unavailable.
pub const MIN_FALLBACK_EVIDENCE: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SopRecord {
    pub id: String,
    pub query: String,
    pub sop: Vec<String>,
    pub source_trajectory_id: String,
    pub user_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Preference {
    pub topic: String,
    pub value: String,
    pub evidence: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserProfile {
    pub user_id: String,
    pub preferences: Vec<Preference>,
    /// Unix seconds.
    pub updated_at: u64,
}

impl UserProfile {
    pub fn empty(user_id: impl Into<String>) -> Self {
        Self { user_id: user_id.into(), preferences: Vec::new(), updated_at: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PersonalizedQuery {
    pub original: String,
    pub rewritten: String,
    pub sop: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matched_record_id: Option<String>,
    #[serde(default)]
    pub preferences_used: Vec<Preference>,
}

impl PersonalizedQuery {
    fn identity(query: &str) -> Self {
        Self {
            original: query.to_string(),
            rewritten: query.to_string(),
            sop: Vec::new(),
            matched_record_id: None,
            preferences_used: Vec::new(),
        }
    }

    /// The text handed to the executor: the rewritten request, followed by
    /// the procedure as guidance when there is one.
    pub fn instruction(&self) -> String {
        if self.sop.is_empty() {
            return self.rewritten.clone();
        }
        let steps: Vec<String> = self.sop.iter().enumerate().map(|(i, s)| format!("{}. {s}", i + 1)).collect();
        format!("{}\nSuggested steps:\n{}", self.rewritten, steps.join("\n"))
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PersonaError {
    #[error("invalid user id {0:?}")]
    InvalidUser(String),
    #[error("{path}: {reason}")]
    Decode { path: String, reason: String },
    #[error("io error: {0}")]
    Io(String),
}

/// Output of the build phase.
#[derive(Debug, Clone, PartialEq)]
pub struct IntentFlows {
    pub sops: Vec<SopRecord>,
    pub profile: UserProfile,
    pub warnings: Vec<String>,
}

fn norm(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// Action summaries of the executed steps, without the closing terminate or
/// waits, with consecutive repeats merged.
pub fn distill_sop(trajectory: &Trajectory) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for s in trajectory.steps.iter().filter(|s| s.executed() && s.error.is_none()) {
        if matches!(s.action, Some(Action::Terminate { .. } | Action::Wait { .. })) {
            continue;
        }
        let Some(summary) = s.response.as_ref().map(|r| r.action_summary.trim()) else { continue };
        if summary.is_empty() || out.last().is_some_and(|l| l.eq_ignore_ascii_case(summary)) {
            continue;
        }
        out.push(summary.to_string());
    }
    out
}

const FILLER: &[&str] = &["which", "what", "would", "you", "like", "do", "does", "want", "the", "a", "an", "to", "should", "i", "is", "your"];

/// Short topic name for a clarifying question: its content words.
pub fn question_topic(question: &str) -> String {
    let words: Vec<String> = tokenize(question).into_iter().filter(|w| !FILLER.contains(&w.as_str())).collect();
    if words.is_empty() {
        norm(question)
    } else {
        words.join(" ")
    }
}

/// Preferences from repeated answers to the same question.
pub fn aggregate_answers(history: &[Trajectory]) -> Vec<Preference> {
    let mut by_topic: BTreeMap<String, BTreeMap<String, (String, Vec<String>)>> = BTreeMap::new();
    for t in history {
        for qa in t.qa_pairs() {
            let answer = qa.answer.trim();
            if answer.is_empty() {
                continue;
            }
            let entry = by_topic
                .entry(question_topic(&qa.question))
                .or_default()
                .entry(norm(answer))
                .or_insert_with(|| (answer.to_string(), Vec::new()));
            if !entry.1.contains(&t.id) {
                entry.1.push(t.id.clone());
            }
        }
    }
    let mut out = Vec::new();
    for (topic, answers) in by_topic {
        // Most evidence wins; ties go to the value seen first in sorted order.
        let best = answers.into_values().filter(|(_, ev)| ev.len() >= MIN_FALLBACK_EVIDENCE).max_by(|a, b| {
            a.1.len().cmp(&b.1.len()).then_with(|| b.0.cmp(&a.0))
        });
        if let Some((value, evidence)) = best {
            out.push(Preference { topic, value, evidence });
        }
    }
    out
}

const PROFILE_SYSTEM: &str = "You study a user's past phone-assistant sessions and note stable preferences. \
Reply with <preferences>[{\"topic\":..,\"value\":..,\"evidence\":[session ids]}]</preferences>; an empty list \
is fine.";

fn profile_prompt(history: &[Trajectory], user_id: &str) -> PromptBundle {
    let sessions: Vec<String> = history
        .iter()
        .map(|t| {
            let qa: Vec<String> = t.qa_pairs().iter().map(|p| format!("  Q: {} A: {}", p.question, p.answer)).collect();
            let steps: Vec<String> = t.history().entries.iter().map(|e| format!("  - {e}")).collect();
            format!("[{}] {}\n{}\n{}", t.id, t.instruction, qa.join("\n"), steps.join("\n"))
        })
        .collect();
    PromptBundle::new(Role::ProfileAnalyzer, PROFILE_SYSTEM)
        .text(format!("## Sessions\n{}", sessions.join("\n")))
        .meta("user", user_id)
}

fn parse_preferences(text: &str, known: &BTreeSet<&str>) -> Option<Vec<Preference>> {
    let body = tag_text(text, "preferences")?;
    let raw: Vec<Preference> = serde_json::from_str(body.trim()).ok()?;
    Some(
        raw.into_iter()
            .map(|mut p| {
                p.evidence.retain(|id| known.contains(id.as_str()));
                p
            })
            .filter(|p| !p.evidence.is_empty() && !p.topic.trim().is_empty() && !p.value.trim().is_empty())
            .collect(),
    )
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Builds the procedure records and the profile for one user. Procedures
/// come from the first successful run of each distinct request.
pub fn extract_intention_flows(history: &[Trajectory], user_id: &str, gateway: &dyn Backend) -> IntentFlows {
    let mut warnings = Vec::new();
    let mut sops: Vec<SopRecord> = Vec::new();
    let mut seen = BTreeSet::new();
    for t in history.iter().filter(|t| t.outcome.is_success()) {
        if !seen.insert(norm(&t.instruction)) {
            continue;
        }
        let sop = distill_sop(t);
        if sop.is_empty() {
            continue;
        }
        sops.push(SopRecord {
            id: format!("{user_id}-sop{}", sops.len() + 1),
            query: t.instruction.clone(),
            sop,
            source_trajectory_id: t.id.clone(),
            user_id: user_id.to_string(),
        });
    }

    let preferences = if history.is_empty() {
        Vec::new()
    } else {
        let known: BTreeSet<&str> = history.iter().map(|t| t.id.as_str()).collect();
        match gateway.complete(&profile_prompt(history, user_id)) {
            Ok(reply) => match parse_preferences(&reply, &known) {
                Some(p) => p,
                None => {
                    warnings.push("profile analyzer reply unreadable; aggregated answers instead".to_string());
                    aggregate_answers(history)
                }
            },
            Err(e) => {
                warnings.push(format!("profile analyzer failed: {e}; aggregated answers instead"));
                aggregate_answers(history)
            }
        }
    };
    IntentFlows { sops, profile: UserProfile { user_id: user_id.to_string(), preferences, updated_at: now() }, warnings }
}

/// The stored record most similar to `query`, if any scores above zero.
pub fn best_match<'a>(query: &str, sops: &'a [SopRecord]) -> Option<&'a SopRecord> {
    let index = LexicalIndex::new(sops.iter().map(|r| r.query.as_str()));
    index.rank(query, 1).first().map(|(i, _)| &sops[*i])
}

/// Preferences whose topic shares a word with the request.
pub fn relevant_preferences(query: &str, profile: &UserProfile) -> Vec<Preference> {
    let words: BTreeSet<String> = tokenize(query).into_iter().collect();
    profile.preferences.iter().filter(|p| tokenize(&p.topic).iter().any(|w| words.contains(w))).cloned().collect()
}

const SOP_SYSTEM: &str = "Adapt a procedure the user followed for an earlier request to a new request. \
Reply with <sop><step>..</step>...</sop>.";

const REWRITE_SYSTEM: &str = "Rewrite the user's request so it states their known preferences explicitly. \
Keep the intent unchanged. Reply with <query>..</query>.";

/// Template rewrite used when the rewriter is unavailable.
pub fn append_preferences(query: &str, prefs: &[Preference]) -> String {
    let parts: Vec<String> = prefs.iter().map(|p| format!("{}: {}", p.topic, p.value)).collect();
    format!("{query} ({})", parts.join("; "))
}

/// Rewrites `query` with what is known about the user. Model failures fall
/// back to the stored procedure and the template rewrite, with a warning.
pub fn personalize(
    query: &str,
    sops: &[SopRecord],
    profile: &UserProfile,
    gateway: &dyn Backend,
) -> (PersonalizedQuery, Vec<String>) {
    let mut warnings = Vec::new();
    let matched = best_match(query, sops);
    let prefs = relevant_preferences(query, profile);
    if matched.is_none() && prefs.is_empty() {
        return (PersonalizedQuery::identity(query), warnings);
    }

    let sop = match matched {
        None => Vec::new(),
        Some(r) => {
            let bundle = PromptBundle::new(Role::SopExtractor, SOP_SYSTEM)
                .text(format!("## Earlier request\n{}", r.query))
                .text(format!("## Procedure\n{}", r.sop.iter().map(|s| format!("- {s}")).collect::<Vec<_>>().join("\n")))
                .text(format!("## New request\n{query}"))
                .meta("instruction", query)
                .meta("record", r.id.clone());
            let adapted: Result<Vec<String>, _> = gateway.complete(&bundle).map(|reply| {
                find_tag(&reply, "sop")
                    .map(|s| all_tags(s.inner, "step").into_iter().map(|x| x.trim().to_string()).filter(|x| !x.is_empty()).collect())
                    .unwrap_or_default()
            });
            match adapted {
                Ok(steps) if !steps.is_empty() => steps,
                Ok(_) => {
                    warnings.push("procedure extractor reply unreadable; used the stored procedure".into());
                    r.sop.clone()
                }
                Err(e) => {
                    warnings.push(format!("procedure extractor failed: {e}; used the stored procedure"));
                    r.sop.clone()
                }
            }
        }
    };

    let rewritten = if prefs.is_empty() {
        query.to_string()
    } else {
        let listed: Vec<String> = prefs.iter().map(|p| format!("- {}: {}", p.topic, p.value)).collect();
        let bundle = PromptBundle::new(Role::QueryRewriter, REWRITE_SYSTEM)
            .text(format!("## Request\n{query}"))
            .text(format!("## Preferences\n{}", listed.join("\n")))
            .meta("instruction", query);
        match gateway.complete(&bundle).map(|r| tag_text(&r, "query").map(|q| q.trim().to_string())) {
            Ok(Some(q)) if !q.is_empty() => q,
            Ok(_) => {
                warnings.push("query rewriter reply unreadable; appended preferences".into());
                append_preferences(query, &prefs)
            }
            Err(e) => {
                warnings.push(format!("query rewriter failed: {e}; appended preferences"));
                append_preferences(query, &prefs)
            }
        }
    };
    let pq = PersonalizedQuery {
        original: query.to_string(),
        rewritten,
        sop,
        matched_record_id: matched.map(|r| r.id.clone()),
        preferences_used: prefs,
    };
    (pq, warnings)
}

/// Per-user files under one root: `<root>/<user>/sops.jsonl` and
/// `<root>/<user>/profile.json`.
#[derive(Debug, Clone)]
pub struct PersonaStore {
    root: PathBuf,
}

fn valid_user(user: &str) -> Result<(), PersonaError> {
    let ok = !user.is_empty() && user.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
    if ok {
        Ok(())
    } else {
        Err(PersonaError::InvalidUser(user.to_string()))
    }
}

fn io(path: &Path, e: std::io::Error) -> PersonaError {
    PersonaError::Io(format!("{}: {e}", path.display()))
}

fn write_atomic(path: &Path, text: &str) -> Result<(), PersonaError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, text).map_err(|e| io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io(path, e))
}

impl PersonaStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn save(&self, flows: &IntentFlows) -> Result<(), PersonaError> {
        let user = &flows.profile.user_id;
        valid_user(user)?;
        let dir = self.root.join(user);
        fs::create_dir_all(&dir).map_err(|e| io(&dir, e))?;
        let sops: String = flows.sops.iter().map(|r| serde_json::to_string(r).expect("records serialize") + "\n").collect();
        write_atomic(&dir.join("sops.jsonl"), &sops)?;
        write_atomic(&dir.join("profile.json"), &serde_json::to_string_pretty(&flows.profile).expect("profile serializes"))
    }

    /// A user with no files has no records and an empty profile.
    pub fn load(&self, user: &str) -> Result<(Vec<SopRecord>, UserProfile), PersonaError> {
        valid_user(user)?;
        let dir = self.root.join(user);
        let sops_path = dir.join("sops.jsonl");
        let sops = match fs::read_to_string(&sops_path) {
            Ok(text) => text
                .lines()
                .enumerate()
                .filter(|(_, l)| !l.trim().is_empty())
                .map(|(i, l)| {
                    serde_json::from_str(l).map_err(|e| PersonaError::Decode {
                        path: format!("{}:{}", sops_path.display(), i + 1),
                        reason: e.to_string(),
                    })
                })
                .collect::<Result<Vec<SopRecord>, _>>()?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(io(&sops_path, e)),
        };
        let profile_path = dir.join("profile.json");
        let profile = match fs::read_to_string(&profile_path) {
            Ok(text) => serde_json::from_str(&text)
                .map_err(|e| PersonaError::Decode { path: profile_path.display().to_string(), reason: e.to_string() })?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => UserProfile::empty(user),
            Err(e) => return Err(io(&profile_path, e)),
        };
        Ok((sops, profile))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::FailingBackend;
    use proptest::prelude::*;

    fn record(id: usize, query: &str) -> SopRecord {
        SopRecord {
            id: format!("r{id}"),
            query: query.into(),
            sop: vec!["step".into()],
            source_trajectory_id: format!("t{id}"),
            user_id: "u".into(),
        }
    }

    #[test]
    fn no_evidence_is_identity() {
        let (pq, w) = personalize("Order a hamburger", &[], &UserProfile::empty("u"), &FailingBackend);
        assert_eq!(pq, PersonalizedQuery::identity("Order a hamburger"));
        assert!(w.is_empty());
        assert_eq!(pq.instruction(), "Order a hamburger");
    }

    #[test]
    fn empty_history_gives_empty_flows() {
        let f = extract_intention_flows(&[], "u", &FailingBackend);
        assert!(f.sops.is_empty() && f.profile.preferences.is_empty() && f.warnings.is_empty());
    }

    #[test]
    fn topics_drop_filler_words() {
        assert_eq!(question_topic("Which hamburger flavor would you like?"), "hamburger flavor");
    }

    #[test]
    fn unrelated_preferences_are_left_out() {
        let profile = UserProfile {
            user_id: "u".into(),
            preferences: vec![Preference { topic: "hamburger flavor".into(), value: "Veggie".into(), evidence: vec!["t1".into()] }],
            updated_at: 0,
        };
        let (pq, _) = personalize("Turn on Wi-Fi", &[], &profile, &FailingBackend);
        assert_eq!(pq.rewritten, "Turn on Wi-Fi");
        let (pq, w) = personalize("Order a hamburger", &[], &profile, &FailingBackend);
        assert_eq!(pq.rewritten, "Order a hamburger (hamburger flavor: Veggie)");
        assert_eq!(w.len(), 1);
    }

    #[test]
    fn bad_user_ids_are_refused() {
        let store = PersonaStore::new("/nonexistent");
        assert!(matches!(store.load("../etc"), Err(PersonaError::InvalidUser(_))));
    }

    proptest! {
        #[test]
        fn match_is_the_argmax_of_the_retrieval_score(
            queries in proptest::collection::vec(proptest::collection::vec(0usize..8, 1..6), 1..20),
            query in proptest::collection::vec(0usize..8, 1..4),
        ) {
            const WORDS: [&str; 8] = ["order", "burger", "wifi", "alarm", "photo", "note", "search", "price"];
            let text = |ws: &[usize]| ws.iter().map(|&w| WORDS[w]).collect::<Vec<_>>().join(" ");
            let records: Vec<SopRecord> = queries.iter().enumerate().map(|(i, q)| record(i, &text(q))).collect();
            let q = text(&query);
            let index = LexicalIndex::new(records.iter().map(|r| r.query.as_str()));
            let mut best: Option<(usize, f64)> = None;
            for i in 0..records.len() {
                let s = index.score(&q, i);
                if s > 0.0 && best.is_none_or(|(_, b)| s > b) {
                    best = Some((i, s));
                }
            }
            prop_assert_eq!(best_match(&q, &records).map(|r| r.id.clone()), best.map(|(i, _)| records[i].id.clone()));
        }
    }
}
