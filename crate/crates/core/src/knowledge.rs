//! Document store and lexical retriever feeding task knowledge to the executor.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::RwLock;

use serde::{Deserialize, Serialize};

pub const DEFAULT_K: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Source {
    Manual,
    Web,
    TrajectoryDerived,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KnowledgeDoc {
    pub id: String,
    #[serde(default)]
    pub title: String,
    pub body: String,
    #[serde(default)]
    pub tags: Vec<String>,
    #[serde(default = "default_source")]
    pub source: Source,
}

fn default_source() -> Source {
    Source::Manual
}

impl KnowledgeDoc {
    pub fn new(id: impl Into<String>, title: impl Into<String>, body: impl Into<String>) -> Self {
        Self { id: id.into(), title: title.into(), body: body.into(), tags: Vec::new(), source: Source::Manual }
    }

    /// The text the retriever indexes.
    pub fn indexed_text(&self) -> String {
        format!("{} {} {}", self.title, self.body, self.tags.join(" "))
    }

    fn validate(&self) -> Result<(), KnowledgeError> {
        let bad = |reason: &str| KnowledgeError::InvalidDoc { id: self.id.clone(), reason: reason.into() };
        if self.id.is_empty() || !self.id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)) {
            return Err(bad("id must be non-empty and use only letters, digits, '-', '_' or '.'"));
        }
        if self.id.starts_with('.') {
            return Err(bad("id must not start with '.'"));
        }
        if self.body.trim().is_empty() {
            return Err(bad("body is empty"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub doc: KnowledgeDoc,
    pub score: f64,
}

/// Which text the executor retrieves knowledge for.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalScope {
    #[default]
    AtomicTask,
    Instruction,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum KnowledgeError {
    #[error("duplicate document id {0:?}")]
    DuplicateId(String),
    #[error("invalid document {id:?}: {reason}")]
    InvalidDoc { id: String, reason: String },
    #[error("cannot parse {path}: {reason}")]
    Parse { path: String, reason: String },
    #[error("io error: {0}")]
    Io(String),
}

/// Lowercase alphanumeric word tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()).map(str::to_lowercase).collect()
}

/// Term-weighting index over a fixed document list.
///
/// A document's score is the sum over distinct query terms of
/// `tf * ln(1 + 1/df)`, where `tf` is the term's share of the document's
/// tokens and `df` the number of documents containing it. The weight uses no
/// collection size, so documents sharing no query term never move the others.
#[derive(Debug, Clone, Default)]
pub struct LexicalIndex {
    docs: Vec<BTreeMap<String, usize>>,
    lengths: Vec<usize>,
    df: BTreeMap<String, usize>,
}

impl LexicalIndex {
    pub fn new<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut index = Self::default();
        for text in texts {
            let tokens = tokenize(text);
            let mut counts = BTreeMap::new();
            for t in &tokens {
                *counts.entry(t.clone()).or_insert(0) += 1;
            }
            for t in counts.keys() {
                *index.df.entry(t.clone()).or_insert(0) += 1;
            }
            index.lengths.push(tokens.len());
            index.docs.push(counts);
        }
        index
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn score(&self, query: &str, doc: usize) -> f64 {
        let terms: BTreeSet<String> = tokenize(query).into_iter().collect();
        let counts = &self.docs[doc];
        let len = self.lengths[doc];
        if len == 0 {
            return 0.0;
        }
        terms
            .iter()
            .filter_map(|t| {
                let c = *counts.get(t)?;
                let df = self.df[t] as f64;
                Some(c as f64 / len as f64 * (1.0 + 1.0 / df).ln())
            })
            .sum()
    }

    /// Positive-score documents, best first; equal scores keep index order.
    pub fn rank(&self, query: &str, k: usize) -> Vec<(usize, f64)> {
        let mut scored: Vec<(usize, f64)> =
            (0..self.docs.len()).map(|i| (i, self.score(query, i))).filter(|(_, s)| *s > 0.0).collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        scored.truncate(k);
        scored
    }
}

/// Concurrent document store. Readers see the store either before or after
/// an ingestion batch, never halfway.
#[derive(Debug, Default)]
pub struct KnowledgeStore {
    docs: RwLock<BTreeMap<String, KnowledgeDoc>>,
}

impl KnowledgeStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_docs(docs: Vec<KnowledgeDoc>) -> Result<Self, KnowledgeError> {
        let store = Self::new();
        store.ingest(docs)?;
        Ok(store)
    }

    /// Adds every document or none of them.
    pub fn ingest(&self, docs: Vec<KnowledgeDoc>) -> Result<usize, KnowledgeError> {
        let mut guard = self.docs.write().expect("knowledge lock");
        let mut seen = BTreeSet::new();
        for d in &docs {
            d.validate()?;
            if guard.contains_key(&d.id) || !seen.insert(d.id.as_str()) {
                return Err(KnowledgeError::DuplicateId(d.id.clone()));
            }
        }
        let n = docs.len();
        for d in docs {
            guard.insert(d.id.clone(), d);
        }
        Ok(n)
    }

    pub fn len(&self) -> usize {
        self.docs.read().expect("knowledge lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, id: &str) -> Option<KnowledgeDoc> {
        self.docs.read().expect("knowledge lock").get(id).cloned()
    }

    pub fn docs(&self) -> Vec<KnowledgeDoc> {
        self.docs.read().expect("knowledge lock").values().cloned().collect()
    }

    /// Top-`k` documents by lexical relevance; ties go to the smaller id.
    pub fn retrieve(&self, query: &str, k: usize) -> Vec<RetrievalResult> {
        let guard = self.docs.read().expect("knowledge lock");
        let docs: Vec<&KnowledgeDoc> = guard.values().collect();
        let texts: Vec<String> = docs.iter().map(|d| d.indexed_text()).collect();
        let index = LexicalIndex::new(texts.iter().map(String::as_str));
        index
            .rank(query, k)
            .into_iter()
            .map(|(i, score)| RetrievalResult { doc: docs[i].clone(), score })
            .collect()
    }

    /// Loads every `*.toml` document in a directory.
    pub fn load_dir(dir: &Path) -> Result<Self, KnowledgeError> {
        let store = Self::new();
        store.ingest(read_dir_docs(dir)?)?;
        Ok(store)
    }

    /// Writes one `<id>.toml` per document.
    pub fn save_dir(&self, dir: &Path) -> Result<(), KnowledgeError> {
        std::fs::create_dir_all(dir).map_err(|e| KnowledgeError::Io(e.to_string()))?;
        for d in self.docs() {
            let text = toml::to_string(&d).map_err(|e| KnowledgeError::Io(e.to_string()))?;
            std::fs::write(dir.join(format!("{}.toml", d.id)), text).map_err(|e| KnowledgeError::Io(e.to_string()))?;
        }
        Ok(())
    }
}

pub fn parse_doc(src: &str, path: &str) -> Result<KnowledgeDoc, KnowledgeError> {
    let doc: KnowledgeDoc =
        toml::from_str(src).map_err(|e| KnowledgeError::Parse { path: path.into(), reason: e.message().to_string() })?;
    doc.validate()?;
    Ok(doc)
}

/// Reads `*.toml` documents from a directory in file-name order.
pub fn read_dir_docs(dir: &Path) -> Result<Vec<KnowledgeDoc>, KnowledgeError> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| KnowledgeError::Io(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "toml"))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let src = std::fs::read_to_string(p).map_err(|e| KnowledgeError::Io(e.to_string()))?;
            parse_doc(&src, &p.display().to_string())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn store() -> KnowledgeStore {
        KnowledgeStore::with_docs(vec![
            KnowledgeDoc::new("tasks-priority", "Task colors", "In the Task app, red represents high priority"),
            KnowledgeDoc::new("wifi", "Wi-Fi", "Wi-Fi is toggled in Settings under the network section"),
            KnowledgeDoc::new("camera", "Camera modes", "Switch the camera to photo mode before pressing the shutter"),
        ])
        .unwrap()
    }

    #[test]
    fn priority_doc_ranks_first() {
        let got = store().retrieve("Tasks app high priority", 3);
        assert_eq!(got[0].doc.id, "tasks-priority");
    }

    #[test]
    fn empty_store_and_disjoint_query() {
        assert!(KnowledgeStore::new().retrieve("anything", 3).is_empty());
        let s = store();
        assert!(s.retrieve("zebra xylophone", 3).is_empty());
        let index = LexicalIndex::new(s.docs().iter().map(|d| d.indexed_text()).collect::<Vec<_>>().iter().map(String::as_str));
        assert!((0..3).all(|i| index.score("zebra xylophone", i) == 0.0));
    }

    #[test]
    fn ingest_is_atomic() {
        let s = store();
        assert_eq!(s.ingest(vec![]).unwrap(), 0);
        let err = s.ingest(vec![KnowledgeDoc::new("new", "", "fresh body"), KnowledgeDoc::new("wifi", "", "dup")]);
        assert_eq!(err, Err(KnowledgeError::DuplicateId("wifi".into())));
        assert_eq!(s.len(), 3);
        assert!(s.get("new").is_none());
        assert_eq!(s.ingest(vec![KnowledgeDoc::new("a", "", "x"), KnowledgeDoc::new("b", "", "y")]).unwrap(), 2);
    }

    #[test]
    fn rejects_bad_docs() {
        let s = KnowledgeStore::new();
        assert!(s.ingest(vec![KnowledgeDoc::new("ok", "t", "  ")]).is_err());
        assert!(s.ingest(vec![KnowledgeDoc::new("../x", "t", "b")]).is_err());
    }

    #[test]
    fn ties_break_by_id() {
        let s = KnowledgeStore::with_docs(vec![
            KnowledgeDoc::new("b", "", "alpha beta"),
            KnowledgeDoc::new("a", "", "alpha beta"),
        ])
        .unwrap();
        let ids: Vec<_> = s.retrieve("alpha", 3).into_iter().map(|r| r.doc.id).collect();
        assert_eq!(ids, ["a", "b"]);
    }

    #[test]
    fn directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = store();
        s.save_dir(dir.path()).unwrap();
        let loaded = KnowledgeStore::load_dir(dir.path()).unwrap();
        assert_eq!(loaded.docs(), s.docs());
    }

    fn word() -> impl Strategy<Value = String> {
        prop::sample::select(vec!["red", "task", "wifi", "photo", "alarm", "note", "price", "cart"]).prop_map(String::from)
    }

    proptest! {
        #[test]
        fn zero_score_docs_never_reorder(
            bodies in prop::collection::vec(prop::collection::vec(word(), 1..6), 1..12),
            query in prop::collection::vec(word(), 1..4),
        ) {
            let docs: Vec<_> = bodies.iter().enumerate()
                .map(|(i, b)| KnowledgeDoc::new(format!("d{i:02}"), "", b.join(" ")))
                .collect();
            let s = KnowledgeStore::with_docs(docs).unwrap();
            let q = query.join(" ");
            let before: Vec<_> = s.retrieve(&q, 20).into_iter().map(|r| (r.doc.id, r.score)).collect();
            s.ingest(vec![KnowledgeDoc::new("zz-irrelevant", "", "unrelated vocabulary entirely")]).unwrap();
            let after: Vec<_> = s.retrieve(&q, 20).into_iter().map(|r| (r.doc.id, r.score)).collect();
            prop_assert_eq!(before, after);
        }
    }
}
