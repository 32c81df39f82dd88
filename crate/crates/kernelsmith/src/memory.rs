//! Append-only memory bank with similarity-ranked candidate pools.
//!
//! The bank stores heterogeneous knowledge (API templates, experience
//! summaries, code traces, best practices). Retrieval produces an
//! over-sized candidate pool (`K = ceil(lambda * N)`) ranked by similarity;
//! value filtering down to `N` happens in [`crate::valuation`].

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MemoryError {
    #[error("duplicate entry id: {0}")]
    DuplicateId(String),
    #[error("invalid entry {id}: {reason}")]
    InvalidEntry { id: String, reason: String },
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid retrieval config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryKind {
    ApiTemplate,
    Experience,
    Trace,
    BestPractice,
}

/// Digest of a verifier outcome carried on trace entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeDigest {
    pub feasible: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub latency_ms: Option<f64>,
}

/// One unit of retrievable knowledge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryEntry {
    pub id: String,
    pub kind: EntryKind,
    pub content: String,
    pub summary: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f64>>,
    pub tags: BTreeSet<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub origin_task: Option<String>,
    pub origin_iteration: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub outcome: Option<OutcomeDigest>,
}

impl MemoryEntry {
    pub fn new(id: impl Into<String>, kind: EntryKind, content: impl Into<String>, summary: impl Into<String>) -> Self {
        MemoryEntry {
            id: id.into(),
            kind,
            content: content.into(),
            summary: summary.into(),
            embedding: None,
            tags: BTreeSet::new(),
            origin_task: None,
            origin_iteration: 0,
            outcome: None,
        }
    }

    pub fn with_tags<I: IntoIterator<Item = String>>(mut self, tags: I) -> Self {
        self.tags = tags.into_iter().collect();
        self
    }

    fn validate(&self) -> Result<(), MemoryError> {
        if let Some(emb) = &self.embedding {
            let norm: f64 = emb.iter().map(|x| x * x).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(MemoryError::InvalidEntry {
                    id: self.id.clone(),
                    reason: format!("embedding L2 norm {norm} not within 1e-6 of 1"),
                });
            }
        }
        if self.kind == EntryKind::Trace && self.outcome.is_none() {
            return Err(MemoryError::InvalidEntry {
                id: self.id.clone(),
                reason: "trace entry requires an outcome snapshot".into(),
            });
        }
        if self.kind == EntryKind::ApiTemplate && self.origin_task.is_some() {
            return Err(MemoryError::InvalidEntry {
                id: self.id.clone(),
                reason: "api_template entry must not carry an origin_task".into(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityMode {
    Lexical,
    Embedding,
    Hybrid,
}

/// Retrieval configuration: final context size `N`, over-retrieval
/// multiplier `lambda` (pool size `K = ceil(lambda * N)`), and the hybrid
/// drafting policy knobs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    pub final_count_n: usize,
    pub over_retrieval_lambda: f64,
    pub similarity_mode: SimilarityMode,
    /// Per-kind minimum counts for the hybrid drafting policy.
    #[serde(default)]
    pub kind_quotas: BTreeMap<EntryKind, usize>,
    /// Tags marking static-infrastructure API templates that are always
    /// included in drafting pools.
    #[serde(default)]
    pub infra_tags: BTreeSet<String>,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig {
            final_count_n: 4,
            over_retrieval_lambda: 2.0,
            similarity_mode: SimilarityMode::Lexical,
            kind_quotas: BTreeMap::new(),
            infra_tags: BTreeSet::new(),
        }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<(), MemoryError> {
        if self.final_count_n == 0 {
            return Err(MemoryError::BadConfig("final_count_n must be positive".into()));
        }
        if self.over_retrieval_lambda < 1.0 {
            return Err(MemoryError::BadConfig("over_retrieval_lambda must be >= 1".into()));
        }
        Ok(())
    }

    /// Candidate pool size `K = ceil(lambda * N)`.
    pub fn pool_size_k(&self) -> usize {
        (self.over_retrieval_lambda * self.final_count_n as f64).ceil() as usize
    }
}

/// A retrieval query: free text plus tags. The optional embedding is used
/// in embedding/hybrid similarity modes.
#[derive(Debug, Clone, Default)]
pub struct TaskQuery {
    pub text: String,
    pub tags: BTreeSet<String>,
    pub embedding: Option<Vec<f64>>,
}

impl TaskQuery {
    pub fn text(text: impl Into<String>) -> Self {
        TaskQuery { text: text.into(), ..Default::default() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredEntry {
    pub entry: MemoryEntry,
    pub score: f64,
}

/// The self-evolving memory bank. Append-only within a run; `generation`
/// counts appends.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MemoryBank {
    entries: BTreeMap<String, MemoryEntry>,
    generation: u64,
}

impl MemoryBank {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn get(&self, id: &str) -> Option<&MemoryEntry> {
        self.entries.get(id)
    }

    pub fn entries(&self) -> impl Iterator<Item = &MemoryEntry> {
        self.entries.values()
    }

    pub fn append(&mut self, entry: MemoryEntry) -> Result<(), MemoryError> {
        entry.validate()?;
        if self.entries.contains_key(&entry.id) {
            return Err(MemoryError::DuplicateId(entry.id));
        }
        self.entries.insert(entry.id.clone(), entry);
        self.generation += 1;
        Ok(())
    }

    /// Bank restricted to entries originating from `task_id`. Used by the
    /// per-task refinement baseline.
    pub fn restricted_to_task(&self, task_id: &str) -> MemoryBank {
        let entries: BTreeMap<String, MemoryEntry> = self
            .entries
            .iter()
            .filter(|(_, e)| e.origin_task.as_deref() == Some(task_id))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        MemoryBank { generation: entries.len() as u64, entries }
    }

    /// Similarity-ranked candidate pool of up to `K` entries, descending by
    /// score, ties broken by ascending id.
    pub fn candidate_pool(&self, query: &TaskQuery, cfg: &RetrievalConfig) -> Result<Vec<ScoredEntry>, MemoryError> {
        cfg.validate()?;
        Ok(self.ranked(query, cfg, cfg.pool_size_k(), |_| true))
    }

    /// Similarity-ranked pool restricted to entries passing `filter`; used
    /// for bottleneck-conditioned refinement retrieval.
    pub fn candidate_pool_where<F: Fn(&MemoryEntry) -> bool>(
        &self,
        query: &TaskQuery,
        cfg: &RetrievalConfig,
        filter: F,
    ) -> Result<Vec<ScoredEntry>, MemoryError> {
        cfg.validate()?;
        Ok(self.ranked(query, cfg, cfg.pool_size_k(), filter))
    }

    fn ranked<F: Fn(&MemoryEntry) -> bool>(
        &self,
        query: &TaskQuery,
        cfg: &RetrievalConfig,
        limit: usize,
        filter: F,
    ) -> Vec<ScoredEntry> {
        let index = TfIdfIndex::build(self.entries.values().map(|e| e.summary.as_str()));
        let query_vec = index.vectorize(&query.text);
        let mut scored: Vec<ScoredEntry> = self
            .entries
            .values()
            .filter(|e| filter(e))
            .map(|e| ScoredEntry { entry: e.clone(), score: similarity(query, e, cfg.similarity_mode, &index, &query_vec) })
            .collect();
        scored.sort_by(|a, b| {
            b.score
                .partial_cmp(&a.score)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| a.entry.id.cmp(&b.entry.id))
        });
        scored.truncate(limit);
        scored
    }

    /// Drafting-stage hybrid pool: static-infrastructure API templates,
    /// exact-name API lookups, then semantic candidates over experiential
    /// kinds, in that priority order, deduplicated and capped at `K`.
    pub fn hybrid_draft_pool(
        &self,
        query: &TaskQuery,
        cfg: &RetrievalConfig,
        referenced_names: &BTreeSet<String>,
    ) -> Result<Vec<ScoredEntry>, MemoryError> {
        cfg.validate()?;
        let k = cfg.pool_size_k();
        let index = TfIdfIndex::build(self.entries.values().map(|e| e.summary.as_str()));
        let query_vec = index.vectorize(&query.text);
        let score_of = |e: &MemoryEntry| similarity(query, e, cfg.similarity_mode, &index, &query_vec);

        let mut pool: Vec<ScoredEntry> = Vec::new();
        let mut seen: BTreeSet<String> = BTreeSet::new();
        let push = |pool: &mut Vec<ScoredEntry>, seen: &mut BTreeSet<String>, s: ScoredEntry| {
            if pool.len() < k && seen.insert(s.entry.id.clone()) {
                pool.push(s);
            }
        };

        // (a) infrastructure templates
        let mut infra: Vec<ScoredEntry> = self
            .entries
            .values()
            .filter(|e| e.kind == EntryKind::ApiTemplate && !e.tags.is_disjoint(&cfg.infra_tags))
            .map(|e| ScoredEntry { entry: e.clone(), score: score_of(e) })
            .collect();
        sort_desc(&mut infra);
        for s in infra {
            push(&mut pool, &mut seen, s);
        }

        // (b) exact-name lookups
        let mut named: Vec<ScoredEntry> = self
            .entries
            .values()
            .filter(|e| e.kind == EntryKind::ApiTemplate && referenced_names.contains(&e.summary))
            .map(|e| ScoredEntry { entry: e.clone(), score: score_of(e) })
            .collect();
        sort_desc(&mut named);
        for s in named {
            push(&mut pool, &mut seen, s);
        }

        // per-kind quota fills, by similarity within the kind
        for (kind, quota) in &cfg.kind_quotas {
            let have = pool.iter().filter(|s| s.entry.kind == *kind).count();
            if have >= *quota {
                continue;
            }
            let mut extra: Vec<ScoredEntry> = self
                .entries
                .values()
                .filter(|e| e.kind == *kind && !seen.contains(&e.id))
                .map(|e| ScoredEntry { entry: e.clone(), score: score_of(e) })
                .collect();
            sort_desc(&mut extra);
            for s in extra.into_iter().take(quota - have) {
                push(&mut pool, &mut seen, s);
            }
        }

        // (c) semantic candidates over experiential kinds
        let semantic = self.ranked(query, cfg, k, |e| {
            matches!(e.kind, EntryKind::Experience | EntryKind::Trace | EntryKind::BestPractice)
        });
        for s in semantic {
            push(&mut pool, &mut seen, s);
        }
        Ok(pool)
    }

    /// One JSON object per entry, newline-delimited, trailing newline.
    pub fn persist(&self, path: &Path) -> Result<(), MemoryError> {
        let file = std::fs::File::create(path)?;
        let mut w = BufWriter::new(file);
        for entry in self.entries.values() {
            let line = serde_json::to_string(entry)
                .map_err(|e| MemoryError::Parse { line: 0, msg: e.to_string() })?;
            writeln!(w, "{line}")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<MemoryBank, MemoryError> {
        let file = std::fs::File::open(path)?;
        let reader = std::io::BufReader::new(file);
        let mut bank = MemoryBank::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: MemoryEntry = serde_json::from_str(&line)
                .map_err(|e| MemoryError::Parse { line: i + 1, msg: e.to_string() })?;
            bank.append(entry)
                .map_err(|e| MemoryError::Parse { line: i + 1, msg: e.to_string() })?;
        }
        Ok(bank)
    }
}

fn sort_desc(v: &mut [ScoredEntry]) {
    v.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.entry.id.cmp(&b.entry.id))
    });
}

fn similarity(
    query: &TaskQuery,
    entry: &MemoryEntry,
    mode: SimilarityMode,
    index: &TfIdfIndex,
    query_vec: &BTreeMap<String, f64>,
) -> f64 {
    let embedding_sim = || match (&query.embedding, &entry.embedding) {
        (Some(q), Some(e)) if q.len() == e.len() => cosine(q, e),
        _ => 0.0,
    };
    match mode {
        SimilarityMode::Lexical => index.cosine_with(query_vec, &entry.summary),
        SimilarityMode::Embedding => embedding_sim(),
        SimilarityMode::Hybrid => {
            if query.embedding.is_some() && entry.embedding.is_some() {
                embedding_sim()
            } else {
                index.cosine_with(query_vec, &entry.summary)
            }
        }
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Token-level TF-IDF over entry summaries.
struct TfIdfIndex {
    doc_count: usize,
    doc_freq: BTreeMap<String, usize>,
}

impl TfIdfIndex {
    fn build<'a, I: Iterator<Item = &'a str>>(docs: I) -> Self {
        let mut doc_freq: BTreeMap<String, usize> = BTreeMap::new();
        let mut doc_count = 0;
        for doc in docs {
            doc_count += 1;
            let uniq: BTreeSet<String> = tokenize(doc).collect();
            for t in uniq {
                *doc_freq.entry(t).or_insert(0) += 1;
            }
        }
        TfIdfIndex { doc_count, doc_freq }
    }

    fn idf(&self, term: &str) -> f64 {
        let df = self.doc_freq.get(term).copied().unwrap_or(0);
        ((1.0 + self.doc_count as f64) / (1.0 + df as f64)).ln() + 1.0
    }

    fn vectorize(&self, text: &str) -> BTreeMap<String, f64> {
        let mut tf: BTreeMap<String, f64> = BTreeMap::new();
        for t in tokenize(text) {
            *tf.entry(t).or_insert(0.0) += 1.0;
        }
        for (t, w) in tf.iter_mut() {
            *w *= self.idf(t);
        }
        tf
    }

    fn cosine_with(&self, query_vec: &BTreeMap<String, f64>, doc: &str) -> f64 {
        let doc_vec = self.vectorize(doc);
        let dot: f64 = query_vec
            .iter()
            .filter_map(|(t, w)| doc_vec.get(t).map(|d| w * d))
            .sum();
        let nq: f64 = query_vec.values().map(|w| w * w).sum::<f64>().sqrt();
        let nd: f64 = doc_vec.values().map(|w| w * w).sum::<f64>().sqrt();
        if nq == 0.0 || nd == 0.0 {
            0.0
        } else {
            dot / (nq * nd)
        }
    }
}

fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric() && c != '_')
        .filter(|s| !s.is_empty())
        .map(|s| s.to_lowercase())
}

/// Shared handle over a bank: serialized appends, consistent snapshots for
/// concurrent readers.
#[derive(Debug, Clone, Default)]
pub struct SharedBank {
    inner: Arc<RwLock<MemoryBank>>,
}

impl SharedBank {
    pub fn new(bank: MemoryBank) -> Self {
        SharedBank { inner: Arc::new(RwLock::new(bank)) }
    }

    pub fn append(&self, entry: MemoryEntry) -> Result<(), MemoryError> {
        self.inner.write().unwrap().append(entry)
    }

    /// Point-in-time copy, unaffected by subsequent appends.
    pub fn snapshot(&self) -> MemoryBank {
        self.inner.read().unwrap().clone()
    }

    pub fn generation(&self) -> u64 {
        self.inner.read().unwrap().generation()
    }
}
