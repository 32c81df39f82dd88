//! The episode loop: Stage-1 cold-start drafting until feasibility, then
//! Stage-2 continual refining until the budget runs out. Maintains state
//! transitions, start points, memory accrual, and Q-value updates; also
//! hosts the baseline modes (pass@k, within-task refinement, heuristic
//! retrieval).

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, Mutex, MutexGuard};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::generator::{
    parse_candidate, render_prompt, serialize_candidate, CandidateKernel, ContextEntry,
    GenerationRequest, GeneratorBackend, GeneratorError, PromptTemplate, SectionSchema,
};
use crate::infra::InfraError;
use crate::memory::{
    EntryKind, MemoryEntry, MemoryError, OutcomeDigest, RetrievalConfig, ScoredEntry, SharedBank,
    TaskQuery,
};
use crate::metrics::{compute_suite_metrics, SuiteMetrics};
use crate::util::episode_seed;
use crate::valuation::{
    draft_reward, epsilon_at, refine_reward, select_by_value, QKey, QTable, RewardStats, Stage,
    StepMode, ValueConfig, ValueError,
};
use crate::verifier::{
    verify, AuditorFailurePolicy, HackRuleSet, OutcomeError, VerifierBackend, VerifierOutcome,
    VerifyParams,
};

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("task {id}: {reason}")]
    BadTask { id: String, reason: String },
    #[error("no start points available for refinement")]
    NoStartPoints,
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Value(#[from] ValueError),
    #[error(transparent)]
    Template(#[from] GeneratorError),
}

/// One synthesis task: a reference spec plus evaluation tolerances.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Task {
    pub id: String,
    pub level: String,
    pub reference_spec: String,
    pub category: String,
    pub atol: f64,
    pub rtol: f64,
    /// API names the spec mentions, used for exact-name template lookups.
    #[serde(default)]
    pub referenced_apis: BTreeSet<String>,
    /// Vendor-baseline latency when known, for reference speedups.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_latency_ms: Option<f64>,
}

impl Task {
    pub fn new(id: impl Into<String>, reference_spec: impl Into<String>) -> Self {
        Task {
            id: id.into(),
            level: "L1".into(),
            reference_spec: reference_spec.into(),
            category: String::new(),
            atol: 1e-2,
            rtol: 1e-2,
            referenced_apis: BTreeSet::new(),
            reference_latency_ms: None,
        }
    }

    pub fn validate(&self) -> Result<(), OrchestratorError> {
        if self.atol <= 0.0 || self.rtol <= 0.0 {
            return Err(OrchestratorError::BadTask {
                id: self.id.clone(),
                reason: format!("tolerances must be positive, got atol={} rtol={}", self.atol, self.rtol),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpisodeStage {
    Drafting,
    Refining,
    DoneSuccess,
    DoneExhausted,
}

/// A feasible kernel variant that refinement attempts can branch from.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StartPoint {
    pub id: String,
    pub parent: Option<String>,
    pub latency_ms: f64,
    pub created_at_iteration: usize,
    pub sections: BTreeMap<String, String>,
    pub children: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct EpisodeState {
    pub task: Task,
    pub stage: EpisodeStage,
    pub iteration_t: usize,
    pub best_latency_b: Option<f64>,
    pub start_points: Vec<StartPoint>,
    pub last_outcome: Option<VerifierOutcome>,
}

impl EpisodeState {
    pub fn new(task: Task) -> Self {
        EpisodeState {
            task,
            stage: EpisodeStage::Drafting,
            iteration_t: 0,
            best_latency_b: None,
            start_points: Vec::new(),
            last_outcome: None,
        }
    }

    /// State transition after one verified action: every feasible candidate
    /// joins the start set, the best latency only improves, and the first
    /// feasibility flips drafting to refining.
    pub fn advance(&mut self, candidate: &CandidateKernel, outcome: &VerifierOutcome) {
        self.iteration_t += 1;
        if outcome.feasible() {
            let latency = outcome.latency_ms.expect("feasible outcome carries latency");
            if let Some(parent) = &candidate.parent_start_point {
                if let Some(p) = self.start_points.iter_mut().find(|s| &s.id == parent) {
                    p.children.push(candidate.id.clone());
                }
            }
            self.start_points.push(StartPoint {
                id: candidate.id.clone(),
                parent: candidate.parent_start_point.clone(),
                latency_ms: latency,
                created_at_iteration: self.iteration_t,
                sections: candidate.sections.clone(),
                children: Vec::new(),
            });
            if self.best_latency_b.map_or(true, |b| latency < b) {
                self.best_latency_b = Some(latency);
            }
            if self.stage == EpisodeStage::Drafting {
                self.stage = EpisodeStage::Refining;
            }
        }
        self.last_outcome = Some(outcome.clone());
    }
}

/// Epsilon-greedy start-point choice over refine-stage Q-values; ties break
/// toward lower latency, then earlier creation.
pub fn select_start_point<R: rand::Rng>(
    state: &EpisodeState,
    q_refine: &QTable,
    epsilon: f64,
    rng: &mut R,
) -> Result<usize, OrchestratorError> {
    if state.start_points.is_empty() {
        return Err(OrchestratorError::NoStartPoints);
    }
    if rng.gen::<f64>() < epsilon {
        return Ok(rng.gen_range(0..state.start_points.len()));
    }
    let mut best = 0;
    let mut best_key = (f64::NEG_INFINITY, f64::INFINITY, usize::MAX);
    for (i, sp) in state.start_points.iter().enumerate() {
        let q = q_refine.q_of(&QKey::new(Stage::Refine, sp.id.clone()));
        let key = (q, sp.latency_ms, sp.created_at_iteration);
        if key.0 > best_key.0
            || (key.0 == best_key.0 && (key.1 < best_key.1 || (key.1 == best_key.1 && key.2 < best_key.2)))
        {
            best_key = key;
            best = i;
        }
    }
    Ok(best)
}

// ---------------------------------------------------------------------------
// Shared value state
// ---------------------------------------------------------------------------

/// Stage-specific Q-tables plus the Stage-2 reward normalizer and the
/// global step counter driving the exploration schedule.
#[derive(Debug)]
pub struct ValueState {
    pub q: QTable,
    pub refine_stats: RewardStats,
    pub global_steps: u64,
}

impl Default for ValueState {
    fn default() -> Self {
        ValueState {
            q: QTable::new(StepMode::Constant(0.1), 0.0),
            refine_stats: RewardStats::new(0.01, 5.0),
            global_steps: 0,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct SharedValueState(Arc<Mutex<ValueState>>);

impl SharedValueState {
    pub fn new(state: ValueState) -> Self {
        SharedValueState(Arc::new(Mutex::new(state)))
    }

    pub fn lock(&self) -> MutexGuard<'_, ValueState> {
        self.0.lock().expect("value state lock poisoned")
    }
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    /// Full loop: hybrid retrieval, value selection, Q-learning.
    ValueDriven,
    /// k stateless generations, no memory, no values.
    PassAtK,
    /// Two-phase loop with memory restricted to the task's own history.
    RefinementBaseline,
    /// Similarity-only context, best-latency start points, no Q-learning.
    HeuristicRetrieval,
}

/// Maps a profiling-digest metric to a bottleneck label when it exceeds a
/// threshold; labels steer refinement retrieval.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BottleneckRule {
    /// Matched as a suffix of the flattened digest key.
    pub metric: String,
    pub min_value: f64,
    pub label: String,
}

pub fn bottleneck_labels(
    digest: &BTreeMap<String, f64>,
    rules: &[BottleneckRule],
) -> Vec<String> {
    let mut labels = Vec::new();
    for rule in rules {
        let hit = digest
            .iter()
            .any(|(k, v)| (k == &rule.metric || k.ends_with(&format!(".{}", rule.metric))) && *v > rule.min_value);
        if hit && !labels.contains(&rule.label) {
            labels.push(rule.label.clone());
        }
    }
    labels
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OrchestratorConfig {
    pub mode: RunMode,
    pub budget_t: usize,
    pub parallelism: usize,
    pub retrieval: RetrievalConfig,
    pub value: ValueConfig,
    pub infra_retries: usize,
    pub retry_backoff_ms: u64,
    pub verify_timeout_s: f64,
    pub section_schema: SectionSchema,
    pub hack_rules: HackRuleSet,
    pub drafting_template: PromptTemplate,
    pub refining_template: PromptTemplate,
    pub bottleneck_rules: Vec<BottleneckRule>,
}

impl Default for OrchestratorConfig {
    fn default() -> Self {
        OrchestratorConfig {
            mode: RunMode::ValueDriven,
            budget_t: 30,
            parallelism: 1,
            retrieval: RetrievalConfig::default(),
            value: ValueConfig::default(),
            infra_retries: 3,
            retry_backoff_ms: 500,
            verify_timeout_s: 60.0,
            section_schema: SectionSchema::ascend_default(),
            hack_rules: HackRuleSet::ascend_default(),
            drafting_template: PromptTemplate::drafting_default(),
            refining_template: PromptTemplate::refining_default(),
            bottleneck_rules: vec![
                BottleneckRule { metric: "aiv_scalar_ratio".into(), min_value: 0.5, label: "scalar_bound".into() },
                BottleneckRule { metric: "aiv_mte2_ratio".into(), min_value: 0.5, label: "memory_bound".into() },
            ],
        }
    }
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeRecord {
    pub g_hack: bool,
    pub g_comp: bool,
    pub g_corr: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub latency_ms: Option<f64>,
}

impl From<&VerifierOutcome> for OutcomeRecord {
    fn from(o: &VerifierOutcome) -> Self {
        OutcomeRecord { g_hack: o.g_hack, g_comp: o.g_comp, g_corr: o.g_corr, latency_ms: o.latency_ms }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub t: usize,
    pub stage: EpisodeStage,
    pub context_ids: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub start_point: Option<String>,
    pub outcome_digest: OutcomeRecord,
    pub reward: f64,
    pub normalized_reward: f64,
    #[serde(default)]
    pub infra_failed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeReport {
    pub task_id: String,
    pub final_stage: EpisodeStage,
    pub budget_t: usize,
    pub iterations: Vec<IterationRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub first_compile_iteration: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub first_feasible_iteration: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub first_feasible_latency_ms: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub best_latency_ms: Option<f64>,
    /// First-feasible latency divided by best latency, >= 1 when present.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub speedup: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference_latency_ms: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuiteReport {
    pub episodes: Vec<EpisodeReport>,
    pub metrics: SuiteMetrics,
}

// ---------------------------------------------------------------------------
// Episode loop
// ---------------------------------------------------------------------------

fn kind_label(kind: EntryKind) -> &'static str {
    match kind {
        EntryKind::ApiTemplate => "api_template",
        EntryKind::Experience => "experience",
        EntryKind::Trace => "trace",
        EntryKind::BestPractice => "best_practice",
    }
}

fn retry_infra<T, F: FnMut() -> Result<T, InfraError>>(
    retries: usize,
    backoff_ms: u64,
    mut op: F,
) -> Result<T, InfraError> {
    let mut attempt = 0;
    loop {
        match op() {
            Ok(v) => return Ok(v),
            Err(e) => {
                if attempt >= retries {
                    return Err(e);
                }
                if backoff_ms > 0 {
                    std::thread::sleep(std::time::Duration::from_millis(backoff_ms << attempt));
                }
                attempt += 1;
            }
        }
    }
}

fn context_entries(selected: &[ScoredEntry]) -> Vec<ContextEntry> {
    selected
        .iter()
        .map(|s| ContextEntry {
            id: s.entry.id.clone(),
            kind_label: kind_label(s.entry.kind).to_string(),
            text: format!("{}\n{}", s.entry.summary, s.entry.content),
        })
        .collect()
}

/// Bottleneck-conditioned refinement pool: entries tagged with any of the
/// labels first, backfilled with the plain similarity ranking, capped at K.
fn refine_pool(
    snapshot: &crate::memory::MemoryBank,
    query: &TaskQuery,
    retrieval: &RetrievalConfig,
    labels: &[String],
) -> Result<Vec<ScoredEntry>, MemoryError> {
    let base = snapshot.candidate_pool(query, retrieval)?;
    if labels.is_empty() {
        return Ok(base);
    }
    let matching = snapshot
        .candidate_pool_where(query, retrieval, |e| labels.iter().any(|l| e.tags.contains(l)))?;
    let mut pool = matching;
    let mut seen: BTreeSet<String> = pool.iter().map(|s| s.entry.id.clone()).collect();
    for s in base {
        if pool.len() >= retrieval.pool_size_k() {
            break;
        }
        if seen.insert(s.entry.id.clone()) {
            pool.push(s);
        }
    }
    pool.truncate(retrieval.pool_size_k());
    Ok(pool)
}

fn render_start_point(sp: &StartPoint, state: &EpisodeState) -> String {
    let mut text = serialize_candidate(&sp.sections);
    if !sp.children.is_empty() {
        text.push_str("Previously derived variants:\n");
        for child in &sp.children {
            if let Some(c) = state.start_points.iter().find(|s| &s.id == child) {
                text.push_str(&format!("- {} ({:.3} ms)\n", c.id, c.latency_ms));
            }
        }
    }
    text
}

/// Run one full episode against shared memory and value state. Every
/// iteration consumes budget, whether or not verification is reached.
pub fn run_episode(
    task: &Task,
    bank: &SharedBank,
    values: &SharedValueState,
    generator: &dyn GeneratorBackend,
    backend: &dyn VerifierBackend,
    cfg: &OrchestratorConfig,
    master_seed: u64,
) -> Result<EpisodeReport, OrchestratorError> {
    task.validate()?;
    cfg.retrieval.validate()?;
    let learn = cfg.mode != RunMode::HeuristicRetrieval;
    // candidate ids stay unique when the bank already holds attempt logs
    // for this task from an earlier run
    let attempt_offset = bank
        .snapshot()
        .entries()
        .filter(|e| e.origin_task.as_deref() == Some(&task.id) && e.kind == EntryKind::Trace)
        .count();
    let mut rng = ChaCha8Rng::seed_from_u64(episode_seed(master_seed, &task.id));
    let mut state = EpisodeState::new(task.clone());
    let mut report = EpisodeReport {
        task_id: task.id.clone(),
        final_stage: EpisodeStage::DoneExhausted,
        budget_t: cfg.budget_t,
        iterations: Vec::new(),
        first_compile_iteration: None,
        first_feasible_iteration: None,
        first_feasible_latency_ms: None,
        best_latency_ms: None,
        speedup: None,
        reference_latency_ms: task.reference_latency_ms,
    };

    for t in 1..=cfg.budget_t {
        let stage = if state.stage == EpisodeStage::Refining { Stage::Refine } else { Stage::Draft };
        let epsilon = {
            let mut v = values.lock();
            let e = epsilon_at(&cfg.value, v.global_steps);
            v.global_steps += 1;
            e
        };
        let snapshot = bank.snapshot();
        let mut query = TaskQuery::text(task.reference_spec.clone());
        if !task.category.is_empty() {
            query.tags.insert(task.category.clone());
        }

        // context assembly
        let n = cfg.retrieval.final_count_n;
        let (selected, start_idx) = match stage {
            Stage::Draft => {
                let pool = match cfg.mode {
                    RunMode::HeuristicRetrieval => snapshot.candidate_pool(&query, &cfg.retrieval)?,
                    _ => snapshot.hybrid_draft_pool(&query, &cfg.retrieval, &task.referenced_apis)?,
                };
                let selected = if learn {
                    let v = values.lock();
                    select_by_value(&pool, &v.q, Stage::Draft, None, n, epsilon, &mut rng)
                } else {
                    pool.into_iter().take(n).collect()
                };
                (selected, None)
            }
            Stage::Refine => {
                let labels = state
                    .last_outcome
                    .as_ref()
                    .and_then(|o| o.profiling_digest.as_ref())
                    .map(|d| bottleneck_labels(d, &cfg.bottleneck_rules))
                    .unwrap_or_default();
                let pool = refine_pool(&snapshot, &query, &cfg.retrieval, &labels)?;
                let (selected, idx) = if learn {
                    let v = values.lock();
                    let selected =
                        select_by_value(&pool, &v.q, Stage::Refine, None, n, epsilon, &mut rng);
                    let idx = select_start_point(&state, &v.q, epsilon, &mut rng)?;
                    (selected, idx)
                } else {
                    // heuristic baseline: similarity-only context, lowest
                    // historical latency start point
                    let idx = state
                        .start_points
                        .iter()
                        .enumerate()
                        .min_by(|a, b| {
                            a.1.latency_ms
                                .partial_cmp(&b.1.latency_ms)
                                .unwrap_or(std::cmp::Ordering::Equal)
                                .then(a.1.created_at_iteration.cmp(&b.1.created_at_iteration))
                        })
                        .map(|(i, _)| i)
                        .ok_or(OrchestratorError::NoStartPoints)?;
                    (pool.into_iter().take(n).collect(), idx)
                };
                (selected, Some(idx))
            }
        };
        let context_ids: Vec<String> = selected.iter().map(|s| s.entry.id.clone()).collect();
        let start_point = start_idx.map(|i| state.start_points[i].clone());

        let feedback = state.last_outcome.as_ref().and_then(|o| o.error.as_ref()).map(OutcomeError::summary);
        let request = GenerationRequest {
            task_id: task.id.clone(),
            task_spec: task.reference_spec.clone(),
            stage,
            context: context_entries(&selected),
            start_point_source: start_point.as_ref().map(|sp| render_start_point(sp, &state)),
            start_point_latency_ms: start_point.as_ref().map(|sp| sp.latency_ms),
            feedback,
            prompt_template_id: match stage {
                Stage::Draft => cfg.drafting_template.id.clone(),
                Stage::Refine => cfg.refining_template.id.clone(),
            },
        };
        let template = match stage {
            Stage::Draft => &cfg.drafting_template,
            Stage::Refine => &cfg.refining_template,
        };
        let prompt = render_prompt(&request, template)?;

        let candidate_id = format!("{}-c{:03}", task.id, attempt_offset + t);
        let mut infra_failed = false;
        let mut raw_text = String::new();
        let mut candidate = CandidateKernel {
            id: candidate_id.clone(),
            sections: BTreeMap::new(),
            parent_start_point: start_point.as_ref().map(|sp| sp.id.clone()),
            context_used: context_ids.clone(),
            iteration: t,
        };
        let outcome = match retry_infra(cfg.infra_retries, cfg.retry_backoff_ms, || {
            generator.generate(&request, &prompt)
        }) {
            Err(e) => {
                infra_failed = true;
                VerifierOutcome {
                    error: Some(OutcomeError::Text(format!("generator infrastructure failure: {e}"))),
                    ..Default::default()
                }
            }
            Ok(raw) => {
                raw_text = raw;
                match parse_candidate(&raw_text, &cfg.section_schema) {
                    Err(e) => VerifierOutcome {
                        error: Some(OutcomeError::Text(e.to_string())),
                        ..Default::default()
                    },
                    Ok(sections) => {
                        candidate.sections = sections;
                        let params = VerifyParams {
                            task_id: task.id.clone(),
                            atol: task.atol,
                            rtol: task.rtol,
                            timeout_s: cfg.verify_timeout_s,
                        };
                        match retry_infra(cfg.infra_retries, cfg.retry_backoff_ms, || {
                            verify(&params, &candidate, backend, &cfg.hack_rules, None, AuditorFailurePolicy::FailOpen)
                        }) {
                            Ok(o) => o,
                            Err(e) => {
                                infra_failed = true;
                                VerifierOutcome {
                                    error: Some(OutcomeError::Text(format!(
                                        "verifier infrastructure failure: {e}"
                                    ))),
                                    ..Default::default()
                                }
                            }
                        }
                    }
                }
            }
        };

        // rewards and value updates; infra-failed iterations consume budget
        // but teach nothing
        let (reward, normalized) = if infra_failed {
            (0.0, 0.0)
        } else {
            match stage {
                Stage::Draft => {
                    let r = draft_reward(&outcome);
                    if learn {
                        let mut v = values.lock();
                        for id in &context_ids {
                            v.q.update(QKey::new(Stage::Draft, id.clone()), r);
                        }
                    }
                    (r, r)
                }
                Stage::Refine => {
                    let b = state.best_latency_b.expect("refining implies a best latency");
                    let r = refine_reward(b, &outcome)?;
                    let mut v = values.lock();
                    if learn {
                        v.refine_stats.update(r);
                    }
                    let norm = v.refine_stats.normalize(r);
                    if learn {
                        for id in &context_ids {
                            v.q.update(QKey::new(Stage::Refine, id.clone()), norm);
                        }
                        if let Some(sp) = &start_point {
                            v.q.update(QKey::new(Stage::Refine, sp.id.clone()), norm);
                        }
                    }
                    (r, norm)
                }
            }
        };

        // memory accrual: one trace entry plus one experience summary per
        // iteration
        let digest = OutcomeDigest { feasible: outcome.feasible(), latency_ms: outcome.latency_ms };
        let labels = outcome
            .profiling_digest
            .as_ref()
            .map(|d| bottleneck_labels(d, &cfg.bottleneck_rules))
            .unwrap_or_default();
        let mut tags: Vec<String> = labels.clone();
        if !task.category.is_empty() {
            tags.push(task.category.clone());
        }
        let trace_content =
            if candidate.sections.is_empty() { raw_text.clone() } else { serialize_candidate(&candidate.sections) };
        let mut trace = MemoryEntry::new(
            format!("{candidate_id}-trace"),
            EntryKind::Trace,
            trace_content,
            format!("attempt log {} iteration {}", task.id, t),
        )
        .with_tags(tags.clone());
        trace.origin_task = Some(task.id.clone());
        trace.origin_iteration = t as u32;
        trace.outcome = Some(digest.clone());
        bank.append(trace)?;

        let verdict = if infra_failed {
            "infra failure"
        } else if outcome.feasible() {
            "success"
        } else {
            "failure"
        };
        let mut experience = MemoryEntry::new(
            format!("{candidate_id}-exp"),
            EntryKind::Experience,
            format!(
                "context {}; outcome {}; latency {:?}; error {:?}",
                context_ids.join(","),
                verdict,
                outcome.latency_ms,
                outcome.error.as_ref().map(OutcomeError::summary),
            ),
            format!("attempt log {} iteration {} {}", task.id, t, verdict),
        )
        .with_tags(tags);
        experience.origin_task = Some(task.id.clone());
        experience.origin_iteration = t as u32;
        experience.outcome = Some(digest);
        bank.append(experience)?;

        if outcome.g_comp && report.first_compile_iteration.is_none() {
            report.first_compile_iteration = Some(t);
        }
        if outcome.feasible() && report.first_feasible_iteration.is_none() {
            report.first_feasible_iteration = Some(t);
            report.first_feasible_latency_ms = outcome.latency_ms;
        }

        report.iterations.push(IterationRecord {
            t,
            stage: if stage == Stage::Draft { EpisodeStage::Drafting } else { EpisodeStage::Refining },
            context_ids,
            start_point: start_point.map(|sp| sp.id),
            outcome_digest: OutcomeRecord::from(&outcome),
            reward,
            normalized_reward: normalized,
            infra_failed,
        });
        state.advance(&candidate, &outcome);
    }

    report.best_latency_ms = state.best_latency_b;
    report.final_stage =
        if state.best_latency_b.is_some() { EpisodeStage::DoneSuccess } else { EpisodeStage::DoneExhausted };
    report.speedup = match (report.first_feasible_latency_ms, report.best_latency_ms) {
        (Some(first), Some(best)) if best > 0.0 => Some(first / best),
        _ => None,
    };
    Ok(report)
}

/// Run a task suite with up to `parallelism` concurrent episodes sharing
/// one bank and value state. Reports are merged by task id.
pub fn run_suite(
    tasks: &[Task],
    bank: &SharedBank,
    values: &SharedValueState,
    generator: &dyn GeneratorBackend,
    backend: &dyn VerifierBackend,
    cfg: &OrchestratorConfig,
    master_seed: u64,
) -> Result<SuiteReport, OrchestratorError> {
    let mut episodes: Vec<EpisodeReport> = if cfg.parallelism <= 1 {
        let mut out = Vec::with_capacity(tasks.len());
        for task in tasks {
            out.push(run_episode(task, bank, values, generator, backend, cfg, master_seed)?);
        }
        out
    } else {
        let next = std::sync::atomic::AtomicUsize::new(0);
        let results: Mutex<Vec<Result<EpisodeReport, OrchestratorError>>> = Mutex::new(Vec::new());
        std::thread::scope(|scope| {
            for _ in 0..cfg.parallelism.min(tasks.len()) {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                    if i >= tasks.len() {
                        break;
                    }
                    let r = run_episode(&tasks[i], bank, values, generator, backend, cfg, master_seed);
                    results.lock().expect("results lock").push(r);
                });
            }
        });
        let mut out = Vec::with_capacity(tasks.len());
        for r in results.into_inner().expect("results lock") {
            out.push(r?);
        }
        out
    };
    episodes.sort_by(|a, b| a.task_id.cmp(&b.task_id));
    let metrics = compute_suite_metrics(&episodes);
    Ok(SuiteReport { episodes, metrics })
}

/// Stateless pass@k baseline: k independent drafting generations with no
/// memory and no value learning, same budget accounting as an episode.
pub fn run_pass_at_k(
    task: &Task,
    generator: &dyn GeneratorBackend,
    backend: &dyn VerifierBackend,
    cfg: &OrchestratorConfig,
    k: usize,
    master_seed: u64,
) -> Result<EpisodeReport, OrchestratorError> {
    task.validate()?;
    let _ = master_seed;
    let mut report = EpisodeReport {
        task_id: task.id.clone(),
        final_stage: EpisodeStage::DoneExhausted,
        budget_t: k,
        iterations: Vec::new(),
        first_compile_iteration: None,
        first_feasible_iteration: None,
        first_feasible_latency_ms: None,
        best_latency_ms: None,
        speedup: None,
        reference_latency_ms: task.reference_latency_ms,
    };
    for t in 1..=k {
        let request = GenerationRequest {
            task_id: task.id.clone(),
            task_spec: task.reference_spec.clone(),
            stage: Stage::Draft,
            context: Vec::new(),
            start_point_source: None,
            start_point_latency_ms: None,
            feedback: None,
            prompt_template_id: cfg.drafting_template.id.clone(),
        };
        let prompt = render_prompt(&request, &cfg.drafting_template)?;
        let mut infra_failed = false;
        let outcome = match retry_infra(cfg.infra_retries, cfg.retry_backoff_ms, || {
            generator.generate(&request, &prompt)
        }) {
            Err(e) => {
                infra_failed = true;
                VerifierOutcome {
                    error: Some(OutcomeError::Text(e.to_string())),
                    ..Default::default()
                }
            }
            Ok(raw) => match parse_candidate(&raw, &cfg.section_schema) {
                Err(e) => VerifierOutcome {
                    error: Some(OutcomeError::Text(e.to_string())),
                    ..Default::default()
                },
                Ok(sections) => {
                    let candidate = CandidateKernel {
                        id: format!("{}-p{:03}", task.id, t),
                        sections,
                        parent_start_point: None,
                        context_used: Vec::new(),
                        iteration: t,
                    };
                    let params = VerifyParams {
                        task_id: task.id.clone(),
                        atol: task.atol,
                        rtol: task.rtol,
                        timeout_s: cfg.verify_timeout_s,
                    };
                    match retry_infra(cfg.infra_retries, cfg.retry_backoff_ms, || {
                        verify(&params, &candidate, backend, &cfg.hack_rules, None, AuditorFailurePolicy::FailOpen)
                    }) {
                        Ok(o) => o,
                        Err(e) => {
                            infra_failed = true;
                            VerifierOutcome {
                                error: Some(OutcomeError::Text(e.to_string())),
                                ..Default::default()
                            }
                        }
                    }
                }
            },
        };
        if outcome.g_comp && report.first_compile_iteration.is_none() {
            report.first_compile_iteration = Some(t);
        }
        if outcome.feasible() && report.first_feasible_iteration.is_none() {
            report.first_feasible_iteration = Some(t);
            report.first_feasible_latency_ms = outcome.latency_ms;
            report.best_latency_ms = outcome.latency_ms;
        } else if let (true, Some(l), Some(b)) = (outcome.feasible(), outcome.latency_ms, report.best_latency_ms) {
            if l < b {
                report.best_latency_ms = Some(l);
            }
        }
        let reward = if infra_failed { 0.0 } else { draft_reward(&outcome) };
        report.iterations.push(IterationRecord {
            t,
            stage: EpisodeStage::Drafting,
            context_ids: Vec::new(),
            start_point: None,
            outcome_digest: OutcomeRecord::from(&outcome),
            reward,
            normalized_reward: reward,
            infra_failed,
        });
    }
    if report.best_latency_ms.is_some() {
        report.final_stage = EpisodeStage::DoneSuccess;
        report.speedup = match (report.first_feasible_latency_ms, report.best_latency_ms) {
            (Some(f), Some(b)) if b > 0.0 => Some(f / b),
            _ => None,
        };
    }
    Ok(report)
}

/// Iterative-refinement baseline: the full two-phase loop, but with memory
/// restricted to the task's own history and fresh value state. Mechanism
/// equivalence: this equals the full mode run against a task-restricted
/// bank with identical seeds.
pub fn run_refinement_baseline(
    task: &Task,
    bank: &SharedBank,
    generator: &dyn GeneratorBackend,
    backend: &dyn VerifierBackend,
    cfg: &OrchestratorConfig,
    master_seed: u64,
) -> Result<EpisodeReport, OrchestratorError> {
    let restricted = SharedBank::new(bank.snapshot().restricted_to_task(&task.id));
    let values = SharedValueState::default();
    let mut cfg = cfg.clone();
    cfg.mode = RunMode::ValueDriven;
    run_episode(task, &restricted, &values, generator, backend, &cfg, master_seed)
}
