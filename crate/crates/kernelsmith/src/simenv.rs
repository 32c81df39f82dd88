//! Deterministic synthetic environment: a scripted generator/verifier pair
//! over a world of hidden knowledge dependencies, optimization hints, and
//! lexically similar but inert distractor entries. Supports desk-scale
//! retrieval-ablation and easy-to-hard transfer experiments.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::generator::{GenerationRequest, GeneratorBackend, SectionSchema};
use crate::infra::InfraError;
use crate::memory::{EntryKind, MemoryBank, MemoryEntry, SharedBank};
use crate::orchestrator::{
    run_suite, OrchestratorConfig, OrchestratorError, RunMode, SharedValueState, Task,
};
use crate::util::episode_seed;
use crate::verifier::{BackendRequest, BackendResponse, HackRuleSet, VerifierBackend};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("world spec invalid: {0}")]
    BadSpec(String),
    #[error(transparent)]
    Orchestrator(#[from] OrchestratorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskLevel {
    Easy,
    Hard,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub id: String,
    pub level: TaskLevel,
    /// Knowledge-item ids that must all be in context for the high
    /// feasibility probability to apply.
    pub required_knowledge: BTreeSet<String>,
    pub p_hit: f64,
    pub p_miss: f64,
    pub latency_base: f64,
    pub latency_floor: f64,
    pub hint_gain: f64,
}

/// Shape of a synthetic world. World generation is a pure function of
/// (spec, seed).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldSpec {
    pub easy_tasks: usize,
    pub hard_tasks: usize,
    pub knowledge_per_easy: usize,
    pub knowledge_per_hard: usize,
    pub distractors_per_easy: usize,
    pub distractors_per_hard: usize,
    pub hints_per_easy: usize,
    /// Fraction of each hard task's required knowledge drawn from easy
    /// tasks' knowledge (1.0 reproduces the full transfer structure).
    pub overlap_fraction: f64,
    pub p_hit: f64,
    pub p_miss: f64,
    pub latency_base: f64,
    pub latency_floor: f64,
    pub hint_gain: f64,
    /// Lognormal latency noise sigma; 0 disables noise.
    pub noise_sigma: f64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        WorldSpec {
            easy_tasks: 4,
            hard_tasks: 0,
            knowledge_per_easy: 1,
            knowledge_per_hard: 2,
            distractors_per_easy: 6,
            distractors_per_hard: 3,
            hints_per_easy: 1,
            overlap_fraction: 1.0,
            p_hit: 0.9,
            p_miss: 0.05,
            latency_base: 100.0,
            latency_floor: 5.0,
            hint_gain: 0.3,
            noise_sigma: 0.05,
        }
    }
}

impl WorldSpec {
    fn validate(&self) -> Result<(), SimError> {
        if self.easy_tasks + self.hard_tasks == 0 {
            return Err(SimError::BadSpec("no tasks".into()));
        }
        if self.p_hit <= self.p_miss {
            return Err(SimError::BadSpec(format!("p_hit {} must exceed p_miss {}", self.p_hit, self.p_miss)));
        }
        if self.latency_floor >= self.latency_base {
            return Err(SimError::BadSpec(format!(
                "latency_floor {} must be below latency_base {}",
                self.latency_floor, self.latency_base
            )));
        }
        if !(0.0..=1.0).contains(&self.overlap_fraction) {
            return Err(SimError::BadSpec("overlap_fraction outside [0,1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    pub spec: WorldSpec,
    pub seed: u64,
    pub tasks: Vec<SyntheticTask>,
    pub knowledge_ids: BTreeSet<String>,
    pub hint_ids: BTreeSet<String>,
    pub distractor_ids: BTreeSet<String>,
}

impl SyntheticWorld {
    pub fn task(&self, id: &str) -> Option<&SyntheticTask> {
        self.tasks.iter().find(|t| t.id == id)
    }
}

fn easy_spec_text(i: usize) -> String {
    // two task-specific tokens keep cross-task lexical similarity well
    // below the task's own knowledge entries even as attempt logs accrue
    format!("implement operator fused_{i} variant_{i} elementwise pipeline stage")
}

fn hard_spec_text(deps: &[usize]) -> String {
    // reference the prerequisite techniques by name so retrieval has a
    // lexical path to them
    let refs: Vec<String> = deps.iter().map(|d| format!("k_easy_{d:02}_0")).collect();
    format!("implement operator composite pipeline stage using {}", refs.join(" "))
}

/// Deterministically build tasks, the seeded memory bank, and the hidden
/// dependency structure.
pub fn build_world(spec: &WorldSpec, seed: u64) -> Result<(SyntheticWorld, Vec<Task>, MemoryBank), SimError> {
    spec.validate()?;
    let mut bank = MemoryBank::new();
    let mut synthetic = Vec::new();
    let mut tasks = Vec::new();
    let mut knowledge_ids = BTreeSet::new();
    let mut hint_ids = BTreeSet::new();
    let mut distractor_ids = BTreeSet::new();
    let add = |bank: &mut MemoryBank, e: MemoryEntry| {
        bank.append(e).expect("world ids are unique by construction");
    };

    for i in 0..spec.easy_tasks {
        let task_id = format!("easy_{i:02}");
        let text = easy_spec_text(i);
        let mut required = BTreeSet::new();
        for j in 0..spec.knowledge_per_easy {
            let kid = format!("k_easy_{i:02}_{j}");
            add(
                &mut bank,
                MemoryEntry::new(
                    kid.clone(),
                    EntryKind::Experience,
                    format!("KNOWLEDGE {kid}"),
                    format!("{text} tip {kid}"),
                ),
            );
            knowledge_ids.insert(kid.clone());
            required.insert(kid);
        }
        for d in 0..spec.distractors_per_easy {
            let did = format!("x_easy_{i:02}_{d}");
            // same summary as the task spec: maximal lexical similarity,
            // zero effect on outcomes
            add(&mut bank, MemoryEntry::new(did.clone(), EntryKind::Experience, "INERT", text.clone()));
            distractor_ids.insert(did);
        }
        for h in 0..spec.hints_per_easy {
            let hid = format!("h_easy_{i:02}_{h}");
            add(
                &mut bank,
                MemoryEntry::new(
                    hid.clone(),
                    EntryKind::BestPractice,
                    format!("HINT {hid}"),
                    format!("{text} fast hint {hid}"),
                )
                .with_tags(["scalar_bound".to_string()]),
            );
            hint_ids.insert(hid);
        }
        synthetic.push(SyntheticTask {
            id: task_id.clone(),
            level: TaskLevel::Easy,
            required_knowledge: required,
            p_hit: spec.p_hit,
            p_miss: spec.p_miss,
            latency_base: spec.latency_base,
            latency_floor: spec.latency_floor,
            hint_gain: spec.hint_gain,
        });
        let mut task = Task::new(task_id, text);
        task.level = "L1".into();
        task.category = "synthetic".into();
        tasks.push(task);
    }

    for j in 0..spec.hard_tasks {
        let task_id = format!("hard_{j:02}");
        let overlapping = (spec.knowledge_per_hard as f64 * spec.overlap_fraction).round() as usize;
        let mut required = BTreeSet::new();
        let mut deps = Vec::new();
        for m in 0..spec.knowledge_per_hard.min(overlapping) {
            if spec.easy_tasks == 0 {
                break;
            }
            let src = (j * spec.knowledge_per_hard + m) % spec.easy_tasks;
            deps.push(src);
            required.insert(format!("k_easy_{src:02}_0"));
        }
        let text = hard_spec_text(&deps);
        for m in overlapping..spec.knowledge_per_hard {
            let kid = format!("k_hard_{j:02}_{m}");
            add(
                &mut bank,
                MemoryEntry::new(
                    kid.clone(),
                    EntryKind::Experience,
                    format!("KNOWLEDGE {kid}"),
                    format!("{text} tip {kid}"),
                ),
            );
            knowledge_ids.insert(kid.clone());
            required.insert(kid);
        }
        for d in 0..spec.distractors_per_hard {
            let did = format!("x_hard_{j:02}_{d}");
            add(&mut bank, MemoryEntry::new(did.clone(), EntryKind::Experience, "INERT", text.clone()));
            distractor_ids.insert(did);
        }
        synthetic.push(SyntheticTask {
            id: task_id.clone(),
            level: TaskLevel::Hard,
            required_knowledge: required,
            p_hit: spec.p_hit,
            p_miss: spec.p_miss,
            latency_base: spec.latency_base * 2.0,
            latency_floor: spec.latency_floor,
            hint_gain: spec.hint_gain,
        });
        let mut task = Task::new(task_id, text);
        task.level = "L2".into();
        task.category = "synthetic".into();
        tasks.push(task);
    }

    let world = SyntheticWorld {
        spec: spec.clone(),
        seed,
        tasks: synthetic,
        knowledge_ids,
        hint_ids,
        distractor_ids,
    };
    Ok((world, tasks, bank))
}

// ---------------------------------------------------------------------------
// Scripted generator and verifier
// ---------------------------------------------------------------------------

/// Emits a candidate that records exactly which entries were in context, so
/// the synthetic verifier can score coverage.
#[derive(Debug, Clone, Default)]
pub struct SyntheticGenerator;

pub fn synthetic_section_schema() -> SectionSchema {
    SectionSchema::new(&["kernel_src"])
}

impl GeneratorBackend for SyntheticGenerator {
    fn generate(&self, request: &GenerationRequest, _prompt: &str) -> Result<String, InfraError> {
        let mut body = String::new();
        for entry in &request.context {
            body.push_str(&format!("USE {}\n", entry.id));
        }
        Ok(format!("kernel_src = r'''\n{body}'''"))
    }
}

/// Bernoulli feasibility from a per-task seeded stream, latency landscape
/// shaped by retrieved hints, distractors fully inert.
pub struct SyntheticVerifier {
    world: Arc<SyntheticWorld>,
    master_seed: u64,
    streams: Mutex<BTreeMap<String, ChaCha8Rng>>,
}

impl SyntheticVerifier {
    pub fn new(world: Arc<SyntheticWorld>, master_seed: u64) -> Self {
        SyntheticVerifier { world, master_seed, streams: Mutex::new(BTreeMap::new()) }
    }

    fn used_ids(sections: &BTreeMap<String, String>) -> BTreeSet<String> {
        sections
            .values()
            .flat_map(|text| text.lines())
            .filter_map(|line| line.strip_prefix("USE "))
            .map(|id| id.trim().to_string())
            .collect()
    }
}

/// Deterministic mean latency: `max(floor, base * (1 - gain)^hints)`.
pub fn hint_latency(task: &SyntheticTask, hints: usize) -> f64 {
    (task.latency_base * (1.0 - task.hint_gain).powi(hints as i32)).max(task.latency_floor)
}

fn lognormal_factor<R: Rng>(rng: &mut R, sigma: f64) -> f64 {
    // Box-Muller; always consume two uniforms so the stream layout does not
    // depend on sigma
    let u1: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.gen();
    let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
    (sigma * z).exp()
}

impl VerifierBackend for SyntheticVerifier {
    fn run(&self, request: &BackendRequest) -> Result<BackendResponse, InfraError> {
        let task = match self.world.task(&request.task_id) {
            Some(t) => t,
            None => {
                return Ok(BackendResponse {
                    compiled: false,
                    correct: false,
                    latency_samples: None,
                    error: Some(format!("unknown synthetic task {}", request.task_id)),
                    profiling: None,
                })
            }
        };
        let used = Self::used_ids(&request.sections);
        let covered = task.required_knowledge.is_subset(&used);
        let hints = used.intersection(&self.world.hint_ids).count();
        let p = if covered { task.p_hit } else { task.p_miss };

        let mut streams = self.streams.lock().expect("verifier stream lock");
        let rng = streams
            .entry(request.task_id.clone())
            .or_insert_with(|| ChaCha8Rng::seed_from_u64(episode_seed(self.master_seed, &request.task_id)));
        let feasible = rng.gen::<f64>() < p;
        if !feasible {
            return Ok(BackendResponse {
                compiled: true,
                correct: false,
                latency_samples: None,
                error: Some("output mismatch beyond tolerance".into()),
                profiling: None,
            });
        }
        let mean = hint_latency(task, hints);
        let samples: Vec<f64> = (0..3)
            .map(|_| (mean * lognormal_factor(rng, self.world.spec.noise_sigma)).max(task.latency_floor))
            .collect();
        Ok(BackendResponse {
            compiled: true,
            correct: true,
            latency_samples: Some(samples),
            error: None,
            profiling: Some(serde_json::json!({ "kernel": { "aiv_scalar_ratio": 0.8 } })),
        })
    }
}

// ---------------------------------------------------------------------------
// Experiments
// ---------------------------------------------------------------------------

fn experiment_cfg(mode: RunMode, budget_t: usize) -> OrchestratorConfig {
    OrchestratorConfig {
        mode,
        budget_t,
        retry_backoff_ms: 0,
        section_schema: synthetic_section_schema(),
        hack_rules: HackRuleSet::default(),
        ..Default::default()
    }
}

/// Run one suite over a freshly built world; returns per-iteration
/// cumulative correctness plus the final fraction of solved tasks.
fn run_world_suite(
    spec: &WorldSpec,
    seed: u64,
    cfg: &OrchestratorConfig,
) -> Result<(Vec<f64>, f64), SimError> {
    let (world, tasks, bank) = build_world(spec, seed)?;
    let bank = SharedBank::new(bank);
    let values = SharedValueState::default();
    let backend = SyntheticVerifier::new(Arc::new(world), seed);
    let suite = run_suite(&tasks, &bank, &values, &SyntheticGenerator, &backend, cfg, seed)?;
    let curve = suite.metrics.per_iteration.iter().map(|p| p.cumulative_acc).collect();
    Ok((curve, suite.metrics.final_acc))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationTrial {
    pub trial: usize,
    pub value_final_acc: f64,
    pub heuristic_final_acc: f64,
    pub delta: f64,
    pub value_curve: Vec<f64>,
    pub heuristic_curve: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub trials: Vec<AblationTrial>,
    /// Trials where value-driven final correctness >= heuristic.
    pub value_wins: usize,
    pub mean_delta: f64,
}

impl AblationReport {
    /// CSV rows (trial, mode, iteration, cum_correct).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("trial,mode,iteration,cum_correct\n");
        for t in &self.trials {
            for (mode, curve) in [("value_driven", &t.value_curve), ("heuristic", &t.heuristic_curve)] {
                for (i, acc) in curve.iter().enumerate() {
                    out.push_str(&format!("{},{},{},{}\n", t.trial, mode, i + 1, acc));
                }
            }
        }
        out
    }
}

/// Paired seeded comparison of value-driven vs similarity-heuristic
/// retrieval on the distractor-heavy world.
pub fn run_ablation(
    spec: &WorldSpec,
    trials: usize,
    base_seed: u64,
    budget_t: usize,
) -> Result<AblationReport, SimError> {
    let mut records = Vec::with_capacity(trials);
    for trial in 0..trials {
        let seed = base_seed.wrapping_add(trial as u64);
        let (value_curve, value_acc) =
            run_world_suite(spec, seed, &experiment_cfg(RunMode::ValueDriven, budget_t))?;
        let (heuristic_curve, heuristic_acc) =
            run_world_suite(spec, seed, &experiment_cfg(RunMode::HeuristicRetrieval, budget_t))?;
        records.push(AblationTrial {
            trial,
            value_final_acc: value_acc,
            heuristic_final_acc: heuristic_acc,
            delta: value_acc - heuristic_acc,
            value_curve,
            heuristic_curve,
        });
    }
    let value_wins = records.iter().filter(|t| t.value_final_acc >= t.heuristic_final_acc).count();
    let mean_delta = if records.is_empty() {
        0.0
    } else {
        records.iter().map(|t| t.delta).sum::<f64>() / records.len() as f64
    };
    Ok(AblationReport { trials: records, value_wins, mean_delta })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransferTrial {
    pub trial: usize,
    /// Mean first-solve iteration over hard tasks (budget+1 when unsolved).
    pub warm_first_solve: f64,
    pub scratch_first_solve: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransferReport {
    pub trials: Vec<TransferTrial>,
    /// Trials where the warm start solved at an earlier-or-equal iteration.
    pub warm_wins: usize,
    pub warm_mean: f64,
    pub scratch_mean: f64,
}

fn mean_first_solve(episodes: &[crate::orchestrator::EpisodeReport], budget_t: usize) -> f64 {
    let hard: Vec<&crate::orchestrator::EpisodeReport> =
        episodes.iter().filter(|e| e.task_id.starts_with("hard_")).collect();
    if hard.is_empty() {
        return 0.0;
    }
    hard.iter()
        .map(|e| e.first_feasible_iteration.unwrap_or(budget_t + 1) as f64)
        .sum::<f64>()
        / hard.len() as f64
}

/// Easy-to-hard transfer: run easy tasks first with shared memory and
/// values, then hard tasks (warm), versus hard tasks alone (scratch).
/// Greedy selection (epsilon 0) keeps the comparison deterministic.
pub fn run_transfer(
    spec: &WorldSpec,
    trials: usize,
    base_seed: u64,
    budget_t: usize,
) -> Result<TransferReport, SimError> {
    let mut cfg = experiment_cfg(RunMode::ValueDriven, budget_t);
    cfg.value.epsilon_start = 0.0;
    cfg.value.epsilon_end = 0.0;

    let mut records = Vec::with_capacity(trials);
    for trial in 0..trials {
        let seed = base_seed.wrapping_add(trial as u64);

        let (world, tasks, bank0) = build_world(spec, seed)?;
        let world = Arc::new(world);
        let easy: Vec<Task> = tasks.iter().filter(|t| t.level == "L1").cloned().collect();
        let hard: Vec<Task> = tasks.iter().filter(|t| t.level == "L2").cloned().collect();

        let bank = SharedBank::new(bank0);
        let values = SharedValueState::default();
        let backend = SyntheticVerifier::new(world.clone(), seed);
        run_suite(&easy, &bank, &values, &SyntheticGenerator, &backend, &cfg, seed)?;
        let warm = run_suite(&hard, &bank, &values, &SyntheticGenerator, &backend, &cfg, seed)?;

        let (_, _, fresh_bank) = build_world(spec, seed)?;
        let bank = SharedBank::new(fresh_bank);
        let values = SharedValueState::default();
        let backend = SyntheticVerifier::new(world, seed);
        let scratch = run_suite(&hard, &bank, &values, &SyntheticGenerator, &backend, &cfg, seed)?;

        records.push(TransferTrial {
            trial,
            warm_first_solve: mean_first_solve(&warm.episodes, budget_t),
            scratch_first_solve: mean_first_solve(&scratch.episodes, budget_t),
        });
    }
    let warm_wins = records.iter().filter(|t| t.warm_first_solve <= t.scratch_first_solve).count();
    let n = records.len().max(1) as f64;
    let warm_mean = records.iter().map(|t| t.warm_first_solve).sum::<f64>() / n;
    let scratch_mean = records.iter().map(|t| t.scratch_first_solve).sum::<f64>() / n;
    Ok(TransferReport { trials: records, warm_wins, warm_mean, scratch_mean })
}
