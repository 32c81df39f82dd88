//! Learning core of the retrieval policy: stage rewards, streaming reward
//! normalization with variance floor and clipping, the Monte-Carlo Q-update,
//! and epsilon-greedy value filtering of candidate pools.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::memory::ScoredEntry;
use crate::verifier::VerifierOutcome;

#[derive(Debug, Error)]
pub enum ValueError {
    #[error("feasible outcome must carry a positive latency, got {0:?}")]
    NonPositiveLatency(Option<f64>),
    #[error("best-so-far latency must be positive, got {0}")]
    NonPositiveBest(f64),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("q-table parse error: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Draft,
    Refine,
}

impl Stage {
    fn as_str(self) -> &'static str {
        match self {
            Stage::Draft => "draft",
            Stage::Refine => "refine",
        }
    }
}

/// Key for one value estimate: stage, item id, optional category bucket.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct QKey {
    pub stage: Stage,
    pub id: String,
    pub bucket: Option<String>,
}

impl QKey {
    pub fn new(stage: Stage, id: impl Into<String>) -> Self {
        QKey { stage, id: id.into(), bucket: None }
    }

    fn as_path(&self) -> String {
        match &self.bucket {
            Some(b) => format!("{}/{}/{}", self.stage.as_str(), self.id, b),
            None => format!("{}/{}", self.stage.as_str(), self.id),
        }
    }

    fn from_path(path: &str) -> Result<Self, ValueError> {
        let mut parts = path.splitn(3, '/');
        let stage = match parts.next() {
            Some("draft") => Stage::Draft,
            Some("refine") => Stage::Refine,
            other => return Err(ValueError::Parse(format!("bad stage in key {other:?}"))),
        };
        let id = parts.next().ok_or_else(|| ValueError::Parse(format!("missing id in key {path}")))?;
        Ok(QKey { stage, id: id.to_string(), bucket: parts.next().map(str::to_string) })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepMode {
    /// Fixed step size; tracks a non-stationary reward source.
    Constant(f64),
    /// Step size 1/visits; the estimate equals the running sample mean.
    Harmonic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QCell {
    pub q: f64,
    pub visits: u64,
}

/// Stage-keyed value estimates with visit counts.
#[derive(Debug, Clone)]
pub struct QTable {
    values: BTreeMap<QKey, QCell>,
    pub step_mode: StepMode,
    pub q_init: f64,
}

impl QTable {
    pub fn new(step_mode: StepMode, q_init: f64) -> Self {
        QTable { values: BTreeMap::new(), step_mode, q_init }
    }

    pub fn q_of(&self, key: &QKey) -> f64 {
        self.values.get(key).map(|c| c.q).unwrap_or(self.q_init)
    }

    pub fn visits(&self, key: &QKey) -> u64 {
        self.values.get(key).map(|c| c.visits).unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Monte-Carlo update `q <- q + alpha_t * (r - q)`; absent keys start at
    /// `q_init` with 0 visits.
    pub fn update(&mut self, key: QKey, reward: f64) {
        let q_init = self.q_init;
        let step_mode = self.step_mode;
        let cell = self.values.entry(key).or_insert(QCell { q: q_init, visits: 0 });
        cell.visits += 1;
        let delta = reward - cell.q;
        cell.q += match step_mode {
            StepMode::Constant(a) => a * delta,
            // exact division: harmonic updates reproduce the running sample
            // mean bit for bit
            StepMode::Harmonic => delta / cell.visits as f64,
        };
    }

    pub fn persist(&self, path: &Path) -> Result<(), ValueError> {
        let map: BTreeMap<String, QCell> =
            self.values.iter().map(|(k, v)| (k.as_path(), *v)).collect();
        let json = serde_json::to_string_pretty(&map).map_err(|e| ValueError::Parse(e.to_string()))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path, step_mode: StepMode, q_init: f64) -> Result<QTable, ValueError> {
        let raw = std::fs::read_to_string(path)?;
        let map: BTreeMap<String, QCell> =
            serde_json::from_str(&raw).map_err(|e| ValueError::Parse(e.to_string()))?;
        let mut table = QTable::new(step_mode, q_init);
        for (k, v) in map {
            table.values.insert(QKey::from_path(&k)?, v);
        }
        Ok(table)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&QKey, &QCell)> {
        self.values.iter()
    }
}

/// Streaming mean and population variance with a variance floor and output
/// clipping for safe z-score normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardStats {
    pub count: u64,
    pub mean: f64,
    pub m2: f64,
    pub sigma_min: f64,
    #[serde(rename = "clip_B")]
    pub clip_b: f64,
}

impl RewardStats {
    pub fn new(sigma_min: f64, clip_b: f64) -> Self {
        RewardStats { count: 0, mean: 0.0, m2: 0.0, sigma_min, clip_b }
    }

    /// Welford single-pass update.
    pub fn update(&mut self, raw: f64) {
        self.count += 1;
        let delta = raw - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (raw - self.mean);
    }

    /// Population standard deviation, floored at `sigma_min`.
    pub fn sigma(&self) -> f64 {
        let var = if self.count >= 1 { self.m2 / self.count as f64 } else { 0.0 };
        var.sqrt().max(self.sigma_min)
    }

    /// `clip((raw - mean) / max(sigma, sigma_min), -B, B)`. With no samples
    /// yet, passes the raw value through clipped.
    pub fn normalize(&self, raw: f64) -> f64 {
        let z = if self.count >= 1 { (raw - self.mean) / self.sigma() } else { raw };
        z.clamp(-self.clip_b, self.clip_b)
    }

    pub fn persist(&self, path: &Path) -> Result<(), ValueError> {
        let json = serde_json::to_string_pretty(self).map_err(|e| ValueError::Parse(e.to_string()))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<RewardStats, ValueError> {
        let raw = std::fs::read_to_string(path)?;
        serde_json::from_str(&raw).map_err(|e| ValueError::Parse(e.to_string()))
    }
}

/// Binary feasibility reward for the drafting stage.
pub fn draft_reward(outcome: &VerifierOutcome) -> f64 {
    if outcome.feasible() {
        1.0
    } else {
        -1.0
    }
}

/// Relative latency reward for the refining stage:
/// `tanh(ln(best) - ln(latency))` when feasible, else -1.
pub fn refine_reward(best_so_far_ms: f64, outcome: &VerifierOutcome) -> Result<f64, ValueError> {
    if best_so_far_ms <= 0.0 {
        return Err(ValueError::NonPositiveBest(best_so_far_ms));
    }
    if !outcome.feasible() {
        return Ok(-1.0);
    }
    match outcome.latency_ms {
        Some(l) if l > 0.0 => Ok((best_so_far_ms.ln() - l.ln()).tanh()),
        other => Err(ValueError::NonPositiveLatency(other)),
    }
}

/// Exploration schedule: linear decay from start to end over
/// `epsilon_decay_steps` global steps, then flat.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValueConfig {
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    pub epsilon_decay_steps: u64,
    pub rng_seed: u64,
}

impl Default for ValueConfig {
    fn default() -> Self {
        ValueConfig { epsilon_start: 0.3, epsilon_end: 0.05, epsilon_decay_steps: 200, rng_seed: 0 }
    }
}

pub fn epsilon_at(cfg: &ValueConfig, global_step: u64) -> f64 {
    if global_step >= cfg.epsilon_decay_steps {
        return cfg.epsilon_end;
    }
    let frac = global_step as f64 / cfg.epsilon_decay_steps as f64;
    cfg.epsilon_start + (cfg.epsilon_end - cfg.epsilon_start) * frac
}

/// Filter a similarity-ranked pool down to `n` entries. Each slot is an
/// independent epsilon-greedy draw without replacement: greedy takes the
/// highest-Q unchosen candidate (ties by higher similarity, then ascending
/// id; unseen keys score `q_init`), exploration takes a uniform unchosen one.
pub fn select_by_value<R: Rng>(
    pool: &[ScoredEntry],
    table: &QTable,
    stage: Stage,
    bucket: Option<&str>,
    n: usize,
    epsilon: f64,
    rng: &mut R,
) -> Vec<ScoredEntry> {
    // pool index doubles as the similarity tie-break: lower index = higher
    // similarity (or earlier id on equal score)
    let mut remaining: Vec<usize> = (0..pool.len()).collect();
    let mut picked = Vec::new();
    while picked.len() < n && !remaining.is_empty() {
        let choice = if rng.gen::<f64>() < epsilon {
            rng.gen_range(0..remaining.len())
        } else {
            let mut best = 0;
            let mut best_q = f64::NEG_INFINITY;
            for (pos, &idx) in remaining.iter().enumerate() {
                let key = QKey {
                    stage,
                    id: pool[idx].entry.id.clone(),
                    bucket: bucket.map(str::to_string),
                };
                let q = table.q_of(&key);
                if q > best_q {
                    best_q = q;
                    best = pos;
                }
            }
            best
        };
        let idx = remaining.remove(choice);
        picked.push(pool[idx].clone());
    }
    picked
}
