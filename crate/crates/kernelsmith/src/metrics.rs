//! Suite-level metrics: cumulative compilation/correctness curves,
//! per-task speedups, and distribution summaries.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::orchestrator::EpisodeReport;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("latencies must be positive, got l_ref={l_ref} l_opt={l_opt}")]
    NonPositiveLatency { l_ref: f64, l_opt: f64 },
}

/// `l_ref / l_opt`: how much faster the optimized kernel is than the
/// reference.
pub fn compute_speedup(l_ref: f64, l_opt: f64) -> Result<f64, MetricsError> {
    if l_ref <= 0.0 || l_opt <= 0.0 {
        return Err(MetricsError::NonPositiveLatency { l_ref, l_opt });
    }
    Ok(l_ref / l_opt)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationPoint {
    pub iteration: usize,
    /// Fraction of tasks with at least one compiling candidate by this
    /// iteration.
    pub cumulative_cr: f64,
    /// Fraction of tasks with at least one feasible candidate by this
    /// iteration.
    pub cumulative_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMetric {
    pub task_id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub first_feasible_latency_ms: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub best_latency_ms: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub speedup: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference_latency_ms: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ref_speedup: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SuiteMetrics {
    pub per_iteration: Vec<IterationPoint>,
    pub per_task: Vec<TaskMetric>,
    pub final_cr: f64,
    pub final_acc: f64,
}

pub fn compute_suite_metrics(episodes: &[EpisodeReport]) -> SuiteMetrics {
    if episodes.is_empty() {
        return SuiteMetrics::default();
    }
    let n = episodes.len() as f64;
    let horizon = episodes.iter().map(|e| e.budget_t).max().unwrap_or(0);
    let mut per_iteration = Vec::with_capacity(horizon);
    for t in 1..=horizon {
        let compiled = episodes.iter().filter(|e| e.first_compile_iteration.map_or(false, |i| i <= t)).count();
        let feasible = episodes.iter().filter(|e| e.first_feasible_iteration.map_or(false, |i| i <= t)).count();
        per_iteration.push(IterationPoint {
            iteration: t,
            cumulative_cr: compiled as f64 / n,
            cumulative_acc: feasible as f64 / n,
        });
    }
    let per_task = episodes
        .iter()
        .map(|e| TaskMetric {
            task_id: e.task_id.clone(),
            first_feasible_latency_ms: e.first_feasible_latency_ms,
            best_latency_ms: e.best_latency_ms,
            speedup: e.speedup,
            reference_latency_ms: e.reference_latency_ms,
            ref_speedup: match (e.reference_latency_ms, e.best_latency_ms) {
                (Some(r), Some(b)) => compute_speedup(r, b).ok(),
                _ => None,
            },
        })
        .collect();
    let (final_cr, final_acc) = per_iteration
        .last()
        .map(|p| (p.cumulative_cr, p.cumulative_acc))
        .unwrap_or((0.0, 0.0));
    SuiteMetrics { per_iteration, per_task, final_cr, final_acc }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistributionSummary {
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
}

/// Median and quartiles by linear interpolation between closest ranks.
pub fn summarize_distribution(values: &[f64]) -> Option<DistributionSummary> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    Some(DistributionSummary {
        median: quantile(&sorted, 0.5),
        q1: quantile(&sorted, 0.25),
        q3: quantile(&sorted, 0.75),
    })
}

fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::orchestrator::EpisodeStage;

    fn episode(id: &str, budget: usize, compile_at: Option<usize>, feasible_at: Option<usize>) -> EpisodeReport {
        EpisodeReport {
            task_id: id.into(),
            final_stage: if feasible_at.is_some() { EpisodeStage::DoneSuccess } else { EpisodeStage::DoneExhausted },
            budget_t: budget,
            iterations: Vec::new(),
            first_compile_iteration: compile_at,
            first_feasible_iteration: feasible_at,
            first_feasible_latency_ms: None,
            best_latency_ms: None,
            speedup: None,
            reference_latency_ms: None,
        }
    }

    #[test]
    fn published_speedup_rows() {
        assert!((compute_speedup(23.873, 4.199).unwrap() - 5.69).abs() < 0.01);
        assert!((compute_speedup(34.756, 9.598).unwrap() - 3.62).abs() < 0.01);
        assert!((compute_speedup(3814.723, 1725.443).unwrap() - 2.21).abs() < 0.01);
        assert_eq!(compute_speedup(7.5, 7.5).unwrap(), 1.0);
        assert!(compute_speedup(0.0, 1.0).is_err());
        assert!(compute_speedup(1.0, -2.0).is_err());
    }

    #[test]
    fn acc_is_fraction_of_solved_tasks() {
        let episodes = vec![episode("a", 10, Some(1), Some(1)), episode("b", 10, Some(2), None)];
        let m = compute_suite_metrics(&episodes);
        assert_eq!(m.final_acc, 0.5);
        assert_eq!(m.final_cr, 1.0);
    }

    #[test]
    fn cr_curve_is_cumulative_step() {
        let mut episodes: Vec<EpisodeReport> =
            (0..9).map(|i| episode(&format!("t{i}"), 10, None, None)).collect();
        episodes.push(episode("t9", 10, Some(3), None));
        let m = compute_suite_metrics(&episodes);
        for p in &m.per_iteration {
            let expected = if p.iteration < 3 { 0.0 } else { 0.1 };
            assert!((p.cumulative_cr - expected).abs() < 1e-12, "iteration {}", p.iteration);
        }
    }

    #[test]
    fn empty_input_gives_empty_metrics() {
        let m = compute_suite_metrics(&[]);
        assert!(m.per_iteration.is_empty() && m.per_task.is_empty());
    }

    #[test]
    fn median_and_iqr_conventions() {
        let s = summarize_distribution(&[5.0, 1.0, 3.0, 2.0, 4.0]).unwrap();
        assert_eq!((s.median, s.q1, s.q3), (3.0, 2.0, 4.0));

        let s = summarize_distribution(&[7.0]).unwrap();
        assert_eq!((s.median, s.q1, s.q3), (7.0, 7.0, 7.0));

        // even length interpolates between closest ranks
        let s = summarize_distribution(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(s.median, 2.5);
        assert_eq!((s.q1, s.q3), (1.75, 3.25));

        assert!(summarize_distribution(&[]).is_none());
    }

    #[test]
    fn ref_speedup_when_reference_present() {
        let mut e = episode("a", 5, Some(1), Some(1));
        e.best_latency_ms = Some(4.199);
        e.reference_latency_ms = Some(23.873);
        let m = compute_suite_metrics(&[e]);
        assert!((m.per_task[0].ref_speedup.unwrap() - 5.69).abs() < 0.01);
    }
}
