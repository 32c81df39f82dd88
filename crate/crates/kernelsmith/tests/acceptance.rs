//! End-to-end acceptance checks. Each criterion prints one pass/fail line;
//! the test fails if any criterion fails.

use std::collections::BTreeMap;
use std::process::Command;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use kernelsmith::generator::{parse_candidate, SectionSchema};
use kernelsmith::metrics::compute_speedup;
use kernelsmith::orchestrator::{
    run_episode, run_refinement_baseline, run_suite, OrchestratorConfig, RunMode, SharedValueState,
};
use kernelsmith::memory::SharedBank;
use kernelsmith::simenv::{
    build_world, run_ablation, run_transfer, synthetic_section_schema, SyntheticGenerator,
    SyntheticVerifier, WorldSpec,
};
use kernelsmith::valuation::{refine_reward, QKey, QTable, RewardStats, Stage, StepMode};
use kernelsmith::verifier::{
    aggregate_latency, check_anti_hack, compare_outputs, verify, AuditorFailurePolicy,
    BackendRequest, BackendResponse, HackRuleSet, MismatchKind, OutputValue, Tensor,
    VerifierBackend, VerifierOutcome, VerifyParams, ViolationCategory,
};
use kernelsmith::generator::CandidateKernel;
use kernelsmith::infra::InfraError;

const TANH_ARTIFACT: &str = include_str!("fixtures/tanh_artifact.txt");
const REJECTED_MODEL: &str = include_str!("fixtures/rejected_model.py");

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn feasible_at(latency: f64) -> VerifierOutcome {
    VerifierOutcome {
        g_hack: true,
        g_comp: true,
        g_corr: true,
        latency_ms: Some(latency),
        ..Default::default()
    }
}

// 1. One constant-step update matches the closed form; harmonic steps
// reproduce the running sample mean.
fn c01_update_exactness() -> Result<(), String> {
    let mut table = QTable::new(StepMode::Constant(0.1), 0.5);
    let key = QKey::new(Stage::Draft, "item");
    table.update(key.clone(), 1.0);
    let got = table.q_of(&key);
    let oracle = 0.5 + 0.1 * (1.0 - 0.5);
    if got != oracle {
        return Err(format!("constant update {got} != closed form {oracle}"));
    }
    if (got - 0.55).abs() > 1e-15 {
        return Err(format!("constant update {got} not 0.55"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut table = QTable::new(StepMode::Harmonic, 0.0);
    let key = QKey::new(Stage::Refine, "item");
    let mut incremental_mean = 0.0;
    let mut sum = 0.0;
    for n in 1..=10_000u64 {
        let r: f64 = rng.gen_range(-1.0..1.0);
        table.update(key.clone(), r);
        incremental_mean += (r - incremental_mean) / n as f64;
        sum += r;
        if table.q_of(&key) != incremental_mean {
            return Err(format!("harmonic q diverged from running mean at n={n}"));
        }
    }
    let batch_mean = sum / 10_000.0;
    if (table.q_of(&key) - batch_mean).abs() > 1e-9 {
        return Err(format!("harmonic q {} far from batch mean {batch_mean}", table.q_of(&key)));
    }
    Ok(())
}

// 2. Value iterates stay inside the reward range for any step size in (0,1].
fn c02_boundedness() -> Result<(), String> {
    for trial in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + trial);
        let alpha = 1.0 - rng.gen::<f64>() * 0.999;
        let q_init: f64 = rng.gen_range(-1.0..=1.0);
        let mut table = QTable::new(StepMode::Constant(alpha), q_init);
        let key = QKey::new(Stage::Draft, "arm");
        for i in 0..100_000u64 {
            table.update(key.clone(), rng.gen_range(-1.0..=1.0));
            let q = table.q_of(&key);
            if !(-1.0..=1.0).contains(&q) {
                return Err(format!("trial {trial} step {i}: q={q} escaped [-1,1]"));
            }
        }
    }
    Ok(())
}

// 3. Refinement reward is strictly inside (-1,1) for positive latencies and
// hits tanh(ln 2) = 0.6 at a 2x improvement.
fn c03_refine_reward_range() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for i in 0..1_000_000u64 {
        let b = (rng.gen_range(-6.0..6.0f64)).exp();
        let l = (rng.gen_range(-6.0..6.0f64)).exp();
        let r = refine_reward(b, &feasible_at(l)).map_err(|e| e.to_string())?;
        if r <= -1.0 || r >= 1.0 {
            return Err(format!("pair {i}: reward {r} not strictly inside (-1,1)"));
        }
    }
    for l in [0.001, 1.0, 17.5, 4096.0] {
        let r = refine_reward(2.0 * l, &feasible_at(l)).map_err(|e| e.to_string())?;
        if (r - 0.6).abs() > 1e-12 {
            return Err(format!("refine_reward(2l, l) = {r}, expected 0.6"));
        }
    }
    Ok(())
}

// 4. Streaming stats recover standard-normal moments; a constant stream
// engages the variance floor.
fn c04_streaming_stats() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut stats = RewardStats::new(0.01, 5.0);
    for _ in 0..100_000 {
        stats.update(normal(&mut rng));
    }
    if stats.mean.abs() >= 0.02 {
        return Err(format!("mean {} not within 0.02 of 0", stats.mean));
    }
    if (stats.sigma() - 1.0).abs() >= 0.02 {
        return Err(format!("sigma {} not within 0.02 of 1", stats.sigma()));
    }
    let mut flat = RewardStats::new(0.01, 5.0);
    for _ in 0..1000 {
        flat.update(0.7);
    }
    if flat.sigma() != 0.01 {
        return Err(format!("constant stream sigma {} did not hit the 0.01 floor", flat.sigma()));
    }
    Ok(())
}

// 5. Stationary variance of the constant-step iterate matches
// alpha * sigma_R^2 / (2 - alpha).
fn c05_stationary_variance() -> Result<(), String> {
    let alpha = 0.1;
    let expected = alpha / (2.0 - alpha);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut table = QTable::new(StepMode::Constant(alpha), 0.0);
    let key = QKey::new(Stage::Draft, "arm");
    for _ in 0..1_000 {
        table.update(key.clone(), normal(&mut rng));
    }
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    let n = 100_000u64;
    for _ in 0..n {
        table.update(key.clone(), normal(&mut rng));
        let q = table.q_of(&key);
        sum += q;
        sum_sq += q * q;
    }
    let mean = sum / n as f64;
    let var = sum_sq / n as f64 - mean * mean;
    let rel = (var - expected).abs() / expected;
    if rel > 0.15 {
        return Err(format!("Var(q)={var:.5}, expected {expected:.5} within 15% (off by {:.1}%)", rel * 100.0));
    }
    Ok(())
}

// 6. Harmonic steps converge to the true mean of a bounded reward stream.
fn c06_harmonic_convergence() -> Result<(), String> {
    for trial in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(6000 + trial);
        let mut table = QTable::new(StepMode::Harmonic, 0.0);
        let key = QKey::new(Stage::Refine, "arm");
        for _ in 0..100_000 {
            table.update(key.clone(), rng.gen_range(-0.2..0.8));
        }
        let q = table.q_of(&key);
        if (q - 0.3).abs() >= 0.01 {
            return Err(format!("trial {trial}: q={q} not within 0.01 of 0.3"));
        }
    }
    Ok(())
}

struct CountingBackend {
    calls: std::sync::atomic::AtomicUsize,
}

impl VerifierBackend for CountingBackend {
    fn run(&self, _request: &BackendRequest) -> Result<BackendResponse, InfraError> {
        self.calls.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
        Ok(BackendResponse {
            compiled: true,
            correct: true,
            latency_samples: Some(vec![1.0]),
            error: None,
            profiling: None,
        })
    }
}

fn tanh_candidate() -> Result<CandidateKernel, String> {
    let sections =
        parse_candidate(TANH_ARTIFACT, &SectionSchema::ascend_default()).map_err(|e| e.to_string())?;
    Ok(CandidateKernel {
        id: "tanh-fixture".into(),
        sections,
        parent_start_point: None,
        context_used: Vec::new(),
        iteration: 1,
    })
}

// 7. Feasibility is the conjunction of all three gates; a failed screening
// gate never reaches the execution backend.
fn c07_gate_table() -> Result<(), String> {
    for bits in 0..8u8 {
        let outcome = VerifierOutcome {
            g_hack: bits & 4 != 0,
            g_comp: bits & 2 != 0,
            g_corr: bits & 1 != 0,
            ..Default::default()
        };
        let expected = bits == 7;
        if outcome.feasible() != expected {
            return Err(format!("combination {bits:03b}: feasible() = {}", outcome.feasible()));
        }
    }

    let mut candidate = tanh_candidate()?;
    candidate
        .sections
        .insert("python_bind_src".into(), "at::Tensor y = x.tanh(); // no dispatch".into());
    let backend = CountingBackend { calls: std::sync::atomic::AtomicUsize::new(0) };
    let params = VerifyParams { task_id: "t".into(), atol: 1e-4, rtol: 1e-4, timeout_s: 5.0 };
    let outcome = verify(
        &params,
        &candidate,
        &backend,
        &HackRuleSet::ascend_default(),
        None,
        AuditorFailurePolicy::FailOpen,
    )
    .map_err(|e| e.to_string())?;
    if outcome.g_hack {
        return Err("hacked candidate passed the screening gate".into());
    }
    let calls = backend.calls.load(std::sync::atomic::Ordering::SeqCst);
    if calls != 0 {
        return Err(format!("screening failure still made {calls} backend calls"));
    }
    Ok(())
}

// 8. The known-good artifact parses into exactly its six sections and passes
// the static screening rules; the direct-layer-call model is refused.
fn c08_fixture_screening() -> Result<(), String> {
    let candidate = tanh_candidate()?;
    if candidate.sections.len() != 6 {
        return Err(format!("artifact parsed into {} sections, expected 6", candidate.sections.len()));
    }
    let expected_names = [
        "host_operator_src",
        "host_tiling_src",
        "kernel_src",
        "model_src",
        "project_json_src",
        "python_bind_src",
    ];
    let names: Vec<&str> = candidate.sections.keys().map(String::as_str).collect();
    if names != expected_names {
        return Err(format!("unexpected section names {names:?}"));
    }
    let result = check_anti_hack(&candidate, &HackRuleSet::ascend_default(), None, AuditorFailurePolicy::FailOpen);
    if !result.passed {
        return Err(format!("known-good artifact was refused: {:?}", result.violations));
    }

    let mut rejected = candidate.clone();
    rejected.sections.insert("model_src".into(), REJECTED_MODEL.to_string());
    let result = check_anti_hack(&rejected, &HackRuleSet::ascend_default(), None, AuditorFailurePolicy::FailOpen);
    if result.passed {
        return Err("direct-layer-call model was accepted".into());
    }
    let hit = result.violations.iter().any(|v| {
        v.category == ViolationCategory::DirectLayerCall
            && v.message.contains("the model layer is directly called: self.conv()")
    });
    if !hit {
        return Err(format!("no direct-layer-call violation reported: {:?}", result.violations));
    }
    Ok(())
}

fn brute_force_bbox(expected: &Tensor, got: &Tensor, atol: f64, rtol: f64) -> Option<Vec<(usize, usize)>> {
    let mut bbox: Option<Vec<(usize, usize)>> = None;
    for flat in 0..expected.data.len() {
        let e = expected.data[flat];
        let g = got.data[flat];
        if (g - e).abs() > atol + rtol * e.abs() {
            let mut idx = Vec::with_capacity(expected.shape.len());
            let mut rem = flat;
            for &dim in expected.shape.iter().rev() {
                idx.push(rem % dim);
                rem /= dim;
            }
            idx.reverse();
            match &mut bbox {
                None => bbox = Some(idx.iter().map(|&i| (i, i)).collect()),
                Some(b) => {
                    for (axis, &i) in idx.iter().enumerate() {
                        b[axis].0 = b[axis].0.min(i);
                        b[axis].1 = b[axis].1.max(i);
                    }
                }
            }
        }
    }
    bbox
}

// 9. The published three-sample mean reproduces, and mismatch bounding boxes
// agree with a brute-force oracle.
fn c09_latency_and_bboxes() -> Result<(), String> {
    let stats = aggregate_latency(&[13.64, 13.38, 12.913]).map_err(|e| e.to_string())?;
    if (stats.mean - 13.31).abs() > 0.01 {
        return Err(format!("three-sample mean {} not within 0.01 of 13.31", stats.mean));
    }

    let atol = 1e-3;
    let rtol = 1e-3;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for case in 0..1000 {
        let dims = rng.gen_range(1..=3);
        let shape: Vec<usize> = (0..dims).map(|_| rng.gen_range(1..=8)).collect();
        let len: usize = shape.iter().product();
        let data: Vec<f64> = (0..len).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mut perturbed = data.clone();
        let flips = rng.gen_range(0..=len.min(5));
        for _ in 0..flips {
            let at = rng.gen_range(0..len);
            perturbed[at] += if rng.gen::<bool>() { 0.5 } else { -0.5 };
        }
        let expected = Tensor::new(shape.clone(), data);
        let got = Tensor::new(shape, perturbed);
        let oracle = brute_force_bbox(&expected, &got, atol, rtol);
        let result = compare_outputs(
            &OutputValue::Tensor(expected.clone()),
            &OutputValue::Tensor(got.clone()),
            atol,
            rtol,
        );
        match (oracle, result) {
            (None, Ok(())) => {}
            (None, Err(report)) => {
                return Err(format!("case {case}: comparator reported {:?} but oracle found none", report.kind))
            }
            (Some(_), Ok(())) => return Err(format!("case {case}: comparator missed mismatches")),
            (Some(bbox), Err(report)) => {
                if report.kind != MismatchKind::Numeric || report.trials.len() != 1 {
                    return Err(format!("case {case}: unexpected report {report:?}"));
                }
                if report.trials[0].bounding_box != bbox {
                    return Err(format!(
                        "case {case}: bbox {:?} != oracle {bbox:?}",
                        report.trials[0].bounding_box
                    ));
                }
            }
        }
    }
    Ok(())
}

// 10. Speedup ratios reproduce the published reference rows.
fn c10_speedup_rows() -> Result<(), String> {
    for (reference, optimized, expected) in
        [(23.873, 4.199, 5.69), (34.756, 9.598, 3.62), (3814.723, 1725.443, 2.21)]
    {
        let got = compute_speedup(reference, optimized).map_err(|e| e.to_string())?;
        if (got - expected).abs() > 0.01 {
            return Err(format!("speedup({reference}, {optimized}) = {got}, expected {expected}"));
        }
    }
    Ok(())
}

// 11. On the distractor-heavy synthetic world, learned retrieval beats
// similarity-only retrieval in final correctness.
fn c11_ablation_direction() -> Result<(), String> {
    let spec = WorldSpec { easy_tasks: 4, p_miss: 0.01, ..Default::default() };
    let report = run_ablation(&spec, 20, 20_260_824, 12).map_err(|e| e.to_string())?;
    let wins = report
        .trials
        .iter()
        .filter(|t| t.value_final_acc >= t.heuristic_final_acc)
        .count();
    if wins < 15 {
        return Err(format!("value-driven >= heuristic in only {wins}/20 trials"));
    }
    if report.mean_delta <= 0.0 {
        return Err(format!("mean delta {} not positive", report.mean_delta));
    }
    Ok(())
}

// 12. Memory carried over from easy tasks lets hard tasks solve earlier than
// a cold start.
fn c12_transfer_direction() -> Result<(), String> {
    let spec = WorldSpec {
        easy_tasks: 4,
        hard_tasks: 2,
        p_hit: 1.0,
        p_miss: 0.0,
        noise_sigma: 0.0,
        ..Default::default()
    };
    let report = run_transfer(&spec, 20, 424_242, 5).map_err(|e| e.to_string())?;
    let wins = report
        .trials
        .iter()
        .filter(|t| t.warm_first_solve <= t.scratch_first_solve)
        .count();
    if wins < 15 {
        return Err(format!("warm start earlier-or-equal in only {wins}/20 trials"));
    }
    if report.warm_mean >= report.scratch_mean {
        return Err(format!(
            "warm mean {} not strictly earlier than scratch mean {}",
            report.warm_mean, report.scratch_mean
        ));
    }
    Ok(())
}

// 13. The refinement baseline equals the full mode run against a
// task-restricted bank with identical seeds.
fn c13_baseline_equivalence() -> Result<(), String> {
    let spec = WorldSpec { easy_tasks: 5, ..Default::default() };
    let master_seed = 31;
    let (world, tasks, bank) = build_world(&spec, master_seed).map_err(|e| e.to_string())?;
    let world = Arc::new(world);

    let mut cfg = OrchestratorConfig::default();
    cfg.mode = RunMode::ValueDriven;
    cfg.budget_t = 6;
    cfg.section_schema = synthetic_section_schema();
    cfg.hack_rules = HackRuleSet::default();
    cfg.retry_backoff_ms = 0;

    // accrue per-task history so the restricted banks are non-trivial
    let shared = SharedBank::new(bank);
    let values = SharedValueState::default();
    let warm_backend = SyntheticVerifier::new(world.clone(), master_seed);
    run_suite(&tasks, &shared, &values, &SyntheticGenerator, &warm_backend, &cfg, master_seed)
        .map_err(|e| e.to_string())?;

    for task in &tasks {
        let baseline_backend = SyntheticVerifier::new(world.clone(), master_seed);
        let baseline =
            run_refinement_baseline(task, &shared, &SyntheticGenerator, &baseline_backend, &cfg, master_seed)
                .map_err(|e| e.to_string())?;

        let restricted = SharedBank::new(shared.snapshot().restricted_to_task(&task.id));
        let fresh_values = SharedValueState::default();
        let manual_backend = SyntheticVerifier::new(world.clone(), master_seed);
        let mut manual_cfg = cfg.clone();
        manual_cfg.mode = RunMode::ValueDriven;
        let manual = run_episode(
            task,
            &restricted,
            &fresh_values,
            &SyntheticGenerator,
            &manual_backend,
            &manual_cfg,
            master_seed,
        )
        .map_err(|e| e.to_string())?;

        let a = serde_json::to_string(&baseline).map_err(|e| e.to_string())?;
        let b = serde_json::to_string(&manual).map_err(|e| e.to_string())?;
        if a != b {
            return Err(format!("task {} traces differ:\n{a}\n{b}", task.id));
        }
    }
    Ok(())
}

// 14. Two simulate runs with the same config and seed produce byte-identical
// report files.
fn c14_cli_determinism() -> Result<(), String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut hashes: Vec<BTreeMap<String, u64>> = Vec::new();
    for run in 0..2 {
        let report_dir = dir.path().join(format!("reports_{run}"));
        let config_path = dir.path().join(format!("config_{run}.toml"));
        let config = format!(
            "mode = \"value_driven\"\nbudget_t = 6\nseed = 99\n\n[paths]\nreport_dir = \"{}\"\n\n[world]\neasy_tasks = 3\n",
            report_dir.display()
        );
        std::fs::write(&config_path, config).map_err(|e| e.to_string())?;
        let output = Command::new(env!("CARGO_BIN_EXE_kernelsmith"))
            .args(["simulate", "--config"])
            .arg(&config_path)
            .output()
            .map_err(|e| e.to_string())?;
        if !output.status.success() {
            return Err(format!("simulate failed: {}", String::from_utf8_lossy(&output.stderr)));
        }

        let mut files = BTreeMap::new();
        let mut stack = vec![report_dir.clone()];
        while let Some(d) = stack.pop() {
            for entry in std::fs::read_dir(&d).map_err(|e| e.to_string())? {
                let path = entry.map_err(|e| e.to_string())?.path();
                if path.is_dir() {
                    stack.push(path);
                } else {
                    let rel = path.strip_prefix(&report_dir).unwrap().display().to_string();
                    let bytes = std::fs::read(&path).map_err(|e| e.to_string())?;
                    files.insert(rel, kernelsmith::stable_hash64(&bytes));
                }
            }
        }
        if files.is_empty() {
            return Err("simulate produced no report files".into());
        }
        hashes.push(files);
    }
    if hashes[0] != hashes[1] {
        return Err(format!("report hashes differ:\n{:?}\n{:?}", hashes[0], hashes[1]));
    }
    Ok(())
}

#[test]
fn acceptance() {
    let criteria: Vec<(&str, f64, fn() -> Result<(), String>)> = vec![
        ("01 constant/harmonic update exactness", 1.0, c01_update_exactness),
        ("02 value iterate boundedness", 10.0, c02_boundedness),
        ("03 refinement reward range and 2x point", 10.0, c03_refine_reward_range),
        ("04 streaming stats moments and floor", 10.0, c04_streaming_stats),
        ("05 stationary variance of constant step", 10.0, c05_stationary_variance),
        ("06 harmonic convergence to the mean", 10.0, c06_harmonic_convergence),
        ("07 gate conjunction and screening short-circuit", 10.0, c07_gate_table),
        ("08 artifact fixtures accepted/refused", 10.0, c08_fixture_screening),
        ("09 latency mean and mismatch bounding boxes", 10.0, c09_latency_and_bboxes),
        ("10 published speedup rows", 1.0, c10_speedup_rows),
        ("11 ablation direction on synthetic world", 120.0, c11_ablation_direction),
        ("12 easy-to-hard transfer direction", 120.0, c12_transfer_direction),
        ("13 refinement baseline equivalence", 60.0, c13_baseline_equivalence),
        ("14 end-to-end simulate determinism", 60.0, c14_cli_determinism),
    ];

    let mut failures = Vec::new();
    for (name, budget_s, run) in criteria {
        let start = Instant::now();
        let result = run();
        let elapsed = start.elapsed().as_secs_f64();
        let over_budget = elapsed > budget_s;
        match (&result, over_budget) {
            (Ok(()), false) => println!("criterion {name}: PASS ({elapsed:.2}s)"),
            (Ok(()), true) => {
                println!("criterion {name}: FAIL (passed but took {elapsed:.2}s > {budget_s}s)");
                failures.push(format!("{name}: over {budget_s}s budget ({elapsed:.2}s)"));
            }
            (Err(e), _) => {
                println!("criterion {name}: FAIL ({elapsed:.2}s) {e}");
                failures.push(format!("{name}: {e}"));
            }
        }
    }
    assert!(failures.is_empty(), "failed criteria:\n{}", failures.join("\n"));
}
