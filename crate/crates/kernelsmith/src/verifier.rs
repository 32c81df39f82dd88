//! Multi-gate verification: anti-hacking screening, compilation/correctness
//! gates via pluggable backends, latency aggregation, and structured
//! mismatch diagnostics.
//!
//! Gates run in order hack -> comp -> corr with fail-fast: a failed earlier
//! gate leaves later gates false and unevaluated, and a failed hack gate
//! performs no backend call at all.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::generator::CandidateKernel;
use crate::infra::InfraError;

#[derive(Debug, Error)]
pub enum VerifierError {
    #[error("latency aggregation requires at least one sample")]
    EmptySamples,
    #[error("invalid rule pattern {pattern}: {msg}")]
    BadPattern { pattern: String, msg: String },
}

/// Structured result of one verification call.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VerifierOutcome {
    pub g_hack: bool,
    pub g_comp: bool,
    pub g_corr: bool,
    pub latency_ms: Option<f64>,
    pub latency_samples: Vec<f64>,
    pub error: Option<OutcomeError>,
    pub profiling_digest: Option<BTreeMap<String, f64>>,
}

impl VerifierOutcome {
    /// Combined feasibility gate.
    pub fn feasible(&self) -> bool {
        self.g_hack && self.g_comp && self.g_corr
    }

    pub fn feasible_with_latency(samples: Vec<f64>) -> Self {
        let mean = samples.iter().sum::<f64>() / samples.len() as f64;
        VerifierOutcome {
            g_hack: true,
            g_comp: true,
            g_corr: true,
            latency_ms: Some(mean),
            latency_samples: samples,
            error: None,
            profiling_digest: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeError {
    Violations(Vec<Violation>),
    Mismatch(MismatchReport),
    Text(String),
}

impl OutcomeError {
    pub fn summary(&self) -> String {
        match self {
            OutcomeError::Violations(v) => v
                .iter()
                .map(|x| x.message.clone())
                .collect::<Vec<_>>()
                .join("; "),
            OutcomeError::Mismatch(m) => m.render(),
            OutcomeError::Text(t) => t.clone(),
        }
    }
}

// ---------------------------------------------------------------------------
// Mismatch reporting
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MismatchKind {
    Shape,
    Numeric,
    Type,
    Length,
    Timeout,
    Runtime,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialDiff {
    pub trial: usize,
    pub mismatch_count: usize,
    pub total_elements: usize,
    pub max_abs: f64,
    pub max_rel: f64,
    /// Minimal axis-aligned index box covering all mismatches, inclusive
    /// (lo, hi) per axis.
    pub bounding_box: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MismatchReport {
    pub kind: MismatchKind,
    pub expected: String,
    pub got: String,
    pub trials_passed: usize,
    pub trials_total: usize,
    pub trials: Vec<TrialDiff>,
}

impl MismatchReport {
    pub fn render(&self) -> String {
        match self.kind {
            MismatchKind::Shape => {
                format!("output.shape mismatch: expected {}, got {}", self.expected, self.got)
            }
            MismatchKind::Type => {
                format!("type(output) mismatch: expected {}, got {}", self.expected, self.got)
            }
            MismatchKind::Length => {
                format!("len(output) mismatch: expected {}, got {}", self.expected, self.got)
            }
            MismatchKind::Timeout | MismatchKind::Runtime => self.got.clone(),
            MismatchKind::Numeric => {
                let mut out = format!(
                    "[FAIL] Output mismatch: {}/{} trials passed, {} failed.",
                    self.trials_passed,
                    self.trials_total,
                    self.trials_total - self.trials_passed
                );
                for d in &self.trials {
                    let bbox = d
                        .bounding_box
                        .iter()
                        .map(|(lo, hi)| format!("{lo}:{hi}"))
                        .collect::<Vec<_>>()
                        .join(", ");
                    out.push_str(&format!(
                        "\nTrial {}: {}/{} mismatched, max_abs={:.4}, max_rel={:.4}, Bounding box: output[{}]",
                        d.trial, d.mismatch_count, d.total_elements, d.max_abs, d.max_rel, bbox
                    ));
                }
                out
            }
        }
    }
}

/// Dense numeric tensor in row-major layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "shape/data length mismatch");
        Tensor { shape, data }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum OutputValue {
    Tensor(Tensor),
    Tuple(Vec<OutputValue>),
    /// Non-tensor value; carries the reported type name.
    Other(String),
}

impl OutputValue {
    fn type_name(&self) -> &str {
        match self {
            OutputValue::Tensor(_) => "Tensor",
            OutputValue::Tuple(_) => "tuple",
            OutputValue::Other(name) => name,
        }
    }
}

fn structural_report(kind: MismatchKind, expected: String, got: String, trials_total: usize) -> MismatchReport {
    MismatchReport { kind, expected, got, trials_passed: 0, trials_total, trials: Vec::new() }
}

/// Compare one trial's output against the reference. Type, length, and shape
/// are checked first, in that order; numeric tolerance is
/// `|got - exp| > atol + rtol * |exp|` per element.
pub fn compare_outputs(
    expected: &OutputValue,
    got: &OutputValue,
    atol: f64,
    rtol: f64,
) -> Result<(), MismatchReport> {
    compare_trials(std::slice::from_ref(expected), std::slice::from_ref(got), atol, rtol)
}

/// Multi-trial comparison. Structural failures (type/length/shape) report
/// immediately; numeric failures are aggregated per trial.
pub fn compare_trials(
    expected: &[OutputValue],
    got: &[OutputValue],
    atol: f64,
    rtol: f64,
) -> Result<(), MismatchReport> {
    let total = expected.len();
    let mut diffs = Vec::new();
    let mut passed = 0;
    for (i, (e, g)) in expected.iter().zip(got.iter()).enumerate() {
        match compare_one(e, g, atol, rtol, i + 1, total)? {
            None => passed += 1,
            Some(diff) => diffs.push(diff),
        }
    }
    if diffs.is_empty() {
        Ok(())
    } else {
        Err(MismatchReport {
            kind: MismatchKind::Numeric,
            expected: "reference output".into(),
            got: "kernel output".into(),
            trials_passed: passed,
            trials_total: total,
            trials: diffs,
        })
    }
}

fn compare_one(
    expected: &OutputValue,
    got: &OutputValue,
    atol: f64,
    rtol: f64,
    trial: usize,
    trials_total: usize,
) -> Result<Option<TrialDiff>, MismatchReport> {
    match (expected, got) {
        (OutputValue::Tensor(e), OutputValue::Tensor(g)) => {
            if e.shape != g.shape {
                return Err(structural_report(
                    MismatchKind::Shape,
                    format!("{:?}", e.shape).replace('[', "(").replace(']', ")"),
                    format!("{:?}", g.shape).replace('[', "(").replace(']', ")"),
                    trials_total,
                ));
            }
            Ok(numeric_diff(e, g, atol, rtol, trial))
        }
        (OutputValue::Tuple(e), OutputValue::Tuple(g)) => {
            if e.len() != g.len() {
                return Err(structural_report(
                    MismatchKind::Length,
                    e.len().to_string(),
                    g.len().to_string(),
                    trials_total,
                ));
            }
            let mut merged: Option<TrialDiff> = None;
            for (ee, gg) in e.iter().zip(g.iter()) {
                if let Some(d) = compare_one(ee, gg, atol, rtol, trial, trials_total)? {
                    merged = Some(match merged {
                        None => d,
                        Some(mut m) => {
                            m.mismatch_count += d.mismatch_count;
                            m.total_elements += d.total_elements;
                            m.max_abs = m.max_abs.max(d.max_abs);
                            m.max_rel = m.max_rel.max(d.max_rel);
                            m
                        }
                    });
                }
            }
            Ok(merged)
        }
        (e, g) => Err(structural_report(
            MismatchKind::Type,
            e.type_name().to_string(),
            g.type_name().to_string(),
            trials_total,
        )),
    }
}

fn numeric_diff(e: &Tensor, g: &Tensor, atol: f64, rtol: f64, trial: usize) -> Option<TrialDiff> {
    let ndim = e.shape.len().max(1);
    let mut count = 0usize;
    let mut max_abs: f64 = 0.0;
    let mut max_rel: f64 = 0.0;
    let mut lo = vec![usize::MAX; ndim];
    let mut hi = vec![0usize; ndim];
    for (flat, (&ev, &gv)) in e.data.iter().zip(g.data.iter()).enumerate() {
        let abs = (gv - ev).abs();
        let bad = !abs.is_finite() || abs > atol + rtol * ev.abs();
        if !bad {
            continue;
        }
        count += 1;
        max_abs = max_abs.max(abs);
        max_rel = max_rel.max(abs / ev.abs().max(1e-12));
        let idx = unravel(flat, &e.shape);
        for (axis, &i) in idx.iter().enumerate() {
            lo[axis] = lo[axis].min(i);
            hi[axis] = hi[axis].max(i);
        }
    }
    if count == 0 {
        return None;
    }
    Some(TrialDiff {
        trial,
        mismatch_count: count,
        total_elements: e.data.len(),
        max_abs,
        max_rel,
        bounding_box: lo.into_iter().zip(hi).collect(),
    })
}

fn unravel(mut flat: usize, shape: &[usize]) -> Vec<usize> {
    if shape.is_empty() {
        return vec![0];
    }
    let mut idx = vec![0; shape.len()];
    for axis in (0..shape.len()).rev() {
        idx[axis] = flat % shape[axis];
        flat /= shape[axis];
    }
    idx
}

// ---------------------------------------------------------------------------
// Latency aggregation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

/// Arithmetic mean and population standard deviation over profiling samples.
pub fn aggregate_latency(samples: &[f64]) -> Result<LatencyStats, VerifierError> {
    if samples.is_empty() {
        return Err(VerifierError::EmptySamples);
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
    let min = samples.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = samples.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(LatencyStats { mean, std: var.sqrt(), min, max })
}

// ---------------------------------------------------------------------------
// Anti-hacking rule engine
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationCategory {
    Dispatch,
    ForbiddenCall,
    MissingClass,
    DirectLayerCall,
    MissingCustomCall,
    Auditor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub category: ViolationCategory,
    pub section: String,
    pub message: String,
}

/// Required class shape for the model section: `class_name` extending
/// `base_name`, delegating computation through `must_call_symbol`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassContract {
    pub section: String,
    pub class_name: String,
    pub base_name: String,
    pub must_call_symbol: String,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct HackRuleSet {
    /// Section -> substrings that must appear (kernel dispatch commands).
    #[serde(default)]
    pub required_dispatch_tokens: BTreeMap<String, Vec<String>>,
    /// Section -> regex patterns for forbidden computational calls.
    #[serde(default)]
    pub forbidden_call_patterns: BTreeMap<String, Vec<String>>,
    /// Section -> regex allowlist exempting matches of the forbidden
    /// patterns (allocation-only calls).
    #[serde(default)]
    pub allowed_call_patterns: BTreeMap<String, Vec<String>>,
    #[serde(default)]
    pub required_class_contract: Option<ClassContract>,
}

impl HackRuleSet {
    /// Rules for the Ascend-style six-section artifact layout.
    pub fn ascend_default() -> Self {
        let mut rules = HackRuleSet::default();
        rules
            .required_dispatch_tokens
            .insert("python_bind_src".into(), vec!["EXEC_NPU_CMD".into()]);
        rules
            .forbidden_call_patterns
            .insert("python_bind_src".into(), vec![r"(?:at|torch)::\w+".into()]);
        rules.allowed_call_patterns.insert(
            "python_bind_src".into(),
            vec![r"(?:at|torch)::(?:empty|zeros|ones|full|empty_like|zeros_like|ones_like|full_like|Tensor|ScalarType|kFloat)\b".into()],
        );
        rules.forbidden_call_patterns.insert(
            "model_src".into(),
            vec![
                r"torch\.(?:matmul|mm|bmm|add|sub|mul|div|einsum|conv\d*d|relu|sigmoid|tanh|softmax|exp|log|pow|sqrt|sum|mean|amax|amin|max|min)\s*\(".into(),
                r"F\.(?:conv\d*d|relu|sigmoid|tanh|softmax|linear|max_pool\d*d|avg_pool\d*d)\s*\(".into(),
            ],
        );
        rules.required_class_contract = Some(ClassContract {
            section: "model_src".into(),
            class_name: "ModelNew".into(),
            base_name: "nn.Module".into(),
            must_call_symbol: "custom_ops_lib".into(),
        });
        rules
    }

    pub fn is_empty(&self) -> bool {
        self.required_dispatch_tokens.is_empty()
            && self.forbidden_call_patterns.is_empty()
            && self.required_class_contract.is_none()
    }
}

/// Verdict of the model-based auditor hook.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AuditVerdict {
    pub valid: bool,
    pub reason: String,
}

/// Pluggable second-layer audit, typically a generator-client call.
pub trait Auditor: Send + Sync {
    fn audit(&self, candidate: &CandidateKernel) -> Result<AuditVerdict, InfraError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuditorFailurePolicy {
    FailOpen,
    FailClosed,
}

#[derive(Debug, Clone, Default)]
pub struct AntiHackResult {
    pub passed: bool,
    pub violations: Vec<Violation>,
    pub warnings: Vec<String>,
}

/// Rule layer plus optional model-based audit. The audit hook runs only when
/// every static rule passes; auditor infrastructure failures follow
/// `policy` (default fail-open with a warning).
pub fn check_anti_hack(
    candidate: &CandidateKernel,
    rules: &HackRuleSet,
    auditor: Option<&dyn Auditor>,
    policy: AuditorFailurePolicy,
) -> AntiHackResult {
    let mut violations = Vec::new();

    for (section, tokens) in &rules.required_dispatch_tokens {
        let text = candidate.sections.get(section).map(String::as_str).unwrap_or("");
        for token in tokens {
            if !text.contains(token.as_str()) {
                violations.push(Violation {
                    category: ViolationCategory::Dispatch,
                    section: section.clone(),
                    message: format!("{section} must explicitly invoke the kernel execution command {token}"),
                });
            }
        }
    }

    for (section, patterns) in &rules.forbidden_call_patterns {
        let text = match candidate.sections.get(section) {
            Some(t) => t,
            None => continue,
        };
        let allow: Vec<Regex> = rules
            .allowed_call_patterns
            .get(section)
            .map(|ps| ps.iter().filter_map(|p| Regex::new(p).ok()).collect())
            .unwrap_or_default();
        for pattern in patterns {
            let re = match Regex::new(pattern) {
                Ok(re) => re,
                Err(e) => {
                    violations.push(Violation {
                        category: ViolationCategory::ForbiddenCall,
                        section: section.clone(),
                        message: format!("invalid rule pattern {pattern}: {e}"),
                    });
                    continue;
                }
            };
            for m in re.find_iter(text) {
                let excerpt = m.as_str();
                if allow.iter().any(|a| a.is_match(excerpt)) {
                    continue;
                }
                violations.push(Violation {
                    category: ViolationCategory::ForbiddenCall,
                    section: section.clone(),
                    message: format!("forbidden computational call in {section}: {excerpt}"),
                });
            }
        }
    }

    if let Some(contract) = &rules.required_class_contract {
        let text = candidate.sections.get(&contract.section).map(String::as_str).unwrap_or("");
        violations.extend(check_class_contract(text, contract));
    }

    let mut warnings = Vec::new();
    let mut passed = violations.is_empty();
    if passed {
        if let Some(auditor) = auditor {
            match auditor.audit(candidate) {
                Ok(verdict) => {
                    if !verdict.valid {
                        passed = false;
                        violations.push(Violation {
                            category: ViolationCategory::Auditor,
                            section: String::new(),
                            message: verdict.reason,
                        });
                    }
                }
                Err(e) => match policy {
                    AuditorFailurePolicy::FailOpen => {
                        warnings.push(format!("auditor unavailable, failing open: {e}"));
                    }
                    AuditorFailurePolicy::FailClosed => {
                        passed = false;
                        violations.push(Violation {
                            category: ViolationCategory::Auditor,
                            section: String::new(),
                            message: format!("auditor unavailable, failing closed: {e}"),
                        });
                    }
                },
            }
        }
    }
    AntiHackResult { passed, violations, warnings }
}

fn check_class_contract(text: &str, contract: &ClassContract) -> Vec<Violation> {
    let mut violations = Vec::new();
    let class_re = Regex::new(&format!(r"class\s+{}\s*\(([^)]*)\)", regex::escape(&contract.class_name))).unwrap();
    let base_ok = match class_re.captures(text) {
        Some(caps) => caps[1].contains(&contract.base_name),
        None => false,
    };
    if !base_ok {
        violations.push(Violation {
            category: ViolationCategory::MissingClass,
            section: contract.section.clone(),
            message: format!(
                "{} must define class {} extending {}",
                contract.section, contract.class_name, contract.base_name
            ),
        });
        return violations;
    }

    let init_body = method_body(text, "__init__").unwrap_or_default();
    let forward_body = match method_body(text, "forward") {
        Some(b) => b,
        None => {
            violations.push(Violation {
                category: ViolationCategory::MissingCustomCall,
                section: contract.section.clone(),
                message: format!("class {} has no forward method", contract.class_name),
            });
            return violations;
        }
    };

    // layers constructed in __init__ must not be invoked directly in forward
    let layer_re = Regex::new(r"self\.(\w+)\s*=\s*(?:torch\.)?nn\.\w+").unwrap();
    for caps in layer_re.captures_iter(&init_body) {
        let name = &caps[1];
        let call_re = Regex::new(&format!(r"self\.{}\s*\(", regex::escape(name))).unwrap();
        if call_re.is_match(&forward_body) {
            violations.push(Violation {
                category: ViolationCategory::DirectLayerCall,
                section: contract.section.clone(),
                message: format!(
                    "In the forward method, the model layer is directly called: self.{name}(). \
                     Computation must be delegated to {}",
                    contract.must_call_symbol
                ),
            });
        }
    }

    if !forward_body.contains(&contract.must_call_symbol) {
        violations.push(Violation {
            category: ViolationCategory::MissingCustomCall,
            section: contract.section.clone(),
            message: format!("forward must call {} to delegate computation", contract.must_call_symbol),
        });
    }
    violations
}

/// Indentation-scoped body of `def <name>(...)`, excluding the def line.
fn method_body(text: &str, name: &str) -> Option<String> {
    let def_re = Regex::new(&format!(r"(?m)^([ \t]*)def\s+{}\s*\(", regex::escape(name))).unwrap();
    let caps = def_re.captures(text)?;
    let def_indent = caps[1].len();
    let start = caps.get(0)?.start();
    let mut body = String::new();
    let mut past_def = false;
    for line in text[start..].lines() {
        if !past_def {
            past_def = true;
            continue;
        }
        let indent = line.len() - line.trim_start().len();
        if !line.trim().is_empty() && indent <= def_indent {
            break;
        }
        body.push_str(line);
        body.push('\n');
    }
    Some(body)
}

// ---------------------------------------------------------------------------
// Backend protocol
// ---------------------------------------------------------------------------

/// Request sent to a verifier backend. Field names are the wire format.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackendRequest {
    pub task_id: String,
    pub sections: BTreeMap<String, String>,
    pub atol: f64,
    pub rtol: f64,
    pub timeout_s: f64,
}

/// Response read from a verifier backend. Field names are the wire format.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackendResponse {
    pub compiled: bool,
    pub correct: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency_samples: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profiling: Option<serde_json::Value>,
}

pub trait VerifierBackend: Send + Sync {
    fn run(&self, request: &BackendRequest) -> Result<BackendResponse, InfraError>;
}

#[derive(Debug, Clone)]
pub struct VerifyParams {
    pub task_id: String,
    pub atol: f64,
    pub rtol: f64,
    pub timeout_s: f64,
}

/// Run all gates in order with fail-fast. Infra failures of the backend
/// propagate as retryable errors; everything else becomes an outcome.
pub fn verify(
    params: &VerifyParams,
    candidate: &CandidateKernel,
    backend: &dyn VerifierBackend,
    rules: &HackRuleSet,
    auditor: Option<&dyn Auditor>,
    policy: AuditorFailurePolicy,
) -> Result<VerifierOutcome, InfraError> {
    let hack = check_anti_hack(candidate, rules, auditor, policy);
    if !hack.passed {
        return Ok(VerifierOutcome {
            g_hack: false,
            error: Some(OutcomeError::Violations(hack.violations)),
            ..Default::default()
        });
    }

    let request = BackendRequest {
        task_id: params.task_id.clone(),
        sections: candidate.sections.clone(),
        atol: params.atol,
        rtol: params.rtol,
        timeout_s: params.timeout_s,
    };
    let response = backend.run(&request)?;

    let mut outcome = VerifierOutcome { g_hack: true, g_comp: response.compiled, ..Default::default() };
    if !response.compiled {
        outcome.error = Some(OutcomeError::Text(
            response.error.unwrap_or_else(|| "compilation failed".into()),
        ));
        return Ok(outcome);
    }
    outcome.g_corr = response.correct;
    if !response.correct {
        outcome.error = Some(OutcomeError::Text(
            response.error.unwrap_or_else(|| "correctness check failed".into()),
        ));
        return Ok(outcome);
    }
    let samples = response.latency_samples.unwrap_or_default();
    if samples.is_empty() {
        return Err(InfraError::Parse {
            msg: "correct response carried no latency samples".into(),
            stderr: String::new(),
        });
    }
    let stats = aggregate_latency(&samples).expect("non-empty samples");
    outcome.latency_ms = Some(stats.mean);
    outcome.latency_samples = samples;
    if let Some(profiling) = response.profiling {
        let mut digest = BTreeMap::new();
        flatten_numeric(&profiling, "", &mut digest);
        if !digest.is_empty() {
            outcome.profiling_digest = Some(digest);
        }
    }
    Ok(outcome)
}

fn flatten_numeric(value: &serde_json::Value, prefix: &str, out: &mut BTreeMap<String, f64>) {
    match value {
        serde_json::Value::Number(n) => {
            if let Some(f) = n.as_f64() {
                out.insert(prefix.to_string(), f);
            }
        }
        serde_json::Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten_numeric(v, &key, out);
            }
        }
        _ => {}
    }
}

// ---------------------------------------------------------------------------
// Subprocess backend
// ---------------------------------------------------------------------------

/// Runs the configured command per verification: request JSON on stdin,
/// response JSON on stdout, wall-clock timeout enforced.
#[derive(Debug, Clone)]
pub struct SubprocessBackend {
    pub program: PathBuf,
    pub args: Vec<String>,
    /// Wall-clock ceiling for one backend invocation.
    pub wall_timeout: Duration,
}

impl SubprocessBackend {
    pub fn new(program: impl Into<PathBuf>, args: Vec<String>, wall_timeout: Duration) -> Self {
        SubprocessBackend { program: program.into(), args, wall_timeout }
    }
}

impl VerifierBackend for SubprocessBackend {
    fn run(&self, request: &BackendRequest) -> Result<BackendResponse, InfraError> {
        let payload = serde_json::to_string(request).expect("request serializes");
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()?;

        {
            let mut stdin = child.stdin.take().expect("piped stdin");
            // backend may exit without reading; a broken pipe here is its
            // exit status's problem, not ours
            let _ = stdin.write_all(payload.as_bytes());
            let _ = stdin.write_all(b"\n");
        }

        let deadline = Instant::now() + self.wall_timeout;
        loop {
            match child.try_wait()? {
                Some(_) => break,
                None => {
                    if Instant::now() >= deadline {
                        let _ = child.kill();
                        let _ = child.wait();
                        return Err(InfraError::Timeout(self.wall_timeout.as_secs_f64()));
                    }
                    std::thread::sleep(Duration::from_millis(5));
                }
            }
        }
        let output = child.wait_with_output()?;
        let stderr = String::from_utf8_lossy(&output.stderr).into_owned();
        if !output.status.success() {
            return Err(InfraError::Exit { status: output.status.code().unwrap_or(-1), stderr });
        }
        let stdout = String::from_utf8_lossy(&output.stdout);
        serde_json::from_str(stdout.trim()).map_err(|e| InfraError::Parse { msg: e.to_string(), stderr })
    }
}
