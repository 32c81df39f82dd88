//! Generator policy plumbing: prompt rendering, backend abstraction
//! (remote chat client + deterministic scripted backend), and parsing of
//! raw generations into section-structured candidates.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::infra::InfraError;
use crate::valuation::Stage;

#[derive(Debug, Error)]
pub enum GeneratorError {
    #[error("unresolved template placeholder {{{0}}}")]
    UnresolvedPlaceholder(String),
    #[error("candidate is missing required sections: {}", missing.join(", "))]
    MissingSections { missing: Vec<String> },
}

/// A parsed candidate artifact: named source sections plus loop bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateKernel {
    pub id: String,
    pub sections: BTreeMap<String, String>,
    /// Start-point candidate id this refinement branched from, if any.
    pub parent_start_point: Option<String>,
    /// Memory entry ids that were in context when this was generated.
    pub context_used: Vec<String>,
    pub iteration: usize,
}

/// One context entry as handed to the prompt, in selection order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextEntry {
    pub id: String,
    pub kind_label: String,
    pub text: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub task_id: String,
    pub task_spec: String,
    pub stage: Stage,
    pub context: Vec<ContextEntry>,
    pub start_point_source: Option<String>,
    pub start_point_latency_ms: Option<f64>,
    pub feedback: Option<String>,
    pub prompt_template_id: String,
}

fn stage_label(stage: Stage) -> &'static str {
    match stage {
        Stage::Draft => "draft",
        Stage::Refine => "refine",
    }
}

// ---------------------------------------------------------------------------
// Prompt rendering
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub id: String,
    /// Template text with `{placeholder}` slots.
    pub text: String,
    /// Total character budget for the rendered prompt.
    pub char_budget: usize,
    /// Feedback is truncated first, at this many characters.
    pub max_feedback_chars: usize,
}

pub const TRUNCATION_MARKER: &str = "\n...[feedback truncated]";

impl PromptTemplate {
    pub fn drafting_default() -> Self {
        PromptTemplate {
            id: "drafting_default".into(),
            text: "You are an expert kernel developer.\n\
                   Task specification:\n{task_spec}\n\n\
                   Reference material:\n{context}\n\n\
                   {feedback}\
                   Write the full implementation as named raw-string sections."
                .into(),
            char_budget: 64_000,
            max_feedback_chars: 4_000,
        }
    }

    pub fn refining_default() -> Self {
        PromptTemplate {
            id: "refining_default".into(),
            text: "You are an expert kernel developer.\n\
                   Task specification:\n{task_spec}\n\n\
                   Reference material:\n{context}\n\n\
                   Your previous implementation is correct. Performance: {start_latency} ms.\n\
                   Baseline implementation:\n{start_point}\n\n\
                   {feedback}\
                   Optimize it further and return the full implementation as named raw-string sections."
                .into(),
            char_budget: 64_000,
            max_feedback_chars: 4_000,
        }
    }
}

fn render_context_block(context: &[ContextEntry]) -> String {
    if context.is_empty() {
        return "(none)".into();
    }
    let mut out = String::new();
    for entry in context {
        out.push_str(&format!("### [{}] {}\n{}\n", entry.kind_label, entry.id, entry.text));
    }
    out
}

/// Render a prompt from template and request. Feedback is truncated first
/// at `max_feedback_chars` (with a marker); if the result still exceeds the
/// overall budget the context block is dropped from the end.
pub fn render_prompt(
    request: &GenerationRequest,
    template: &PromptTemplate,
) -> Result<String, GeneratorError> {
    let mut feedback = request.feedback.clone().unwrap_or_default();
    if feedback.chars().count() > template.max_feedback_chars {
        feedback = feedback.chars().take(template.max_feedback_chars).collect();
        feedback.push_str(TRUNCATION_MARKER);
    }
    if !feedback.is_empty() {
        feedback = format!("Feedback from the previous attempt:\n{feedback}\n\n");
    }

    let mut values: BTreeMap<&str, String> = BTreeMap::new();
    values.insert("task_spec", request.task_spec.clone());
    values.insert("context", render_context_block(&request.context));
    values.insert("feedback", feedback);
    values.insert(
        "start_point",
        request.start_point_source.clone().unwrap_or_default(),
    );
    values.insert(
        "start_latency",
        request
            .start_point_latency_ms
            .map(|l| format!("{l:.2}"))
            .unwrap_or_default(),
    );
    values.insert("stage", stage_label(request.stage).into());
    values.insert("task_id", request.task_id.clone());

    // single pass so substituted content containing braces is never re-expanded
    let placeholder = regex::Regex::new(r"\{([a-z_]+)\}").unwrap();
    let mut rendered = String::with_capacity(template.text.len());
    let mut last = 0;
    for caps in placeholder.captures_iter(&template.text) {
        let whole = caps.get(0).unwrap();
        let name = caps.get(1).unwrap().as_str();
        let value = values
            .get(name)
            .ok_or_else(|| GeneratorError::UnresolvedPlaceholder(name.to_string()))?;
        rendered.push_str(&template.text[last..whole.start()]);
        rendered.push_str(value);
        last = whole.end();
    }
    rendered.push_str(&template.text[last..]);

    if rendered.chars().count() > template.char_budget {
        rendered = rendered.chars().take(template.char_budget).collect();
    }
    Ok(rendered)
}

// ---------------------------------------------------------------------------
// Backends
// ---------------------------------------------------------------------------

pub trait GeneratorBackend: Send + Sync {
    /// Produce raw candidate text for the request. `prompt` is the rendered
    /// prompt; scripted backends may ignore it.
    fn generate(&self, request: &GenerationRequest, prompt: &str) -> Result<String, InfraError>;
}

/// Digest a request for scripted lookup: task id, stage, sorted context ids.
pub fn request_digest(task_id: &str, stage: Stage, context_ids: &[String]) -> String {
    let mut ids: Vec<&str> = context_ids.iter().map(String::as_str).collect();
    ids.sort_unstable();
    format!("{task_id}|{}|{}", stage_label(stage), ids.join(","))
}

/// Deterministic table-driven backend for tests: responses keyed on
/// (task id, stage, sorted context ids), with a default for misses.
#[derive(Debug, Clone, Default)]
pub struct ScriptedGenerator {
    table: BTreeMap<String, String>,
    pub default_response: String,
}

impl ScriptedGenerator {
    pub fn new(default_response: impl Into<String>) -> Self {
        ScriptedGenerator { table: BTreeMap::new(), default_response: default_response.into() }
    }

    pub fn with_response(
        mut self,
        task_id: &str,
        stage: Stage,
        context_ids: &[&str],
        response: impl Into<String>,
    ) -> Self {
        let ids: Vec<String> = context_ids.iter().map(|s| s.to_string()).collect();
        self.table.insert(request_digest(task_id, stage, &ids), response.into());
        self
    }
}

impl GeneratorBackend for ScriptedGenerator {
    fn generate(&self, request: &GenerationRequest, _prompt: &str) -> Result<String, InfraError> {
        let ids: Vec<String> = request.context.iter().map(|c| c.id.clone()).collect();
        let key = request_digest(&request.task_id, request.stage, &ids);
        Ok(self.table.get(&key).cloned().unwrap_or_else(|| self.default_response.clone()))
    }
}

/// Vendor-neutral chat-completion client. The request body is a JSON
/// template with `{prompt}` / `{model}` / `{temperature}` slots; the
/// response text is extracted with a JSON pointer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RemoteChatConfig {
    /// Environment variable holding the endpoint URL.
    pub endpoint_env: String,
    /// Environment variable holding the bearer token.
    pub api_key_env: String,
    pub model: String,
    pub temperature: f64,
    /// JSON body template; `{prompt}` is substituted as an escaped string.
    pub body_template: String,
    /// JSON pointer to the generated text in the response.
    pub response_pointer: String,
    pub timeout_s: f64,
}

impl Default for RemoteChatConfig {
    fn default() -> Self {
        RemoteChatConfig {
            endpoint_env: "GENERATOR_ENDPOINT".into(),
            api_key_env: "GENERATOR_API_KEY".into(),
            model: "default".into(),
            temperature: 0.6,
            body_template: r#"{"model": {model}, "temperature": {temperature}, "messages": [{"role": "user", "content": {prompt}}]}"#.into(),
            response_pointer: "/choices/0/message/content".into(),
            timeout_s: 120.0,
        }
    }
}

pub struct RemoteChatGenerator {
    config: RemoteChatConfig,
    client: reqwest::blocking::Client,
}

impl RemoteChatGenerator {
    pub fn new(config: RemoteChatConfig) -> Result<Self, InfraError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(std::time::Duration::from_secs_f64(config.timeout_s))
            .build()
            .map_err(|e| InfraError::Http(e.to_string()))?;
        Ok(RemoteChatGenerator { config, client })
    }

    /// Request body with the prompt substituted. Never contains credentials;
    /// those travel only in the Authorization header.
    pub fn build_body(&self, prompt: &str) -> String {
        self.config
            .body_template
            .replace("{model}", &serde_json::to_string(&self.config.model).unwrap())
            .replace("{temperature}", &self.config.temperature.to_string())
            .replace("{prompt}", &serde_json::to_string(prompt).unwrap())
    }
}

impl GeneratorBackend for RemoteChatGenerator {
    fn generate(&self, _request: &GenerationRequest, prompt: &str) -> Result<String, InfraError> {
        let endpoint = std::env::var(&self.config.endpoint_env)
            .map_err(|_| InfraError::Http(format!("{} is not set", self.config.endpoint_env)))?;
        let api_key = std::env::var(&self.config.api_key_env).unwrap_or_default();
        let body = self.build_body(prompt);
        let mut builder = self
            .client
            .post(&endpoint)
            .header("Content-Type", "application/json")
            .body(body);
        if !api_key.is_empty() {
            builder = builder.bearer_auth(api_key);
        }
        let response = builder.send().map_err(|e| InfraError::Http(e.to_string()))?;
        let status = response.status();
        let text = response.text().map_err(|e| InfraError::Http(e.to_string()))?;
        if !status.is_success() {
            return Err(InfraError::Http(format!("status {status}")));
        }
        let value: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| InfraError::Parse { msg: e.to_string(), stderr: String::new() })?;
        value
            .pointer(&self.config.response_pointer)
            .and_then(|v| v.as_str())
            .map(str::to_string)
            .ok_or_else(|| InfraError::Parse {
                msg: format!("no text at pointer {}", self.config.response_pointer),
                stderr: String::new(),
            })
    }
}

// ---------------------------------------------------------------------------
// Candidate parsing
// ---------------------------------------------------------------------------

/// Which sections a parsed candidate must contain.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SectionSchema {
    pub required: Vec<String>,
}

impl SectionSchema {
    pub fn new(required: &[&str]) -> Self {
        SectionSchema { required: required.iter().map(|s| s.to_string()).collect() }
    }

    /// The six-section Ascend-style artifact layout.
    pub fn ascend_default() -> Self {
        SectionSchema::new(&[
            "project_json_src",
            "host_tiling_src",
            "host_operator_src",
            "kernel_src",
            "python_bind_src",
            "model_src",
        ])
    }
}

/// Extract sections delimited as `NAME = r'''...'''` (or `r"""..."""`) at
/// top level. Content may nest the other fence style freely.
pub fn parse_candidate(
    raw: &str,
    schema: &SectionSchema,
) -> Result<BTreeMap<String, String>, GeneratorError> {
    let marker = regex::Regex::new(r#"(?m)^([A-Za-z_]\w*)\s*=\s*r('''|""")"#).unwrap();
    let mut sections = BTreeMap::new();
    let mut pos = 0;
    while let Some(caps) = marker.captures(&raw[pos..]) {
        let whole = caps.get(0).unwrap();
        let name = caps.get(1).unwrap().as_str().to_string();
        let fence = caps.get(2).unwrap().as_str();
        let body_start = pos + whole.end();
        match raw[body_start..].find(fence) {
            Some(rel_end) => {
                sections.insert(name, raw[body_start..body_start + rel_end].to_string());
                pos = body_start + rel_end + fence.len();
            }
            None => break, // unterminated fence, treat as missing
        }
    }
    let missing: Vec<String> = schema
        .required
        .iter()
        .filter(|name| !sections.contains_key(*name))
        .cloned()
        .collect();
    if missing.is_empty() {
        Ok(sections)
    } else {
        Err(GeneratorError::MissingSections { missing })
    }
}

/// Inverse of [`parse_candidate`] for section maps; picks a fence style the
/// content does not contain.
pub fn serialize_candidate(sections: &BTreeMap<String, String>) -> String {
    let mut out = String::new();
    for (name, body) in sections {
        let fence = if body.contains("'''") { "\"\"\"" } else { "'''" };
        out.push_str(&format!("{name} = r{fence}{body}{fence}\n\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_request() -> GenerationRequest {
        GenerationRequest {
            task_id: "t1".into(),
            task_spec: "elementwise tanh over fp32".into(),
            stage: Stage::Draft,
            context: Vec::new(),
            start_point_source: None,
            start_point_latency_ms: None,
            feedback: None,
            prompt_template_id: "drafting_default".into(),
        }
    }

    #[test]
    fn drafting_with_empty_context() {
        let prompt = render_prompt(&base_request(), &PromptTemplate::drafting_default()).unwrap();
        assert!(prompt.contains("elementwise tanh over fp32"));
        assert!(prompt.contains("(none)"));
        assert!(!prompt.contains("Feedback"));
    }

    #[test]
    fn context_rendered_in_selection_order_with_kind_headers() {
        let mut req = base_request();
        req.context = vec![
            ContextEntry { id: "k2".into(), kind_label: "experience".into(), text: "two".into() },
            ContextEntry { id: "k1".into(), kind_label: "api_template".into(), text: "one".into() },
        ];
        let prompt = render_prompt(&req, &PromptTemplate::drafting_default()).unwrap();
        let p2 = prompt.find("### [experience] k2").unwrap();
        let p1 = prompt.find("### [api_template] k1").unwrap();
        assert!(p2 < p1);
    }

    #[test]
    fn feedback_truncated_at_cap_with_marker() {
        let mut req = base_request();
        req.feedback = Some("x".repeat(10_000));
        let template = PromptTemplate::drafting_default();
        let prompt = render_prompt(&req, &template).unwrap();
        assert!(prompt.contains(TRUNCATION_MARKER));
        let run: String = "x".repeat(4_000);
        assert!(prompt.contains(&format!("{run}{TRUNCATION_MARKER}")));
        assert!(!prompt.contains(&"x".repeat(4_001)));
    }

    #[test]
    fn refining_prompt_carries_performance_turn() {
        let mut req = base_request();
        req.stage = Stage::Refine;
        req.start_point_source = Some("old kernel text".into());
        req.start_point_latency_ms = Some(13.31);
        let prompt = render_prompt(&req, &PromptTemplate::refining_default()).unwrap();
        assert!(prompt.contains("Performance: 13.31 ms"));
        assert!(prompt.contains("old kernel text"));
    }

    #[test]
    fn unresolved_placeholder_is_an_error() {
        let template = PromptTemplate {
            id: "broken".into(),
            text: "hello {nonexistent_slot}".into(),
            char_budget: 1000,
            max_feedback_chars: 100,
        };
        let err = render_prompt(&base_request(), &template).unwrap_err();
        assert!(matches!(err, GeneratorError::UnresolvedPlaceholder(ref s) if s == "nonexistent_slot"));
    }

    #[test]
    fn substituted_braces_are_not_re_expanded() {
        let mut req = base_request();
        req.task_spec = "spec with {feedback} literal".into();
        let prompt = render_prompt(&req, &PromptTemplate::drafting_default()).unwrap();
        assert!(prompt.contains("spec with {feedback} literal"));
    }

    #[test]
    fn char_budget_enforced() {
        let mut template = PromptTemplate::drafting_default();
        template.char_budget = 50;
        let prompt = render_prompt(&base_request(), &template).unwrap();
        assert_eq!(prompt.chars().count(), 50);
    }

    #[test]
    fn scripted_lookup_and_default() {
        let backend = ScriptedGenerator::new("bad code").with_response(
            "t1",
            Stage::Draft,
            &["k3"],
            "good code",
        );
        let mut req = base_request();
        req.context = vec![ContextEntry {
            id: "k3".into(),
            kind_label: "experience".into(),
            text: String::new(),
        }];
        assert_eq!(backend.generate(&req, "").unwrap(), "good code");

        req.context[0].id = "k1".into();
        assert_eq!(backend.generate(&req, "").unwrap(), "bad code");
    }

    #[test]
    fn scripted_digest_ignores_context_order() {
        let a = request_digest("t1", Stage::Draft, &["b".into(), "a".into()]);
        let b = request_digest("t1", Stage::Draft, &["a".into(), "b".into()]);
        assert_eq!(a, b);
        assert_ne!(a, request_digest("t1", Stage::Refine, &["a".into(), "b".into()]));
    }

    #[test]
    fn parse_extracts_named_sections() {
        let raw = "header chatter\n\
                   kernel_src = r'''__global__ void f() {}'''\n\
                   model_src = r\"\"\"class ModelNew: pass\"\"\"\n";
        let schema = SectionSchema::new(&["kernel_src", "model_src"]);
        let sections = parse_candidate(raw, &schema).unwrap();
        assert_eq!(sections["kernel_src"], "__global__ void f() {}");
        assert_eq!(sections["model_src"], "class ModelNew: pass");
    }

    #[test]
    fn missing_sections_listed() {
        let raw = "kernel_src = r'''body'''";
        let schema = SectionSchema::new(&["kernel_src", "model_src", "python_bind_src"]);
        match parse_candidate(raw, &schema) {
            Err(GeneratorError::MissingSections { missing }) => {
                assert_eq!(missing, vec!["model_src".to_string(), "python_bind_src".to_string()]);
            }
            other => panic!("expected missing sections, got {other:?}"),
        }
    }

    #[test]
    fn no_markers_lists_all_required() {
        let schema = SectionSchema::new(&["a_src", "b_src"]);
        match parse_candidate("free-form prose without markers", &schema) {
            Err(GeneratorError::MissingSections { missing }) => assert_eq!(missing.len(), 2),
            other => panic!("expected failure, got {other:?}"),
        }
    }

    #[test]
    fn nested_other_fence_style_survives() {
        let raw = "python_bind_src = r'''def f():\n    \"\"\"docstring\"\"\"\n    pass'''\n\
                   model_src = r\"\"\"s = '''inner'''\"\"\"\n";
        let schema = SectionSchema::new(&["python_bind_src", "model_src"]);
        let sections = parse_candidate(raw, &schema).unwrap();
        assert!(sections["python_bind_src"].contains("\"\"\"docstring\"\"\""));
        assert!(sections["model_src"].contains("'''inner'''"));
    }

    #[test]
    fn serialize_then_parse_round_trips() {
        let mut sections = BTreeMap::new();
        sections.insert("kernel_src".to_string(), "void f() { int x = 1; }".to_string());
        sections.insert("model_src".to_string(), "has ''' inside".to_string());
        let raw = serialize_candidate(&sections);
        let schema = SectionSchema::new(&["kernel_src", "model_src"]);
        let parsed = parse_candidate(&raw, &schema).unwrap();
        assert_eq!(parsed, sections);
    }

    #[test]
    fn remote_body_never_contains_credentials() {
        let config = RemoteChatConfig::default();
        let client = RemoteChatGenerator::new(config).unwrap();
        let body = client.build_body("prompt with \"quotes\" and {braces}");
        let parsed: serde_json::Value = serde_json::from_str(&body).unwrap();
        assert_eq!(
            parsed.pointer("/messages/0/content").unwrap().as_str().unwrap(),
            "prompt with \"quotes\" and {braces}"
        );
        assert!(!body.contains("GENERATOR_API_KEY"));
    }
}
