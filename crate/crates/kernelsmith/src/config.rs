//! Run configuration: one TOML file with strict schema checking, plus the
//! mapping onto orchestrator configuration. Credentials never live here;
//! the remote generator reads them from environment variables.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::generator::RemoteChatConfig;
use crate::memory::RetrievalConfig;
use crate::orchestrator::{OrchestratorConfig, RunMode};
use crate::simenv::WorldSpec;
use crate::valuation::ValueConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config schema error: {0}")]
    Schema(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub bank_file: PathBuf,
    pub q_table_file: PathBuf,
    pub report_dir: PathBuf,
    /// JSON array of tasks for `run`; unused by the synthetic commands.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tasks_file: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            bank_file: "bank.jsonl".into(),
            q_table_file: "qtable.json".into(),
            report_dir: "reports".into(),
            tasks_file: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    Scripted,
    Remote,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorSection {
    pub kind: GeneratorKind,
    /// Scripted backend default response.
    pub default_response: String,
    pub remote: RemoteChatConfig,
}

impl Default for GeneratorSection {
    fn default() -> Self {
        GeneratorSection {
            kind: GeneratorKind::Synthetic,
            default_response: String::new(),
            remote: RemoteChatConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifierSection {
    /// Subprocess backend command for `run`; first element is the program.
    pub backend_command: Vec<String>,
    pub timeout_s: f64,
    pub infra_retries: usize,
    pub retry_backoff_ms: u64,
}

impl Default for VerifierSection {
    fn default() -> Self {
        VerifierSection {
            backend_command: Vec::new(),
            timeout_s: 60.0,
            infra_retries: 3,
            retry_backoff_ms: 500,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: RunMode,
    pub budget_t: usize,
    pub parallelism: usize,
    pub seed: u64,
    /// Attempts for the pass@k baseline.
    pub pass_k: usize,
    /// Paired trials for ablation/transfer experiments.
    pub trials: usize,
    pub paths: PathsConfig,
    pub retrieval: RetrievalConfig,
    pub value: ValueConfig,
    pub verifier: VerifierSection,
    pub generator: GeneratorSection,
    pub world: WorldSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            mode: RunMode::ValueDriven,
            budget_t: 30,
            parallelism: 1,
            seed: 0,
            pass_k: 1,
            trials: 20,
            paths: PathsConfig::default(),
            retrieval: RetrievalConfig::default(),
            value: ValueConfig::default(),
            verifier: VerifierSection::default(),
            generator: GeneratorSection::default(),
            world: WorldSpec::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Io { path: path.to_path_buf(), source: e })?;
        toml::from_str(&raw).map_err(|e| ConfigError::Schema(e.to_string()))
    }

    /// The effective configuration as TOML; loading this back yields the
    /// same config (round-trip idempotence).
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn orchestrator(&self) -> OrchestratorConfig {
        OrchestratorConfig {
            mode: self.mode,
            budget_t: self.budget_t,
            parallelism: self.parallelism,
            retrieval: self.retrieval.clone(),
            value: self.value.clone(),
            infra_retries: self.verifier.infra_retries,
            retry_backoff_ms: self.verifier.retry_backoff_ms,
            verify_timeout_s: self.verifier.timeout_s,
            ..Default::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_idempotently() {
        let cfg = RunConfig::default();
        let once = cfg.to_toml();
        let reloaded: RunConfig = toml::from_str(&once).unwrap();
        assert_eq!(once, reloaded.to_toml());
    }

    #[test]
    fn unknown_keys_rejected_with_key_name() {
        let err = toml::from_str::<RunConfig>("bogus_key = 3\n").unwrap_err();
        assert!(err.to_string().contains("bogus_key"));

        let err = toml::from_str::<RunConfig>("[value]\nepsilon_typo = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("epsilon_typo"));
    }

    #[test]
    fn partial_config_fills_defaults() {
        let cfg: RunConfig = toml::from_str("budget_t = 5\nmode = \"heuristic_retrieval\"\n").unwrap();
        assert_eq!(cfg.budget_t, 5);
        assert_eq!(cfg.mode, RunMode::HeuristicRetrieval);
        assert_eq!(cfg.parallelism, 1);
        assert_eq!(cfg.retrieval.final_count_n, 4);
    }

    #[test]
    fn orchestrator_mapping_carries_sections() {
        let mut cfg = RunConfig::default();
        cfg.budget_t = 7;
        cfg.verifier.infra_retries = 1;
        let oc = cfg.orchestrator();
        assert_eq!(oc.budget_t, 7);
        assert_eq!(oc.infra_retries, 1);
    }
}
