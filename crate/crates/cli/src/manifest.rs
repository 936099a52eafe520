//! Run manifest: the config file every subcommand starts from. Command-line
//! flags override individual keys.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use veriprove::forge::ScenarioQuotas;
use veriprove::model::{HttpModel, HttpModelConfig, MockModel, ModelBackend};
use veriprove::objective::ClipConfig;
use veriprove::orchestrator::EpisodeConfig;
use veriprove::reward::RewardConfig;
use veriprove::verifier::{CommandVerifier, MockVerifier, TcpVerifier, VerifierBackend};

use crate::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunManifest {
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub jobs: Option<usize>,
    pub episode: EpisodeConfig,
    pub rewards: RewardConfig,
    pub model: ModelSpec,
    pub verifier: VerifierSpec,
    pub clip: ClipConfig,
    pub quotas: ScenarioQuotas,
    pub filter: FilterSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "backend", rename_all = "lowercase", deny_unknown_fields)]
pub enum ModelSpec {
    /// Endpoint, token and model name come from the environment.
    Http {
        #[serde(default)]
        timeout_secs: Option<u64>,
        #[serde(default)]
        concurrency: Option<usize>,
    },
    Mock { script: PathBuf },
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec::Http { timeout_secs: None, concurrency: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "backend", rename_all = "lowercase", deny_unknown_fields)]
pub enum VerifierSpec {
    Command {
        command: String,
        #[serde(default)]
        workers: Option<usize>,
    },
    Tcp {
        address: String,
        #[serde(default)]
        workers: Option<usize>,
    },
    Mock { script: PathBuf },
}

impl Default for VerifierSpec {
    fn default() -> Self {
        VerifierSpec::Command { command: String::new(), workers: None }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterSpec {
    pub lo: String,
    pub hi: String,
}

impl Default for FilterSpec {
    fn default() -> Self {
        FilterSpec { lo: "1/8".into(), hi: "1/2".into() }
    }
}

impl RunManifest {
    /// Read a `.json` or `.toml` manifest; a missing path gives the defaults.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(RunManifest::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let parsed = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| e.to_string())
        } else {
            toml::from_str(&text).map_err(|e| e.to_string())
        };
        parsed.map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn model_backend(&self) -> Result<(Arc<dyn ModelBackend>, Option<usize>), CliError> {
        match &self.model {
            ModelSpec::Mock { script } => {
                let mock = MockModel::from_jsonl(script)
                    .map_err(|e| CliError::Config(format!("model script {}: {e}", script.display())))?;
                Ok((Arc::new(mock), None))
            }
            ModelSpec::Http { timeout_secs, concurrency } => {
                let mut cfg = HttpModelConfig::from_env().map_err(|e| CliError::Config(e.to_string()))?;
                if let Some(t) = timeout_secs {
                    cfg.timeout = Duration::from_secs(*t);
                }
                Ok((Arc::new(HttpModel::new(cfg)), *concurrency))
            }
        }
    }

    pub fn verifier_backend(&self) -> Result<(Arc<dyn VerifierBackend>, Option<usize>), CliError> {
        match &self.verifier {
            VerifierSpec::Mock { script } => {
                let mock = MockVerifier::from_json_file(script)
                    .map_err(|e| CliError::Config(format!("verifier script {}: {e}", script.display())))?;
                Ok((Arc::new(mock), None))
            }
            VerifierSpec::Command { command, workers } => {
                let backend = CommandVerifier::from_command_line(command)
                    .ok_or_else(|| CliError::Config("no verifier configured: set --verifier or [verifier]".into()))?;
                Ok((Arc::new(backend), *workers))
            }
            VerifierSpec::Tcp { address, workers } => Ok((Arc::new(TcpVerifier::new(address.clone())), *workers)),
        }
    }
}

/// Parse `mock:PATH` / `http` for the model flag.
pub fn parse_model_flag(s: &str) -> Result<ModelSpec, String> {
    match s.split_once(':') {
        Some(("mock", path)) => Ok(ModelSpec::Mock { script: path.into() }),
        None if s == "http" => Ok(ModelSpec::Http { timeout_secs: None, concurrency: None }),
        _ => Err(format!("expected `http` or `mock:PATH`, got {s:?}")),
    }
}

/// Parse `mock:PATH`, `command:CMD ARGS` or `tcp:HOST:PORT` for the verifier flag.
pub fn parse_verifier_flag(s: &str) -> Result<VerifierSpec, String> {
    match s.split_once(':') {
        Some(("mock", path)) => Ok(VerifierSpec::Mock { script: path.into() }),
        Some(("command", cmd)) => Ok(VerifierSpec::Command { command: cmd.into(), workers: None }),
        Some(("tcp", addr)) => Ok(VerifierSpec::Tcp { address: addr.into(), workers: None }),
        _ => Err(format!("expected `mock:PATH`, `command:CMD` or `tcp:ADDR`, got {s:?}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_from_toml() {
        let text = r#"
            seed = 7
            [episode]
            first_round_rollouts = 4
            max_iterations = 2
            [rewards]
            lambda_tc = 1.0
            [model]
            backend = "mock"
            script = "script.jsonl"
            [verifier]
            backend = "tcp"
            address = "127.0.0.1:9000"
            workers = 4
        "#;
        let m: RunManifest = toml::from_str(text).unwrap();
        assert_eq!(m.seed, Some(7));
        assert_eq!(m.episode.first_round_rollouts, 4);
        assert_eq!(m.episode.branch_per_iteration, 1);
        assert_eq!(m.rewards.lambda_tc, 1.0);
        assert_eq!(m.model, ModelSpec::Mock { script: "script.jsonl".into() });
        assert_eq!(m.verifier, VerifierSpec::Tcp { address: "127.0.0.1:9000".into(), workers: Some(4) });
        assert!(toml::from_str::<RunManifest>("unknown = 1").is_err());
    }

    #[test]
    fn backend_flags() {
        assert_eq!(parse_model_flag("mock:a.jsonl").unwrap(), ModelSpec::Mock { script: "a.jsonl".into() });
        assert!(matches!(parse_model_flag("http").unwrap(), ModelSpec::Http { .. }));
        assert!(parse_model_flag("grpc").is_err());
        assert_eq!(
            parse_verifier_flag("command:lake exe repl").unwrap(),
            VerifierSpec::Command { command: "lake exe repl".into(), workers: None }
        );
        assert_eq!(
            parse_verifier_flag("tcp:localhost:3000").unwrap(),
            VerifierSpec::Tcp { address: "localhost:3000".into(), workers: None }
        );
    }
}
