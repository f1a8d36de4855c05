//! Shared CLI configuration: one versioned JSON file governs every
//! subcommand; flags override config values; credentials and backend
//! selection come from environment variables only.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dit::DitConfig;
use crate::error::{Error, Result};
use crate::inject::AdapterConfig;
use crate::trainer::TrainConfig;

pub const ENV_LLM_BACKEND: &str = "DIFFPHY_LLM_BACKEND";
pub const ENV_MLLM_BACKEND: &str = "DIFFPHY_MLLM_BACKEND";
pub const ENV_API_KEY: &str = "DIFFPHY_API_KEY";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CliConfig {
    pub version: u32,
    /// Every subcommand writes only inside this directory.
    pub output_dir: PathBuf,
    pub checkpoint_file: String,
    pub branch_checkpoint_file: String,
    pub log_file: String,
    pub dataset_file: String,
    pub manifest_file: String,
    /// Optional directory of prompt-template overrides.
    pub templates_dir: Option<PathBuf>,
    pub realism_threshold: f64,
    pub train: TrainConfig,
    pub model: DitConfig,
    pub adapter: AdapterConfig,
}

impl Default for CliConfig {
    fn default() -> Self {
        Self {
            version: 1,
            output_dir: PathBuf::from("out"),
            checkpoint_file: "model.ckpt".into(),
            branch_checkpoint_file: "branch.ckpt".into(),
            log_file: "train_log.jsonl".into(),
            dataset_file: "corpus.jsonl".into(),
            manifest_file: "manifest.json".into(),
            templates_dir: None,
            realism_threshold: crate::dataset::DEFAULT_REALISM_THRESHOLD,
            train: TrainConfig::default(),
            model: DitConfig::default(),
            adapter: AdapterConfig::default(),
        }
    }
}

impl CliConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: CliConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != 1 {
            return Err(Error::Config(format!("unsupported config version {}", self.version)));
        }
        if !(0.0..=1.0).contains(&self.realism_threshold) {
            return Err(Error::Config("realism_threshold outside [0,1]".into()));
        }
        self.train.validate()?;
        self.model.validate()?;
        if self.adapter.rank == 0 {
            return Err(Error::Config("adapter rank must be >= 1".into()));
        }
        Ok(())
    }

    pub fn path_in_output(&self, file: &str) -> PathBuf {
        self.output_dir.join(file)
    }
}

/// Which backend a pipeline stage talks to. Only the deterministic mock is
/// bundled; named remote backends require credentials from the environment
/// and are rejected in this build.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackendChoice {
    Mock,
    Named(String),
}

/// Resolve a backend from the environment, honoring a force-mock flag.
/// Credentials are never read from config files or flags.
pub fn backend_from_env(var: &str, force_mock: bool) -> Result<BackendChoice> {
    if force_mock {
        return Ok(BackendChoice::Mock);
    }
    match std::env::var(var) {
        Err(_) => Ok(BackendChoice::Mock),
        Ok(v) if v.is_empty() || v == "mock" => Ok(BackendChoice::Mock),
        Ok(name) => {
            if std::env::var(ENV_API_KEY).map(|k| !k.is_empty()).unwrap_or(false) {
                Ok(BackendChoice::Named(name))
            } else {
                Err(Error::Config(format!(
                    "backend {name:?} selected via {var} but {ENV_API_KEY} is unset"
                )))
            }
        }
    }
}
