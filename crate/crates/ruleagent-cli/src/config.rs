//! The JSON run configuration shared by every subcommand. Flags override
//! individual fields after the file is loaded.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use ruleagent_core::agent::AgentConfig;
use ruleagent_core::dataset::synthetic::BlockFixture;
use ruleagent_core::training::TrainConfig;

/// Where the interactions come from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetConfig {
    /// A `user<TAB>item` file of external ids.
    File { path: PathBuf },
    /// A generated block-structured fixture.
    Synthetic { fixture: BlockFixture },
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::Synthetic {
            fixture: BlockFixture::default(),
        }
    }
}

/// Which chat backend drives the agent.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendConfig {
    /// Deterministic canned responses. Without a script file, a built-in
    /// demo script is used (rule reflection installing the demo hierarchy,
    /// unlearning cycles, evaluations).
    Scripted {
        #[serde(default)]
        script: Option<PathBuf>,
    },
    /// OpenAI-compatible endpoint; credential from `RULEAGENT_API_KEY`.
    Http { base_url: String },
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig::Scripted { script: None }
    }
}

/// Knobs for the `compare-unlearning` experiment.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CompareConfig {
    /// Epochs for the from-scratch retraining arm (defaults to the
    /// training epochs when zero).
    pub retrain_epochs: usize,
    /// Unlearning cycles for the LossEraser arm.
    pub eraser_cycles: usize,
    /// Percentile used to flag interactions from the recorded losses.
    pub percentile: f64,
}

impl Default for CompareConfig {
    fn default() -> Self {
        CompareConfig {
            retrain_epochs: 0,
            eraser_cycles: 3,
            percentile: 0.95,
        }
    }
}

/// Everything a run needs. All fields have defaults, so `{}` is a valid
/// config file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub output_dir: PathBuf,
    pub split_seed: u64,
    /// Fraction of synthetic noise injected into the training split.
    pub noise_rate: f64,
    pub noise_seed: u64,
    /// Keep only the N most active users before splitting.
    pub densify_top_users: Option<usize>,
    pub train: TrainConfig,
    pub agent: AgentConfig,
    pub backend: BackendConfig,
    pub compare: CompareConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: DatasetConfig::default(),
            output_dir: PathBuf::from("runs/latest"),
            split_seed: 1,
            noise_rate: 0.0,
            noise_seed: 2,
            densify_top_users: None,
            train: TrainConfig::default(),
            agent: AgentConfig::default(),
            backend: BackendConfig::default(),
            compare: CompareConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        serde_json::from_str(&text)
            .with_context(|| format!("cannot parse config {}", path.display()))
    }

    /// The resolved configuration echoed into the run directory.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
    }
}
