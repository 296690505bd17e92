//! Argument parsing and dispatch. Every subcommand takes `--config <json>`
//! plus flag overrides mirroring the config keys.

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use crate::commands;
use crate::config::{BackendConfig, DatasetConfig, RunConfig};

#[derive(Debug, Parser)]
#[command(
    name = "ruleagent",
    version,
    about = "Workbench for rule-driven denoising of implicit-feedback recommendation data"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Normalize a dataset into the output directory and report its stats
    Ingest(CommonArgs),
    /// Materialize the 7:1:2 per-user split
    Split(CommonArgs),
    /// Inject synthetic noise into the training split, with a ledger
    InjectNoise(CommonArgs),
    /// Train the recommender once, recording the loss trace
    Train(CommonArgs),
    /// Run the autonomous denoising loop
    RunAgent(CommonArgs),
    /// Evaluate persisted parameters on the validation and test splits
    Eval(EvalArgs),
    /// Export the rule hierarchy from a run directory
    ExportRules(ExportRulesArgs),
    /// Re-apply exported rules as a filter over recorded traces and retrain
    CompileRules(CompileRulesArgs),
    /// Compare full retraining against LossEraser unlearning
    CompareUnlearning(CommonArgs),
    /// Summarize a finished run directory
    Report(ReportArgs),
}

/// Config file plus overrides shared by data-driven subcommands.
#[derive(Debug, Clone, Args, Default)]
pub struct CommonArgs {
    /// JSON run config; flags below override its fields
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Interaction file (`user<TAB>item` per line); overrides the config dataset
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Output directory for artifacts
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    /// Seed of the per-user split
    #[arg(long)]
    pub split_seed: Option<u64>,
    /// Fraction of synthetic noise injected into the training split
    #[arg(long)]
    pub noise_rate: Option<f64>,
    /// Seed of the noise injection
    #[arg(long)]
    pub noise_seed: Option<u64>,
    /// Keep only the N most active users before splitting
    #[arg(long)]
    pub top_users: Option<usize>,
    /// Training epochs
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Minibatch size
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Adam learning rate
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Weight of the reversal objective
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Training shuffle/negative seed
    #[arg(long)]
    pub train_seed: Option<u64>,
    /// Embedding dimension
    #[arg(long)]
    pub embedding_dim: Option<usize>,
    /// Planned-action budget of the agent
    #[arg(long)]
    pub max_actions: Option<usize>,
    /// Epochs per unlearning cycle
    #[arg(long)]
    pub eraser_epochs: Option<usize>,
    /// Agent seed (sampling, parameter init)
    #[arg(long)]
    pub agent_seed: Option<u64>,
    /// Backend kind: scripted or http
    #[arg(long)]
    pub backend: Option<String>,
    /// Script file for the scripted backend
    #[arg(long)]
    pub script: Option<PathBuf>,
    /// Base URL for the http backend
    #[arg(long)]
    pub base_url: Option<String>,
    /// Chat model identifier for the http backend
    #[arg(long)]
    pub model: Option<String>,
}

impl CommonArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(path) = &self.dataset {
            cfg.dataset = DatasetConfig::File { path: path.clone() };
        }
        if let Some(dir) = &self.output_dir {
            cfg.output_dir = dir.clone();
        }
        if let Some(seed) = self.split_seed {
            cfg.split_seed = seed;
        }
        if let Some(rate) = self.noise_rate {
            cfg.noise_rate = rate;
        }
        if let Some(seed) = self.noise_seed {
            cfg.noise_seed = seed;
        }
        if self.top_users.is_some() {
            cfg.densify_top_users = self.top_users;
        }
        if let Some(epochs) = self.epochs {
            cfg.train.epochs = epochs;
        }
        if let Some(batch) = self.batch_size {
            cfg.train.batch_size = batch;
        }
        if let Some(lr) = self.learning_rate {
            cfg.train.learning_rate = lr;
        }
        if let Some(alpha) = self.alpha {
            cfg.train.alpha = alpha;
        }
        if let Some(seed) = self.train_seed {
            cfg.train.seed = seed;
            cfg.train.trace_seed = seed;
        }
        if let Some(dim) = self.embedding_dim {
            cfg.agent.embedding_dim = dim;
        }
        if let Some(max) = self.max_actions {
            cfg.agent.max_actions = max;
        }
        if let Some(epochs) = self.eraser_epochs {
            cfg.agent.eraser_epochs = epochs;
        }
        if let Some(seed) = self.agent_seed {
            cfg.agent.seed = seed;
        }
        match self.backend.as_deref() {
            Some("scripted") => {
                cfg.backend = BackendConfig::Scripted {
                    script: self.script.clone(),
                };
            }
            Some("http") => {
                cfg.backend = BackendConfig::Http {
                    base_url: self
                        .base_url
                        .clone()
                        .unwrap_or_else(|| "https://api.openai.com".to_string()),
                };
            }
            Some(other) => anyhow::bail!("unknown backend kind {other:?} (scripted|http)"),
            None => {
                if let Some(script) = &self.script {
                    cfg.backend = BackendConfig::Scripted {
                        script: Some(script.clone()),
                    };
                }
                if let Some(base_url) = &self.base_url {
                    cfg.backend = BackendConfig::Http {
                        base_url: base_url.clone(),
                    };
                }
            }
        }
        if let Some(model) = &self.model {
            cfg.agent.chat.model = model.clone();
        }
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Parameter dump to evaluate (default: <output-dir>/params.json)
    #[arg(long)]
    pub params: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExportRulesArgs {
    /// Run directory holding rules.txt (default: the config output dir)
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
    /// Destination file (stdout when omitted)
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Args)]
pub struct CompileRulesArgs {
    /// Rule text to re-apply
    #[arg(long)]
    pub rules: PathBuf,
    /// Loss trace CSV the rules are evaluated against
    #[arg(long)]
    pub traces: PathBuf,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run directory to summarize (default: the config output dir)
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
    #[command(flatten)]
    pub common: CommonArgs,
}

/// Runs one parsed command. Errors map to exit code 2 in `main`.
pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest(args) => commands::ingest(&args.resolve()?),
        Command::Split(args) => commands::split(&args.resolve()?),
        Command::InjectNoise(args) => commands::inject_noise(&args.resolve()?),
        Command::Train(args) => commands::train(&args.resolve()?),
        Command::RunAgent(args) => commands::run_agent(&args.resolve()?),
        Command::Eval(args) => {
            let cfg = args.common.resolve()?;
            commands::eval(&cfg, args.params.as_deref())
        }
        Command::ExportRules(args) => {
            let cfg = args.common.resolve()?;
            let run_dir = args.run_dir.unwrap_or_else(|| cfg.output_dir.clone());
            commands::export_rules(&run_dir, args.out.as_deref())
        }
        Command::CompileRules(args) => {
            let cfg = args.common.resolve()?;
            commands::compile_rules(&cfg, &args.rules, &args.traces)
        }
        Command::CompareUnlearning(args) => commands::compare_unlearning(&args.resolve()?),
        Command::Report(args) => {
            let cfg = args.common.resolve()?;
            let run_dir = args.run_dir.unwrap_or_else(|| cfg.output_dir.clone());
            commands::report(&run_dir)
        }
    }
}
