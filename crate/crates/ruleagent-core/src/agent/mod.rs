//! The autonomous loop: initialization, multi-path planning, the two
//! reflections, unlearning cycles, evaluation, and termination.
//!
//! With a scripted backend the whole run is a deterministic function of
//! (data, config, script, seeds); responses drive the same code paths a
//! live backend would.

pub mod parsers;
pub mod prompts;

use std::collections::HashSet;
use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{sample_indices, InteractionSet};
use crate::eval::{evaluate, EvalError, EvalResult};
use crate::llm::{ChatBackend, ChatRequest, LlmError, PromptKind, TranscriptEntry};
use crate::memory::{ActionKind, ActionMemory, ConfidenceEntry, Memories, MemoryError, RuleMemory};
use crate::model::{init_params, save_params, GmfParams, ModelError};
use crate::rules::{merge, parse_rule_text, serialize as serialize_rules, RuleError};
use crate::stats::percentile_rank;
use crate::training::{
    train_bpr, train_loss_eraser, EpochReport, LossTrace, TrainConfig, TrainError,
};
use crate::Real;

use parsers::{parse_confidence_response, parse_planning_response, parse_rules_response};
use prompts::{
    confidence_reflection_prompt, format_correction, planning_prompt, render_action_record,
    render_confidence_entry, render_loss_series, rule_reflection_prompt, DEFAULT_PROFILE,
    INITIAL_RULE_TEXT,
};

#[derive(Debug, Error)]
pub enum AgentError {
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Rules(#[from] RuleError),
    #[error("planning failed: {message}")]
    Planning { message: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Chat parameters for live backends (logged but inert for scripted ones).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ChatOptions {
    pub model: String,
    pub temperature: f64,
    pub max_tokens: usize,
}

impl Default for ChatOptions {
    fn default() -> Self {
        ChatOptions {
            model: "gpt-4o-mini".to_string(),
            temperature: 0.0,
            max_tokens: 1024,
        }
    }
}

/// Loop configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentConfig {
    /// Planned actions (initialization excluded) before the run stops.
    pub max_actions: usize,
    /// Consecutive declining evaluations that terminate the run.
    pub decline_window: usize,
    /// Interactions sampled for each reflection and memory rendering.
    pub reflection_sample_size: usize,
    /// Epochs per unlearning cycle (the `T` of the reversal ramp).
    pub eraser_epochs: usize,
    /// Concurrent reflection calls for backends that allow it.
    pub parallel_reflections: usize,
    pub seed: u64,
    pub profile_text: String,
    pub embedding_dim: usize,
    pub eval_ks: Vec<usize>,
    pub chat: ChatOptions,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            max_actions: 30,
            decline_window: 5,
            reflection_sample_size: 1000,
            eraser_epochs: 20,
            parallel_reflections: 4,
            seed: 7,
            profile_text: DEFAULT_PROFILE.to_string(),
            embedding_dim: 64,
            eval_ks: vec![10, 20],
            chat: ChatOptions::default(),
        }
    }
}

/// The splits an agent run operates on. `train` is the pre-filter set the
/// agent observes and denoises (noise injection, if any, happened upstream).
#[derive(Debug, Clone)]
pub struct SplitData {
    pub train: InteractionSet,
    pub valid: InteractionSet,
    pub test: InteractionSet,
}

/// Final per-interaction confidence, with external ids for readability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportedConfidence {
    pub user: usize,
    pub item: usize,
    pub user_ext: String,
    pub item_ext: String,
    pub score: f64,
    pub reason: String,
}

/// The run's deliverables. Deliberately free of wall-clock data so two runs
/// with the same seeds serialize byte-identically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub completed: bool,
    pub error: Option<String>,
    pub planned_actions: usize,
    pub final_rules: String,
    pub final_eval: EvalResult,
    pub actions: Vec<crate::memory::ActionRecord>,
    pub confidence: Vec<ReportedConfidence>,
}

/// Wall-clock summary, written to its own file.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Timings {
    pub total_secs: f64,
    pub initialization_secs: f64,
    pub training_secs: f64,
    pub reflection_secs: f64,
    pub evaluation_secs: f64,
}

/// Everything a run produces.
pub struct RunOutput {
    pub report: RunReport,
    pub memories: Memories,
    pub params: GmfParams<Real>,
    pub trace: LossTrace<Real>,
    pub epoch_log: Vec<EpochReport>,
    pub transcript: Vec<TranscriptEntry>,
    pub timings: Timings,
}

/// Recall at the decline metric's K (20 when present, else the largest
/// configured K).
fn decline_metric(outcome: &EvalResult) -> Option<f64> {
    outcome
        .recall(20)
        .or_else(|| outcome.ks().last().and_then(|&k| outcome.recall(k)))
}

/// True when the trailing evaluations form `window` consecutive strict
/// declines. Any non-declining evaluation resets the streak.
pub fn should_stop_on_decline(actions: &ActionMemory, window: usize) -> bool {
    let outcomes = actions.evaluation_outcomes();
    let recalls: Vec<f64> = outcomes.iter().filter_map(|o| decline_metric(o)).collect();
    let mut streak = 0;
    for pair in recalls.windows(2) {
        if pair[1] < pair[0] {
            streak += 1;
        } else {
            streak = 0;
        }
    }
    streak >= window
}

struct AgentState<'a> {
    data: &'a SplitData,
    backend: &'a dyn ChatBackend,
    cfg: &'a AgentConfig,
    train_cfg: TrainConfig,
    params: GmfParams<Real>,
    trace: LossTrace<Real>,
    memories: Memories,
    epoch_log: Vec<EpochReport>,
    global_epoch: usize,
    planned_actions: usize,
    timings: Timings,
}

impl<'a> AgentState<'a> {
    /// Full training cycle, loss-rank confidence map over every training
    /// interaction, the initial rule, and the `Initialization` record.
    fn initialize(
        data: &'a SplitData,
        cfg: &'a AgentConfig,
        train_cfg: &TrainConfig,
        backend: &'a dyn ChatBackend,
    ) -> Result<AgentState<'a>, AgentError> {
        let started = Instant::now();
        let train = &data.train;
        let fresh = init_params::<Real>(
            train.num_users,
            train.num_items,
            cfg.embedding_dim,
            cfg.seed,
        )?;
        let (params, trace, epoch_log) = train_bpr(&fresh, train, train_cfg)?;

        let mut memories = Memories {
            rules: {
                let mut initial = parse_rule_text(INITIAL_RULE_TEXT)?;
                initial.provenance = "initialization".to_string();
                RuleMemory::new(initial)
            },
            ..Memories::default()
        };

        let final_losses = trace
            .latest_column()
            .expect("training always records the final epoch");
        for (idx, it) in train.interactions.iter().enumerate() {
            let loss = final_losses[idx];
            let rank = percentile_rank(final_losses, loss);
            let score = 2.0 * (1.0 - rank);
            memories.confidence.set(ConfidenceEntry {
                user: it.user,
                item: it.item,
                score,
                reason: format!(
                    "Initial loss-rank assessment: final recorded loss {:.6} sits at percentile rank {:.4} of the training set, and larger losses read as noisier.",
                    loss, rank
                ),
                revised_at: 0,
            })?;
        }

        memories.actions.push(
            ActionKind::Initialization,
            "Completed a full training cycle on the training split and seeded the confidence memory from the initial rule over the recorded losses.",
        );

        let global_epoch = *trace.epochs().last().expect("non-empty trace");
        let mut state = AgentState {
            data,
            backend,
            cfg,
            train_cfg: train_cfg.clone(),
            params,
            trace,
            memories,
            epoch_log,
            global_epoch,
            planned_actions: 0,
            timings: Timings::default(),
        };
        state.timings.initialization_secs = started.elapsed().as_secs_f64();
        Ok(state)
    }

    fn chat_request(&self, kind: PromptKind, user: String) -> ChatRequest {
        ChatRequest {
            kind,
            system: self.cfg.profile_text.clone(),
            user,
            model: self.cfg.chat.model.clone(),
            temperature: self.cfg.chat.temperature,
            max_tokens: self.cfg.chat.max_tokens,
        }
    }

    /// Seed for the bounded sample a given action draws; distinct per action
    /// for variety, reproducible per run.
    fn sample_seed(&self, action_index: usize) -> u64 {
        self.cfg.seed.wrapping_add(action_index as u64)
    }

    /// Sampled training-interaction indices for prompt renderings.
    fn sampled_interactions(&self, action_index: usize) -> Vec<usize> {
        let mut sample = sample_indices(
            self.data.train.len(),
            self.cfg.reflection_sample_size,
            self.sample_seed(action_index),
        );
        sample.sort_unstable();
        sample
    }

    fn render_confidence_sample(&self, sample: &[usize]) -> String {
        let lines: Vec<String> = sample
            .iter()
            .filter_map(|&idx| {
                let it = self.data.train.interactions[idx];
                self.memories.confidence.get(it.user, it.item)
            })
            .map(render_confidence_entry)
            .collect();
        lines.join("\n")
    }

    fn rules_text(&self) -> String {
        self.memories
            .rules
            .current()
            .map(serialize_rules)
            .unwrap_or_default()
    }

    /// Multi-path planning: one backend call, strict parse with a single
    /// re-prompt. The chosen action is recorded by the caller.
    fn plan(&mut self) -> Result<(ActionKind, String), AgentError> {
        let sample = self.sampled_interactions(self.memories.actions.len() + 1);
        let confidence_rendering = self.render_confidence_sample(&sample);
        let actions_rendering: Vec<String> = {
            let records = self.memories.actions.records();
            let skip = records.len().saturating_sub(20);
            records[skip..].iter().map(render_action_record).collect()
        };
        let user = planning_prompt(
            &confidence_rendering,
            &self.rules_text(),
            &actions_rendering.join("\n"),
        );

        let request = self.chat_request(PromptKind::Planning, user.clone());
        let response = self.backend.complete(&request)?;
        match parse_planning_response(&response) {
            Ok(parsed) => Ok(parsed),
            Err(first_err) => {
                log::warn!("planning response rejected ({first_err}); re-prompting once");
                let correction = format_correction(
                    "The next action is: <a/b/c/d>. The reason for this decision is: <Your Explanation>.",
                );
                let retry = self.chat_request(PromptKind::Planning, format!("{user}{correction}"));
                let response = self.backend.complete(&retry)?;
                parse_planning_response(&response).map_err(|err| AgentError::Planning {
                    message: format!("unparseable planning response after one re-prompt: {err}"),
                })
            }
        }
    }

    fn dispatch(&mut self, kind: ActionKind, action_index: usize) -> Result<(), AgentError> {
        match kind {
            ActionKind::ConfidenceReflection => self.reflect_confidence(action_index),
            ActionKind::RuleReflection => self.reflect_rules(action_index),
            ActionKind::LossEraserTraining => self.execute_training(action_index),
            ActionKind::ModelEvaluation => self.execute_evaluation(action_index),
            ActionKind::Initialization => Ok(()),
        }
    }

    /// One backend call per sampled interaction; a malformed or out-of-range
    /// response is re-prompted once and then the prior entry is kept.
    fn reflect_confidence(&mut self, action_index: usize) -> Result<(), AgentError> {
        let started = Instant::now();
        let sample = self.sampled_interactions(action_index);
        let rules_text = self.rules_text();

        struct Job {
            interaction: usize,
            request: ChatRequest,
        }
        let jobs: Vec<Job> = sample
            .iter()
            .map(|&idx| {
                let it = self.data.train.interactions[idx];
                let entry = self
                    .memories
                    .confidence
                    .get(it.user, it.item)
                    .expect("initialization seeded every training interaction");
                let user_prompt = confidence_reflection_prompt(
                    &rules_text,
                    it.user,
                    it.item,
                    &render_loss_series(&self.trace.series(idx)),
                    entry.score,
                    &entry.reason,
                );
                Job {
                    interaction: idx,
                    request: self.chat_request(PromptKind::ConfidenceReflection, user_prompt),
                }
            })
            .collect();

        let ask = |request: &ChatRequest| -> Result<Option<(f64, String)>, AgentError> {
            let response = self.backend.complete(request)?;
            match parse_confidence_response(&response) {
                Ok(parsed) => Ok(Some(parsed)),
                Err(first_err) => {
                    let correction = format_correction(
                        "The confidence score is <0-2>. The explanation: <Your Explanation>.",
                    );
                    let retry = ChatRequest {
                        user: format!("{}{correction}", request.user),
                        ..request.clone()
                    };
                    let response = self.backend.complete(&retry)?;
                    match parse_confidence_response(&response) {
                        Ok(parsed) => Ok(Some(parsed)),
                        Err(second_err) => {
                            log::warn!(
                                "confidence reflection kept prior entry ({first_err}; retry: {second_err})"
                            );
                            Ok(None)
                        }
                    }
                }
            }
        };

        let workers = self.cfg.parallel_reflections;
        let results: Vec<Result<Option<(f64, String)>, AgentError>> =
            if self.backend.supports_parallel() && workers > 1 {
                let mut results: Vec<Result<Option<(f64, String)>, AgentError>> =
                    (0..jobs.len()).map(|_| Ok(None)).collect();
                std::thread::scope(|scope| {
                    let mut handles = Vec::new();
                    for worker in 0..workers {
                        let jobs = &jobs;
                        let ask = &ask;
                        handles.push(scope.spawn(move || {
                            let mut partial = Vec::new();
                            let mut pos = worker;
                            while pos < jobs.len() {
                                partial.push((pos, ask(&jobs[pos].request)));
                                pos += workers;
                            }
                            partial
                        }));
                    }
                    for handle in handles {
                        for (pos, result) in handle.join().expect("reflection worker") {
                            results[pos] = result;
                        }
                    }
                });
                results
            } else {
                jobs.iter().map(|job| ask(&job.request)).collect()
            };

        // Writes applied in sample order regardless of completion order.
        for (job, result) in jobs.iter().zip(results) {
            if let Some((score, reason)) = result? {
                let it = self.data.train.interactions[job.interaction];
                self.memories.confidence.set(ConfidenceEntry {
                    user: it.user,
                    item: it.item,
                    score,
                    reason,
                    revised_at: action_index,
                })?;
            }
        }
        self.timings.reflection_secs += started.elapsed().as_secs_f64();
        Ok(())
    }

    /// One backend call over a sampled confidence rendering; the parsed
    /// outline merges into the rule memory as a new revision. A response
    /// that cannot be parsed (after one re-prompt) leaves the rules as they
    /// are.
    fn reflect_rules(&mut self, action_index: usize) -> Result<(), AgentError> {
        let started = Instant::now();
        let sample = self.sampled_interactions(action_index);
        let confidence_rendering = self.render_confidence_sample(&sample);
        let rules_text = self.rules_text();
        let update_reason = self
            .memories
            .actions
            .records()
            .get(action_index.wrapping_sub(1))
            .map(|r| r.reason.clone())
            .unwrap_or_default();
        let user = rule_reflection_prompt(&rules_text, &confidence_rendering, &update_reason);

        let request = self.chat_request(PromptKind::RuleReflection, user.clone());
        let response = self.backend.complete(&request)?;
        let parsed = match parse_rules_response(&response) {
            Ok(tree) => Some(tree),
            Err(first_err) => {
                log::warn!("rule reflection response rejected ({first_err}); re-prompting once");
                let correction = format_correction("The updated denoising rules are: <New Rules>.");
                let retry =
                    self.chat_request(PromptKind::RuleReflection, format!("{user}{correction}"));
                let response = self.backend.complete(&retry)?;
                match parse_rules_response(&response) {
                    Ok(tree) => Some(tree),
                    Err(second_err) => {
                        log::warn!(
                            "rule reflection kept current rules (retry failed: {second_err})"
                        );
                        None
                    }
                }
            }
        };
        if let Some(tree) = parsed {
            let current = self.memories.rules.current().expect("initial rule present");
            let merged = merge(current, &tree);
            self.memories
                .rules
                .push_revision(merged, format!("action-{action_index}"));
        }
        self.timings.reflection_secs += started.elapsed().as_secs_f64();
        Ok(())
    }

    /// Unlearning cycle: the flagged pairs from the confidence memory are
    /// reversed against the clean remainder; traces keep covering the full
    /// pre-filter training set.
    fn execute_training(&mut self, action_index: usize) -> Result<(), AgentError> {
        let started = Instant::now();
        let noisy = self.memories.confidence.noisy_set()?;
        let flagged: HashSet<(usize, usize)> =
            noisy.iter().map(|pair| (pair.user, pair.item)).collect();
        let train = &self.data.train;
        let clean_interactions: Vec<_> = train
            .interactions
            .iter()
            .filter(|it| !flagged.contains(&(it.user, it.item)))
            .copied()
            .collect();
        let clean = if clean_interactions.is_empty() {
            log::warn!("every interaction is flagged; training on the full set instead");
            train.clone()
        } else {
            train.with_interactions(clean_interactions)
        };

        let mut cfg = self.train_cfg.clone();
        cfg.epochs = self.cfg.eraser_epochs;
        cfg.seed = self.train_cfg.seed.wrapping_add(action_index as u64);
        let (params, trace, reports) =
            train_loss_eraser(&self.params, &clean, &noisy, train, self.global_epoch, &cfg)?;
        self.params = params;
        self.trace.extend(&trace)?;
        self.global_epoch += cfg.epochs;
        self.epoch_log.extend(reports);
        self.timings.training_secs += started.elapsed().as_secs_f64();
        Ok(())
    }

    /// Validation-split evaluation attached to this action's record.
    fn execute_evaluation(&mut self, action_index: usize) -> Result<(), AgentError> {
        let started = Instant::now();
        let outcome = evaluate(
            &self.params,
            &self.data.valid,
            &self.data.train,
            &self.cfg.eval_ks,
        )?;
        self.memories
            .actions
            .attach_outcome(action_index, outcome)?;
        self.timings.evaluation_secs += started.elapsed().as_secs_f64();
        Ok(())
    }

    fn into_output(
        mut self,
        completed: bool,
        error: Option<String>,
        total_start: Instant,
    ) -> Result<RunOutput, AgentError> {
        let final_eval = evaluate(
            &self.params,
            &self.data.test,
            &self.data.train,
            &self.cfg.eval_ks,
        )?;
        let confidence: Vec<ReportedConfidence> = self
            .memories
            .confidence
            .entries()
            .map(|entry| ReportedConfidence {
                user: entry.user,
                item: entry.item,
                user_ext: self.data.train.user_ids.external[entry.user].clone(),
                item_ext: self.data.train.item_ids.external[entry.item].clone(),
                score: entry.score,
                reason: entry.reason.clone(),
            })
            .collect();
        let report = RunReport {
            completed,
            error,
            planned_actions: self.planned_actions,
            final_rules: self.rules_text(),
            final_eval,
            actions: self.memories.actions.records().to_vec(),
            confidence,
        };
        self.timings.total_secs = total_start.elapsed().as_secs_f64();
        Ok(RunOutput {
            report,
            memories: self.memories,
            params: self.params,
            trace: self.trace,
            epoch_log: self.epoch_log,
            transcript: self.backend.transcript(),
            timings: self.timings,
        })
    }
}

/// Runs the full loop: initialize, then plan-and-execute until the action
/// budget is spent or evaluations decline `decline_window` times in a row.
/// A planning response that stays unparseable after one re-prompt ends the
/// run early with the report flagged incomplete.
pub fn run(
    data: &SplitData,
    cfg: &AgentConfig,
    train_cfg: &TrainConfig,
    backend: &dyn ChatBackend,
) -> Result<RunOutput, AgentError> {
    let total_start = Instant::now();
    let mut state = AgentState::initialize(data, cfg, train_cfg, backend)?;
    let mut completed = true;
    let mut error = None;

    while state.planned_actions < cfg.max_actions
        && !should_stop_on_decline(&state.memories.actions, cfg.decline_window)
    {
        match state.plan() {
            Ok((kind, reason)) => {
                let index = state.memories.actions.push(kind, reason);
                state.planned_actions += 1;
                state.dispatch(kind, index)?;
            }
            Err(AgentError::Planning { message }) => {
                log::error!("aborting run: {message}");
                completed = false;
                error = Some(message);
                break;
            }
            Err(other) => return Err(other),
        }
    }

    state.into_output(completed, error, total_start)
}

/// Writes the run artifacts: `report.json`, `transcript.jsonl`, the memory
/// files, `params.json`, `trace.csv`, `run_log.jsonl`, and `timings.json`.
/// Everything except `timings.json` and `run_log.jsonl` is deterministic for
/// a scripted run.
pub fn write_run_dir(output: &RunOutput, dir: impl AsRef<Path>) -> Result<(), AgentError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|source| AgentError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    let write = |name: &str, contents: String| -> Result<(), AgentError> {
        let path = dir.join(name);
        fs::write(&path, contents).map_err(|source| AgentError::Io {
            path: path.display().to_string(),
            source,
        })
    };

    let mut report = serde_json::to_string_pretty(&output.report).expect("report serializes");
    report.push('\n');
    write("report.json", report)?;

    let mut transcript = String::new();
    for entry in &output.transcript {
        transcript.push_str(&serde_json::to_string(entry).expect("transcript serializes"));
        transcript.push('\n');
    }
    write("transcript.jsonl", transcript)?;

    let mut run_log = String::new();
    for report in &output.epoch_log {
        run_log.push_str(&serde_json::to_string(report).expect("epoch report serializes"));
        run_log.push('\n');
    }
    write("run_log.jsonl", run_log)?;

    write(
        "timings.json",
        serde_json::to_string_pretty(&output.timings).expect("timings serialize"),
    )?;

    output.memories.persist(dir)?;
    save_params(&output.params, dir.join("params.json"), None)?;
    output
        .trace
        .save_csv(dir.join("trace.csv"))
        .map_err(AgentError::Train)
}
