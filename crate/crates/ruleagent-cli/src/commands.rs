//! Subcommand implementations. Data preparation is derived from the config
//! (dataset, seeds) so every command is self-contained and re-runs
//! reproduce identical artifacts.

use std::fs;
use std::path::Path;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use serde::Serialize;

use ruleagent_core::agent::{self, SplitData};
use ruleagent_core::dataset::{
    self, synthetic::block_structured, InteractionSet, NoiseLedger, SetMeta,
};
use ruleagent_core::eval::{evaluate, EvalResult};
use ruleagent_core::llm::{BackendScript, ChatBackend, HttpBackend, KindScript, ScriptedBackend};
use ruleagent_core::model::{init_params, load_params, save_params};
use ruleagent_core::rules::{apply_rules, parse_rule_text, DEMO_RULE_OUTLINE};
use ruleagent_core::training::{
    static_percentile_filter, train_bpr, train_loss_eraser, LossTrace, NoisyPair,
};
use ruleagent_core::{GmfParams64, Real};

use crate::config::{BackendConfig, DatasetConfig, RunConfig};

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

/// Loads or generates the base interaction set, before splitting.
pub fn base_set(cfg: &RunConfig) -> Result<InteractionSet> {
    let set = match &cfg.dataset {
        DatasetConfig::File { path } => {
            let (set, stats) = dataset::load_interactions(path)?;
            log::info!(
                "{}: {} users, {} items, {} interactions ({} duplicates dropped)",
                path.display(),
                set.num_users,
                set.num_items,
                set.len(),
                stats.duplicates_dropped
            );
            set
        }
        DatasetConfig::Synthetic { fixture } => block_structured(fixture),
    };
    match cfg.densify_top_users {
        Some(n) => Ok(dataset::densify_top_users(&set, n)?),
        None => Ok(set),
    }
}

/// The 7:1:2 split plus optional noise injection, derived from the config.
pub fn prepare_data(cfg: &RunConfig) -> Result<(SplitData, Option<NoiseLedger>)> {
    let base = base_set(cfg)?;
    let (train, valid, test) = dataset::split(&base, cfg.split_seed)?;
    let (train, ledger) = if cfg.noise_rate > 0.0 {
        let (noisy, ledger) = dataset::inject_noise(&train, cfg.noise_rate, cfg.noise_seed)?;
        (noisy, Some(ledger))
    } else {
        (train, None)
    };
    Ok((SplitData { train, valid, test }, ledger))
}

/// The built-in demo script: install the demo rule hierarchy, run unlearning
/// cycles, and evaluate; planning falls back to evaluation afterwards.
pub fn demo_script(eraser_cycles: usize) -> BackendScript {
    let mut planning = vec!["The next action is: b. The reason for this decision is: refine the initial rule into the demo hierarchy.".to_string()];
    for _ in 0..eraser_cycles {
        planning.push("The next action is: c. The reason for this decision is: unlearn the currently flagged interactions.".to_string());
    }
    planning.push(
        "The next action is: d. The reason for this decision is: measure the effect of unlearning."
            .to_string(),
    );
    BackendScript {
        planning: KindScript {
            sequence: planning,
            default: Some("The next action is: d. The reason for this decision is: keep monitoring performance.".to_string()),
        },
        rule_reflection: KindScript {
            sequence: vec![],
            default: Some(format!("The updated denoising rules are:\n{DEMO_RULE_OUTLINE}")),
        },
        ..BackendScript::default()
    }
}

pub fn build_backend(cfg: &RunConfig) -> Result<Box<dyn ChatBackend>> {
    match &cfg.backend {
        BackendConfig::Scripted { script } => {
            let script = match script {
                Some(path) => {
                    let text = fs::read_to_string(path)
                        .with_context(|| format!("cannot read script {}", path.display()))?;
                    BackendScript::from_json(&text)?
                }
                None => demo_script(cfg.compare.eraser_cycles),
            };
            Ok(Box::new(ScriptedBackend::new(script)))
        }
        BackendConfig::Http { base_url } => Ok(Box::new(HttpBackend::from_env(base_url)?)),
    }
}

#[derive(Serialize)]
struct IngestSummary {
    users: usize,
    items: usize,
    interactions: usize,
}

/// `ingest`: normalize the dataset into the output directory.
pub fn ingest(cfg: &RunConfig) -> Result<()> {
    ensure_dir(&cfg.output_dir)?;
    let set = base_set(cfg)?;
    dataset::save_interactions(
        &set,
        cfg.output_dir.join("dataset.tsv"),
        &SetMeta {
            role: "dataset".into(),
            ..SetMeta::default()
        },
    )?;
    let summary = IngestSummary {
        users: set.num_users,
        items: set.num_items,
        interactions: set.len(),
    };
    write_json(&cfg.output_dir.join("dataset.stats.json"), &summary)?;
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

/// `split`: materialize train/valid/test files.
pub fn split(cfg: &RunConfig) -> Result<()> {
    ensure_dir(&cfg.output_dir)?;
    let base = base_set(cfg)?;
    let (train, valid, test) = dataset::split(&base, cfg.split_seed)?;
    for (set, name) in [(&train, "train"), (&valid, "valid"), (&test, "test")] {
        dataset::save_interactions(
            set,
            cfg.output_dir.join(format!("{name}.tsv")),
            &SetMeta {
                role: name.to_string(),
                split_seed: Some(cfg.split_seed),
                ..SetMeta::default()
            },
        )?;
    }
    println!(
        "split {} interactions into {} train / {} valid / {} test",
        base.len(),
        train.len(),
        valid.len(),
        test.len()
    );
    Ok(())
}

/// `inject-noise`: materialize the noisy training split and its ledger.
pub fn inject_noise(cfg: &RunConfig) -> Result<()> {
    ensure_dir(&cfg.output_dir)?;
    let base = base_set(cfg)?;
    let (train, _, _) = dataset::split(&base, cfg.split_seed)?;
    let (noisy, ledger) = dataset::inject_noise(&train, cfg.noise_rate, cfg.noise_seed)?;
    dataset::save_interactions(
        &noisy,
        cfg.output_dir.join("train_noisy.tsv"),
        &SetMeta {
            role: "train+noise".into(),
            split_seed: Some(cfg.split_seed),
            noise_seed: Some(cfg.noise_seed),
            noise_rate: Some(cfg.noise_rate),
        },
    )?;
    write_json(&cfg.output_dir.join("noise_ledger.json"), &ledger)?;
    println!(
        "injected {} synthetic positives at rate {}",
        ledger.injected.len(),
        cfg.noise_rate
    );
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary {
    epochs: usize,
    final_mean_loss: f64,
    valid: EvalResult,
    test: EvalResult,
}

/// `train`: one plain training phase from fresh parameters.
pub fn train(cfg: &RunConfig) -> Result<()> {
    ensure_dir(&cfg.output_dir)?;
    let (data, _) = prepare_data(cfg)?;
    let fresh = init_params::<Real>(
        data.train.num_users,
        data.train.num_items,
        cfg.agent.embedding_dim,
        cfg.agent.seed,
    )?;
    let (params, trace, reports) = train_bpr(&fresh, &data.train, &cfg.train)?;

    save_params(
        &params,
        cfg.output_dir.join("params.json"),
        Some(cfg.agent.seed),
    )?;
    trace.save_csv(cfg.output_dir.join("trace.csv"))?;
    let mut log_lines = String::new();
    for report in &reports {
        log_lines.push_str(&serde_json::to_string(report)?);
        log_lines.push('\n');
    }
    fs::write(cfg.output_dir.join("run_log.jsonl"), log_lines)?;

    let summary = TrainSummary {
        epochs: cfg.train.epochs,
        final_mean_loss: reports.last().map(|r| r.mean_loss).unwrap_or(f64::NAN),
        valid: evaluate(&params, &data.valid, &data.train, &cfg.agent.eval_ks)?,
        test: evaluate(&params, &data.test, &data.train, &cfg.agent.eval_ks)?,
    };
    write_json(&cfg.output_dir.join("eval.json"), &summary)?;
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

/// `run-agent`: the full autonomous loop, artifacts into the run directory.
pub fn run_agent(cfg: &RunConfig) -> Result<()> {
    ensure_dir(&cfg.output_dir)?;
    let (data, ledger) = prepare_data(cfg)?;
    let backend = build_backend(cfg)?;
    let output = agent::run(&data, &cfg.agent, &cfg.train, backend.as_ref())?;
    agent::write_run_dir(&output, &cfg.output_dir)?;
    cfg.save(&cfg.output_dir.join("config.json"))?;
    if let Some(ledger) = ledger {
        write_json(&cfg.output_dir.join("noise_ledger.json"), &ledger)?;
    }
    println!(
        "run {}: {} planned actions, final test {}",
        if output.report.completed {
            "completed"
        } else {
            "incomplete"
        },
        output.report.planned_actions,
        output.report.final_eval.render()
    );
    if !output.report.completed {
        bail!(
            "agent run flagged incomplete: {}",
            output
                .report
                .error
                .as_deref()
                .unwrap_or("unknown planning failure")
        );
    }
    Ok(())
}

/// `eval`: score persisted parameters against the config's splits.
pub fn eval(cfg: &RunConfig, params_path: Option<&Path>) -> Result<()> {
    let default_path = cfg.output_dir.join("params.json");
    let path = params_path.unwrap_or(&default_path);
    let params: GmfParams64 = load_params(path)?;
    let (data, _) = prepare_data(cfg)?;
    #[derive(Serialize)]
    struct EvalSummary {
        valid: EvalResult,
        test: EvalResult,
    }
    let summary = EvalSummary {
        valid: evaluate(&params, &data.valid, &data.train, &cfg.agent.eval_ks)?,
        test: evaluate(&params, &data.test, &data.train, &cfg.agent.eval_ks)?,
    };
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

/// `export-rules`: copy the current rule text out of a run directory.
pub fn export_rules(run_dir: &Path, out: Option<&Path>) -> Result<()> {
    let rules_path = run_dir.join("rules.txt");
    let text = fs::read_to_string(&rules_path)
        .with_context(|| format!("cannot read {}", rules_path.display()))?;
    // Validate before exporting.
    if !text.trim().is_empty() {
        parse_rule_text(&text)?;
    }
    match out {
        Some(path) => {
            fs::write(path, &text).with_context(|| format!("cannot write {}", path.display()))?;
            println!("exported rules to {}", path.display());
        }
        None => print!("{text}"),
    }
    Ok(())
}

#[derive(Serialize)]
struct CompileSummary {
    rules_nodes: usize,
    flagged: usize,
    train_size_before: usize,
    train_size_after: usize,
    test: EvalResult,
}

/// `compile-rules`: re-apply exported rules as a filter over recorded
/// traces, retrain on the surviving interactions, and report test metrics.
pub fn compile_rules(cfg: &RunConfig, rules_path: &Path, traces_path: &Path) -> Result<()> {
    ensure_dir(&cfg.output_dir)?;
    let rules_text = fs::read_to_string(rules_path)
        .with_context(|| format!("cannot read {}", rules_path.display()))?;
    let tree = parse_rule_text(&rules_text)?;
    let trace: LossTrace<Real> = LossTrace::load_csv(traces_path)?;

    let (data, _) = prepare_data(cfg)?;
    if trace.len() != data.train.len() {
        bail!(
            "trace covers {} interactions but the training split has {}; \
             the traces must come from the same config",
            trace.len(),
            data.train.len()
        );
    }
    let population = trace
        .latest_column()
        .context("trace has no recorded epochs")?
        .to_vec();
    let verdicts = apply_rules(&tree, &trace, &population)?;
    let kept: Vec<_> = data
        .train
        .interactions
        .iter()
        .zip(&verdicts)
        .filter(|(_, v)| !v.noisy)
        .map(|(it, _)| *it)
        .collect();
    let flagged = data.train.len() - kept.len();
    if kept.is_empty() {
        bail!("the rules flagged every training interaction; nothing left to train on");
    }
    let filtered = data.train.with_interactions(kept);

    let fresh = init_params::<Real>(
        data.train.num_users,
        data.train.num_items,
        cfg.agent.embedding_dim,
        cfg.agent.seed,
    )?;
    let (params, _, _) = train_bpr(&fresh, &filtered, &cfg.train)?;
    let summary = CompileSummary {
        rules_nodes: tree.node_count(),
        flagged,
        train_size_before: data.train.len(),
        train_size_after: filtered.len(),
        test: evaluate(&params, &data.test, &data.train, &cfg.agent.eval_ks)?,
    };
    write_json(&cfg.output_dir.join("compile_report.json"), &summary)?;
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

#[derive(Serialize)]
pub struct CompareArm {
    pub epochs: usize,
    pub wall_secs: f64,
    pub test: EvalResult,
}

#[derive(Serialize)]
pub struct CompareSummary {
    pub flagged: usize,
    pub baseline_test: EvalResult,
    pub retraining: CompareArm,
    pub loss_eraser: CompareArm,
    /// retraining wall time / unlearning wall time.
    pub speedup: f64,
    /// |eraser - retrain| / retrain on the decline metric (recall@20).
    pub relative_gap: f64,
}

/// `compare-unlearning`: matched comparison of full retraining against
/// LossEraser continuation on the same flagged set.
pub fn compare_unlearning(cfg: &RunConfig) -> Result<()> {
    ensure_dir(&cfg.output_dir)?;
    let (data, _) = prepare_data(cfg)?;
    let ks = &cfg.agent.eval_ks;

    // Base model trained on the (noisy) training split.
    let fresh = init_params::<Real>(
        data.train.num_users,
        data.train.num_items,
        cfg.agent.embedding_dim,
        cfg.agent.seed,
    )?;
    let (base_params, base_trace, _) = train_bpr(&fresh, &data.train, &cfg.train)?;
    let baseline_test = evaluate(&base_params, &data.test, &data.train, ks)?;

    // Flag interactions above the configured loss percentile.
    let population = base_trace
        .latest_column()
        .context("trace has no recorded epochs")?
        .to_vec();
    let flagged_idx = static_percentile_filter(&population, cfg.compare.percentile)?;
    let flagged_set: std::collections::HashSet<usize> = flagged_idx.iter().copied().collect();
    let kept: Vec<_> = data
        .train
        .interactions
        .iter()
        .enumerate()
        .filter(|(idx, _)| !flagged_set.contains(idx))
        .map(|(_, it)| *it)
        .collect();
    if kept.is_empty() {
        bail!("the percentile filter flagged everything; lower the percentile");
    }
    let clean = data.train.with_interactions(kept);
    let noisy: Vec<NoisyPair> = flagged_idx
        .iter()
        .map(|&idx| {
            let it = data.train.interactions[idx];
            NoisyPair {
                user: it.user,
                item: it.item,
                weight: 1.0,
            }
        })
        .collect();

    // Arm 1: full retraining from scratch on the filtered set.
    let retrain_epochs = if cfg.compare.retrain_epochs == 0 {
        cfg.train.epochs
    } else {
        cfg.compare.retrain_epochs
    };
    let mut retrain_cfg = cfg.train.clone();
    retrain_cfg.epochs = retrain_epochs;
    let retrain_fresh = init_params::<Real>(
        data.train.num_users,
        data.train.num_items,
        cfg.agent.embedding_dim,
        cfg.agent.seed.wrapping_add(1),
    )?;
    let started = Instant::now();
    let (retrained, _, _) = train_bpr(&retrain_fresh, &clean, &retrain_cfg)?;
    let retrain_secs = started.elapsed().as_secs_f64();

    // Arm 2: LossEraser continuation from the base parameters.
    let mut eraser_cfg = cfg.train.clone();
    eraser_cfg.epochs = cfg.agent.eraser_epochs;
    let started = Instant::now();
    let mut eraser_params = base_params.clone();
    let mut offset = cfg.train.epochs;
    for cycle in 0..cfg.compare.eraser_cycles {
        eraser_cfg.seed = cfg.train.seed.wrapping_add(cycle as u64 + 1);
        let (next, _, _) = train_loss_eraser(
            &eraser_params,
            &clean,
            &noisy,
            &data.train,
            offset,
            &eraser_cfg,
        )?;
        eraser_params = next;
        offset += eraser_cfg.epochs;
    }
    let eraser_secs = started.elapsed().as_secs_f64();

    let retraining = CompareArm {
        epochs: retrain_epochs,
        wall_secs: retrain_secs,
        test: evaluate(&retrained, &data.test, &data.train, ks)?,
    };
    let loss_eraser = CompareArm {
        epochs: cfg.agent.eraser_epochs * cfg.compare.eraser_cycles,
        wall_secs: eraser_secs,
        test: evaluate(&eraser_params, &data.test, &data.train, ks)?,
    };
    let metric = |result: &EvalResult| {
        result
            .recall(20)
            .or_else(|| result.ks().last().and_then(|&k| result.recall(k)))
            .unwrap_or(f64::NAN)
    };
    let summary = CompareSummary {
        flagged: noisy.len(),
        baseline_test,
        speedup: retraining.wall_secs / loss_eraser.wall_secs,
        relative_gap: (metric(&loss_eraser.test) - metric(&retraining.test)).abs()
            / metric(&retraining.test),
        retraining,
        loss_eraser,
    };
    write_json(&cfg.output_dir.join("compare_report.json"), &summary)?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

/// `report`: human-readable summary of a finished run directory.
pub fn report(run_dir: &Path) -> Result<()> {
    let report_path = run_dir.join("report.json");
    let text = fs::read_to_string(&report_path)
        .with_context(|| format!("cannot read {}", report_path.display()))?;
    let report: agent::RunReport = serde_json::from_str(&text)?;

    println!("# Run report: {}", run_dir.display());
    println!(
        "status: {}",
        if report.completed {
            "completed".to_string()
        } else {
            format!("incomplete ({})", report.error.as_deref().unwrap_or("?"))
        }
    );
    println!("planned actions: {}", report.planned_actions);
    println!("final test metrics: {}", report.final_eval.render());
    println!("\n## Actions");
    for record in &report.actions {
        let outcome = record
            .eval_outcome
            .as_ref()
            .map(|o| format!(" -> {}", o.render()))
            .unwrap_or_default();
        println!("{:>3}. {}{}", record.index, record.kind.name(), outcome);
    }
    println!("\n## Final rules\n{}", report.final_rules);
    let noisy = report.confidence.iter().filter(|c| c.score < 1.0).count();
    println!(
        "## Confidence: {} interactions scored, {} flagged noisy (score < 1)",
        report.confidence.len(),
        noisy
    );
    if let Ok(timings) = fs::read_to_string(run_dir.join("timings.json")) {
        println!("\n## Timings\n{timings}");
    }
    Ok(())
}
