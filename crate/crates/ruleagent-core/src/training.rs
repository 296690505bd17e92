//! Pairwise-ranking training, per-interaction loss traces, and the
//! gradient-reversal unlearning phase.
//!
//! Loss traces record, for every interaction, the ranking loss against one
//! fixed evaluation negative (assigned once per run from a dedicated seed).
//! That keeps the per-interaction signal comparable across epochs, which is
//! what the denoising rules consume. During unlearning the plain ranking
//! loss keeps being recorded, over the original pre-filter set.

use std::collections::HashSet;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::InteractionSet;
use crate::model::{accumulate_pair_grad, adam_step, AdamState, GmfParams, Gradients, ModelError};
use crate::scalar::Scalar;
use crate::stats::nearest_rank_percentile;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("training set is empty")]
    EmptySet,
    #[error("user {0} has no unobserved items to sample negatives from")]
    NoNegatives(usize),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt trace file {path} line {line}: {message}")]
    CorruptTrace {
        path: String,
        line: usize,
        message: String,
    },
}

/// Knobs for one training phase.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Weight of the reversal objective relative to the ranking loss.
    pub alpha: f64,
    pub negatives_per_positive: usize,
    pub seed: u64,
    /// Record the loss trace every this many epochs (the final epoch is
    /// always recorded).
    pub trace_every: usize,
    /// Seed for the fixed evaluation negatives backing the trace. Kept
    /// separate from `seed` so training phases can reshuffle without
    /// changing what the trace measures.
    pub trace_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 512,
            learning_rate: 0.001,
            alpha: 0.01,
            negatives_per_positive: 1,
            seed: 42,
            trace_every: 10,
            trace_seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 {
            return Err(TrainError::InvalidConfig("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if self.negatives_per_positive == 0 {
            return Err(TrainError::InvalidConfig(
                "negatives_per_positive must be >= 1".into(),
            ));
        }
        if self.trace_every == 0 {
            return Err(TrainError::InvalidConfig("trace_every must be >= 1".into()));
        }
        if self.alpha < 0.0 || !self.alpha.is_finite() {
            return Err(TrainError::InvalidConfig("alpha must be >= 0".into()));
        }
        Ok(())
    }
}

/// Per-interaction loss history over the recorded epochs.
///
/// Stored column-major: one column of `len` losses per recorded epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossTrace<S: Scalar> {
    len: usize,
    epochs: Vec<usize>,
    columns: Vec<Vec<S>>,
}

impl<S: Scalar> LossTrace<S> {
    pub fn new(len: usize) -> LossTrace<S> {
        LossTrace {
            len,
            epochs: Vec::new(),
            columns: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn epochs(&self) -> &[usize] {
        &self.epochs
    }

    pub fn push(&mut self, epoch: usize, values: Vec<S>) -> Result<(), TrainError> {
        if values.len() != self.len {
            return Err(TrainError::InvalidArgument(format!(
                "trace column has {} values, expected {}",
                values.len(),
                self.len
            )));
        }
        if let Some(&last) = self.epochs.last() {
            if epoch <= last {
                return Err(TrainError::InvalidArgument(format!(
                    "trace epochs must increase: {epoch} after {last}"
                )));
            }
        }
        if values.iter().any(|v| !v.is_finite() || *v < S::zero()) {
            return Err(TrainError::InvalidArgument(
                "trace values must be finite and non-negative".into(),
            ));
        }
        self.epochs.push(epoch);
        self.columns.push(values);
        Ok(())
    }

    /// The recorded (epoch, loss) series of one interaction.
    pub fn series(&self, idx: usize) -> Vec<(usize, S)> {
        self.epochs
            .iter()
            .zip(&self.columns)
            .map(|(&e, col)| (e, col[idx]))
            .collect()
    }

    pub fn values(&self, idx: usize) -> Vec<S> {
        self.columns.iter().map(|col| col[idx]).collect()
    }

    pub fn latest(&self, idx: usize) -> Option<S> {
        self.columns.last().map(|col| col[idx])
    }

    /// Latest recorded losses of all interactions: the reference population
    /// for percentile and median statistics.
    pub fn latest_column(&self) -> Option<&[S]> {
        self.columns.last().map(|col| col.as_slice())
    }

    /// Appends another trace's columns (epochs must keep increasing).
    pub fn extend(&mut self, other: &LossTrace<S>) -> Result<(), TrainError> {
        if other.len != self.len {
            return Err(TrainError::InvalidArgument(format!(
                "trace length mismatch: {} vs {}",
                other.len, self.len
            )));
        }
        for (&epoch, col) in other.epochs.iter().zip(&other.columns) {
            self.push(epoch, col.clone())?;
        }
        Ok(())
    }

    /// Writes the trace as `interaction,epoch,loss` CSV rows.
    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<(), TrainError> {
        let path = path.as_ref();
        let mut out = String::from("interaction,epoch,loss\n");
        for idx in 0..self.len {
            for (&epoch, col) in self.epochs.iter().zip(&self.columns) {
                out.push_str(&format!("{idx},{epoch},{}\n", col[idx].as_f64()));
            }
        }
        fs::write(path, out).map_err(|source| TrainError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    /// Reads a trace written by [`save_csv`].
    pub fn load_csv(path: impl AsRef<Path>) -> Result<LossTrace<S>, TrainError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| TrainError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let corrupt = |line: usize, message: String| TrainError::CorruptTrace {
            path: path.display().to_string(),
            line,
            message,
        };

        let mut rows: Vec<(usize, usize, f64)> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if lineno == 0 || line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            let [a, b, c] = fields.as_slice() else {
                return Err(corrupt(lineno + 1, "expected 3 columns".into()));
            };
            let idx: usize = a
                .parse()
                .map_err(|_| corrupt(lineno + 1, format!("bad index {a:?}")))?;
            let epoch: usize = b
                .parse()
                .map_err(|_| corrupt(lineno + 1, format!("bad epoch {b:?}")))?;
            let loss: f64 = c
                .parse()
                .map_err(|_| corrupt(lineno + 1, format!("bad loss {c:?}")))?;
            rows.push((idx, epoch, loss));
        }
        if rows.is_empty() {
            return Err(corrupt(0, "trace file has no rows".into()));
        }

        let len = rows.iter().map(|r| r.0).max().unwrap() + 1;
        let mut epochs: Vec<usize> = rows
            .iter()
            .map(|r| r.1)
            .collect::<HashSet<_>>()
            .into_iter()
            .collect();
        epochs.sort_unstable();
        let mut trace = LossTrace::new(len);
        for (pos, &epoch) in epochs.iter().enumerate() {
            let mut col = vec![None; len];
            for &(idx, e, loss) in &rows {
                if e == epoch {
                    col[idx] = Some(S::from_f64(loss));
                }
            }
            let col: Option<Vec<S>> = col.into_iter().collect();
            let col =
                col.ok_or_else(|| corrupt(0, format!("epoch {epoch} misses interactions")))?;
            trace
                .push(epoch, col)
                .map_err(|e| corrupt(pos, e.to_string()))?;
        }
        Ok(trace)
    }
}

/// What a training phase returns: updated parameters, the trace recorded
/// over the phase, and one report per epoch.
pub type TrainOutcome<S> = (GmfParams<S>, LossTrace<S>, Vec<EpochReport>);

/// Per-epoch progress line, streamed to the run log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub mean_loss: f64,
    pub wall_time_secs: f64,
}

/// A flagged positive scheduled for reversal, with its adaptive weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoisyPair {
    pub user: usize,
    pub item: usize,
    pub weight: f64,
}

/// Progressive reversal schedule: `alpha_t = t / total` for the completed
/// epoch `t` in `1..=total`, so reversal starts gently and ends at full
/// strength.
pub fn progressive_alpha(t: usize, total: usize) -> f64 {
    debug_assert!(t >= 1 && t <= total);
    t as f64 / total as f64
}

fn draw_negative<R: Rng>(
    rng: &mut R,
    observed: &HashSet<usize>,
    num_items: usize,
    user: usize,
) -> Result<usize, TrainError> {
    if observed.len() >= num_items {
        return Err(TrainError::NoNegatives(user));
    }
    loop {
        let j = rng.gen_range(0..num_items);
        if !observed.contains(&j) {
            return Ok(j);
        }
    }
}

/// The fixed evaluation negative for each interaction, in set order.
pub fn assign_eval_negatives(set: &InteractionSet, seed: u64) -> Result<Vec<usize>, TrainError> {
    let positives = set.positives_by_user();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    set.interactions
        .iter()
        .map(|it| draw_negative(&mut rng, &positives[it.user], set.num_items, it.user))
        .collect()
}

/// One ranking loss per interaction, against its fixed seeded evaluation
/// negative. Output order matches set order.
pub fn record_losses<S: Scalar>(
    params: &GmfParams<S>,
    set: &InteractionSet,
    seed: u64,
) -> Result<Vec<S>, TrainError> {
    let negatives = assign_eval_negatives(set, seed)?;
    Ok(record_losses_against(params, set, &negatives))
}

fn record_losses_against<S: Scalar>(
    params: &GmfParams<S>,
    set: &InteractionSet,
    negatives: &[usize],
) -> Vec<S> {
    set.interactions
        .iter()
        .zip(negatives)
        .map(|(it, &j)| {
            crate::model::log_sigmoid_loss(
                params.score_raw(it.user, it.item) - params.score_raw(it.user, j),
            )
        })
        .collect()
}

fn check_dims<S: Scalar>(params: &GmfParams<S>, set: &InteractionSet) -> Result<(), TrainError> {
    if params.num_users() < set.num_users || params.num_items() < set.num_items {
        return Err(TrainError::InvalidArgument(format!(
            "parameters cover {}x{} but the set needs {}x{}",
            params.num_users(),
            params.num_items(),
            set.num_users,
            set.num_items
        )));
    }
    Ok(())
}

/// Plain ranking training: per epoch a seeded shuffle, minibatches of
/// (user, positive, sampled negative) triples, and Adam updates. Also usable
/// as a continuation by passing already-trained parameters.
pub fn train_bpr<S: Scalar>(
    params: &GmfParams<S>,
    train: &InteractionSet,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<S>, TrainError> {
    train_phase(params, train, &[], train, 0, cfg)
}

/// Unlearning continuation: clean triples keep optimizing the ranking loss
/// while each flagged positive is re-optimized as a soft negative against a
/// seeded clean positive of the same user, scaled by `alpha * alpha_t * w`.
/// Traces are recorded over `trace_on` (the original pre-filter set) with
/// epochs offset by `epoch_offset`.
pub fn train_loss_eraser<S: Scalar>(
    params: &GmfParams<S>,
    clean: &InteractionSet,
    noisy: &[NoisyPair],
    trace_on: &InteractionSet,
    epoch_offset: usize,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<S>, TrainError> {
    let original_positives = trace_on.positives_by_user();
    for pair in noisy {
        if !(0.0..=1.0).contains(&pair.weight) {
            return Err(TrainError::InvalidArgument(format!(
                "reversal weight {} outside [0, 1]",
                pair.weight
            )));
        }
        if pair.user >= trace_on.num_users || !original_positives[pair.user].contains(&pair.item) {
            return Err(TrainError::InvalidArgument(format!(
                "flagged pair ({}, {}) is not a positive of the pre-filter set",
                pair.user, pair.item
            )));
        }
    }
    train_phase(params, clean, noisy, trace_on, epoch_offset, cfg)
}

fn train_phase<S: Scalar>(
    params: &GmfParams<S>,
    clean: &InteractionSet,
    noisy: &[NoisyPair],
    trace_on: &InteractionSet,
    epoch_offset: usize,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<S>, TrainError> {
    cfg.validate()?;
    if clean.is_empty() {
        return Err(TrainError::EmptySet);
    }
    check_dims(params, clean)?;
    check_dims(params, trace_on)?;

    let mut params = params.clone();
    let mut state = AdamState::new(&params, cfg.learning_rate);
    let positives = clean.positives_by_user();

    // Clean positives per user for eraser pairing, with a logged fallback to
    // the user's full pre-filter positives when everything they did was
    // flagged.
    let clean_by_user: Vec<Vec<usize>> = {
        let mut lists = vec![Vec::new(); clean.num_users.max(trace_on.num_users)];
        for it in &clean.interactions {
            lists[it.user].push(it.item);
        }
        lists
    };
    let original_by_user: Vec<Vec<usize>> = {
        let mut lists = vec![Vec::new(); trace_on.num_users];
        for it in &trace_on.interactions {
            lists[it.user].push(it.item);
        }
        lists
    };
    for pair in noisy {
        if clean_by_user[pair.user].is_empty() {
            log::warn!(
                "user {} has no clean positives; pairing eraser triples from their full history",
                pair.user
            );
        }
    }

    // Two independent streams so the reversal machinery never perturbs the
    // clean-path schedule (alpha = 0 must reproduce plain training exactly).
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut eraser_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);

    let trace_negatives = assign_eval_negatives(trace_on, cfg.trace_seed)?;
    let mut trace = LossTrace::new(trace_on.len());
    let mut reports = Vec::with_capacity(cfg.epochs);
    let mut grad = Gradients::zeros_like(&params);
    let mut order: Vec<usize> = (0..clean.len()).collect();
    let mut eraser_order: Vec<usize> = (0..noisy.len()).collect();

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let use_eraser = cfg.alpha > 0.0 && !noisy.is_empty();
        if use_eraser {
            eraser_order.shuffle(&mut eraser_rng);
        }
        let alpha_t = progressive_alpha(epoch, cfg.epochs);
        let num_batches = order.len().div_ceil(cfg.batch_size);

        let mut loss_sum = 0.0f64;
        let mut triples = 0usize;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            grad.clear();
            let mut batch_triples = 0usize;
            for &idx in batch {
                let it = clean.interactions[idx];
                for _ in 0..cfg.negatives_per_positive {
                    let j = draw_negative(&mut rng, &positives[it.user], clean.num_items, it.user)?;
                    let delta = params.score_raw(it.user, it.item) - params.score_raw(it.user, j);
                    loss_sum += crate::model::log_sigmoid_loss(delta).as_f64();
                    accumulate_pair_grad(
                        &params,
                        &mut grad,
                        it.user,
                        it.item,
                        j,
                        S::one(),
                        S::one(),
                    );
                    batch_triples += 1;
                }
            }
            let inv = S::from_f64(1.0 / batch_triples as f64);
            grad.scale(inv);

            if use_eraser {
                let start = b * noisy.len() / num_batches;
                let end = (b + 1) * noisy.len() / num_batches;
                let slice = &eraser_order[start..end];
                if !slice.is_empty() {
                    let per_triple = S::from_f64(cfg.alpha / slice.len() as f64);
                    let scale = |w: f64| S::from_f64(alpha_t * w);
                    for &nidx in slice {
                        let pair = noisy[nidx];
                        let pool = if clean_by_user[pair.user].is_empty() {
                            &original_by_user[pair.user]
                        } else {
                            &clean_by_user[pair.user]
                        };
                        let i = pool[eraser_rng.gen_range(0..pool.len())];
                        accumulate_pair_grad(
                            &params,
                            &mut grad,
                            pair.user,
                            i,
                            pair.item,
                            scale(pair.weight),
                            per_triple,
                        );
                    }
                }
            }

            adam_step(&mut params, &mut state, &grad)?;
            triples += batch_triples;
        }

        let global_epoch = epoch_offset + epoch;
        reports.push(EpochReport {
            epoch: global_epoch,
            mean_loss: loss_sum / triples as f64,
            wall_time_secs: started.elapsed().as_secs_f64(),
        });
        if epoch % cfg.trace_every == 0 || epoch == cfg.epochs {
            trace.push(
                global_epoch,
                record_losses_against(&params, trace_on, &trace_negatives),
            )?;
        }
    }

    Ok((params, trace, reports))
}

/// Indices whose value strictly exceeds the nearest-rank percentile of the
/// whole vector. The static-threshold comparison baseline.
pub fn static_percentile_filter<S: Scalar>(
    values: &[S],
    percentile: f64,
) -> Result<Vec<usize>, TrainError> {
    if values.is_empty() {
        return Err(TrainError::InvalidArgument(
            "percentile filter needs a non-empty vector".into(),
        ));
    }
    if !(0.0 < percentile && percentile < 1.0) {
        return Err(TrainError::InvalidArgument(format!(
            "percentile {percentile} outside (0, 1)"
        )));
    }
    let threshold = nearest_rank_percentile(values, percentile);
    Ok(values
        .iter()
        .enumerate()
        .filter(|(_, &v)| v > threshold)
        .map(|(idx, _)| idx)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::synthetic::{block_structured, BlockFixture};
    use crate::dataset::{inject_noise, parse_interactions};
    use crate::model::init_params;

    const LN_2: f64 = std::f64::consts::LN_2;

    fn fixture(users: usize, items: usize, seed: u64) -> InteractionSet {
        block_structured(&BlockFixture {
            users,
            items,
            blocks: 2,
            density: 0.6,
            seed,
        })
    }

    fn quick_cfg(epochs: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 64,
            learning_rate: 0.005,
            alpha: 0.01,
            negatives_per_positive: 1,
            seed,
            trace_every: 5,
            trace_seed: seed,
        }
    }

    #[test]
    fn first_epoch_mean_loss_is_near_ln2() {
        let set = fixture(50, 100, 3);
        assert!(set.len() >= 1000, "need >= 1000 triples, got {}", set.len());
        let params = init_params::<f64>(set.num_users, set.num_items, 16, 7).unwrap();
        let (_, _, reports) = train_bpr(&params, &set, &quick_cfg(1, 5)).unwrap();
        assert!(
            (reports[0].mean_loss - LN_2).abs() <= 0.1,
            "epoch-1 mean loss {} too far from ln 2",
            reports[0].mean_loss
        );
    }

    #[test]
    fn mean_loss_trends_down_over_training() {
        // Measured on the fixed-negative trace: the online epoch mean jitters
        // with every epoch's fresh negative draws, the trace does not.
        let set = block_structured(&BlockFixture {
            users: 20,
            items: 100,
            blocks: 4,
            density: 0.6,
            seed: 11,
        });
        let mut cfg = quick_cfg(50, 9);
        cfg.trace_every = 1;
        cfg.learning_rate = 0.005;
        let params = init_params::<f64>(set.num_users, set.num_items, 16, 2).unwrap();
        let (_, trace, reports) = train_bpr(&params, &set, &cfg).unwrap();
        let means: Vec<f64> = (0..cfg.epochs)
            .map(|e| (0..set.len()).map(|i| trace.series(i)[e].1).sum::<f64>() / set.len() as f64)
            .collect();
        let upticks = means.windows(2).filter(|w| w[1] > w[0]).count();
        assert!(
            upticks as f64 <= 0.05 * means.len() as f64,
            "{upticks} upticks in {} epochs",
            means.len()
        );
        assert!(means.last().unwrap() < &means[0]);
        assert!(reports.last().unwrap().mean_loss < reports[0].mean_loss);
    }

    #[test]
    fn training_is_deterministic() {
        let set = fixture(10, 30, 4);
        let params = init_params::<f64>(set.num_users, set.num_items, 8, 6).unwrap();
        let (a, trace_a, _) = train_bpr(&params, &set, &quick_cfg(10, 21)).unwrap();
        let (b, trace_b, _) = train_bpr(&params, &set, &quick_cfg(10, 21)).unwrap();
        assert_eq!(a, b);
        assert_eq!(trace_a, trace_b);
    }

    #[test]
    fn record_losses_on_zero_params_is_ln2_everywhere() {
        let (set, _) = parse_interactions("A\tX\nA\tY\nB\tX\nB\tZ\n").unwrap();
        let params = crate::model::params_from_rows::<f64>(
            vec![vec![0.0, 0.0]; 2],
            vec![vec![0.0, 0.0]; 3],
            vec![0.0, 0.0],
        );
        let losses = record_losses(&params, &set, 5).unwrap();
        assert_eq!(losses.len(), set.len());
        assert!(losses.iter().all(|&l| (l - LN_2).abs() < 1e-12));
    }

    #[test]
    fn record_losses_is_deterministic() {
        let set = fixture(8, 20, 1);
        let params = init_params::<f64>(set.num_users, set.num_items, 4, 3).unwrap();
        assert_eq!(
            record_losses(&params, &set, 77).unwrap(),
            record_losses(&params, &set, 77).unwrap()
        );
        assert_eq!(
            assign_eval_negatives(&set, 77).unwrap(),
            assign_eval_negatives(&set, 77).unwrap()
        );
    }

    #[test]
    fn progressive_alpha_endpoints() {
        assert_eq!(progressive_alpha(1, 10), 0.1);
        assert_eq!(progressive_alpha(10, 10), 1.0);
    }

    #[test]
    fn eraser_with_empty_noisy_list_matches_plain_continuation() {
        let set = fixture(10, 30, 8);
        let start = init_params::<f64>(set.num_users, set.num_items, 8, 1).unwrap();
        let cfg = quick_cfg(8, 33);
        let (plain, plain_trace, _) = train_bpr(&start, &set, &cfg).unwrap();
        let (erased, eraser_trace, _) =
            train_loss_eraser(&start, &set, &[], &set, 0, &cfg).unwrap();
        assert_eq!(plain, erased);
        assert_eq!(plain_trace, eraser_trace);
    }

    #[test]
    fn eraser_with_alpha_zero_matches_plain_continuation() {
        let set = fixture(10, 30, 8);
        let start = init_params::<f64>(set.num_users, set.num_items, 8, 1).unwrap();
        let mut cfg = quick_cfg(8, 33);
        cfg.alpha = 0.0;
        let noisy = vec![NoisyPair {
            user: set.interactions[0].user,
            item: set.interactions[0].item,
            weight: 1.0,
        }];
        let (plain, _, _) = train_bpr(&start, &set, &cfg).unwrap();
        let (erased, _, _) = train_loss_eraser(&start, &set, &noisy, &set, 0, &cfg).unwrap();
        assert_eq!(plain, erased);
    }

    #[test]
    fn unlearning_raises_the_flagged_pairs_recorded_loss() {
        let clean_set = fixture(10, 40, 13);
        let (noisy_set, ledger) = inject_noise(&clean_set, 0.1, 99).unwrap();
        let init = init_params::<f64>(noisy_set.num_users, noisy_set.num_items, 8, 4).unwrap();
        let cfg = quick_cfg(40, 51);
        let (base, _, _) = train_bpr(&init, &noisy_set, &cfg).unwrap();

        let target = ledger.injected[0];
        let flagged: HashSet<_> = [target].into_iter().collect();
        let clean: Vec<_> = noisy_set
            .interactions
            .iter()
            .filter(|it| !flagged.contains(*it))
            .copied()
            .collect();
        let clean_only = noisy_set.with_interactions(clean);
        let noisy = vec![NoisyPair {
            user: target.user,
            item: target.item,
            weight: 1.0,
        }];

        let target_idx = noisy_set
            .interactions
            .iter()
            .position(|it| *it == target)
            .unwrap();
        let before = record_losses(&base, &noisy_set, cfg.trace_seed).unwrap()[target_idx];

        let mut eraser_cfg = quick_cfg(20, 52);
        eraser_cfg.alpha = 0.5;
        let (after_params, _, _) = train_loss_eraser(
            &base,
            &clean_only,
            &noisy,
            &noisy_set,
            cfg.epochs,
            &eraser_cfg,
        )
        .unwrap();
        let after = record_losses(&after_params, &noisy_set, cfg.trace_seed).unwrap()[target_idx];

        assert!(
            after > before,
            "unlearning should raise the flagged loss: before {before}, after {after}"
        );
    }

    #[test]
    fn eraser_rejects_pairs_not_in_prefilter_set() {
        let set = fixture(5, 10, 2);
        let params = init_params::<f64>(set.num_users, set.num_items, 4, 0).unwrap();
        let absent = NoisyPair {
            user: 0,
            item: 9999,
            weight: 1.0,
        };
        assert!(matches!(
            train_loss_eraser(&params, &set, &[absent], &set, 0, &quick_cfg(1, 0)),
            Err(TrainError::InvalidArgument(_))
        ));
    }

    #[test]
    fn trace_epochs_align_and_include_final() {
        let set = fixture(6, 16, 5);
        let params = init_params::<f64>(set.num_users, set.num_items, 4, 1).unwrap();
        let mut cfg = quick_cfg(13, 2);
        cfg.trace_every = 5;
        let (_, trace, _) = train_bpr(&params, &set, &cfg).unwrap();
        assert_eq!(trace.epochs(), &[5, 10, 13]);
        assert_eq!(trace.len(), set.len());
    }

    #[test]
    fn percentile_filter_hand_case() {
        let values: Vec<f64> = (1..=100).map(f64::from).collect();
        let flagged = static_percentile_filter(&values, 0.95).unwrap();
        assert_eq!(flagged, vec![95, 96, 97, 98, 99]);
    }

    #[test]
    fn percentile_filter_flags_nothing_when_all_equal() {
        let values = vec![0.5f64; 20];
        assert!(static_percentile_filter(&values, 0.95).unwrap().is_empty());
    }

    #[test]
    fn percentile_filter_single_value() {
        assert!(static_percentile_filter(&[3.0f64], 0.95)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn percentile_filter_size_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..50 {
            let n = rng.gen_range(1..200);
            let values: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..10.0)).collect();
            let p = rng.gen_range(0.05..0.95);
            let flagged = static_percentile_filter(&values, p).unwrap();
            assert!(flagged.len() as f64 <= ((1.0 - p) * n as f64).floor());
        }
    }

    #[test]
    fn percentile_filter_rejects_empty() {
        assert!(static_percentile_filter::<f64>(&[], 0.9).is_err());
    }

    #[test]
    fn trace_round_trips_through_csv() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        let mut trace = LossTrace::<f64>::new(3);
        trace.push(5, vec![0.1, 0.2, 0.3]).unwrap();
        trace.push(10, vec![0.05, 0.25, 0.31]).unwrap();
        trace.save_csv(&path).unwrap();
        let loaded = LossTrace::<f64>::load_csv(&path).unwrap();
        assert_eq!(loaded, trace);
    }

    #[test]
    fn trace_rejects_non_increasing_epochs() {
        let mut trace = LossTrace::<f64>::new(1);
        trace.push(5, vec![0.1]).unwrap();
        assert!(trace.push(5, vec![0.1]).is_err());
        assert!(trace.push(4, vec![0.1]).is_err());
    }
}
