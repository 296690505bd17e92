//! Top-K ranking over the full catalog and the Recall@K / NDCG@K metrics.
//!
//! Ranking excludes each user's training positives from the candidate set;
//! metrics are averaged over users with at least one held-out item. Only the
//! score-induced ordering matters, never score magnitudes.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::InteractionSet;
use crate::model::GmfParams;
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no users with held-out items to evaluate")]
    NoEvaluableUsers,
    #[error("held-out and training sets use different id spaces")]
    IdSpaceMismatch,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Mean Recall@K / NDCG@K over evaluable users, keyed `recall@K` / `ndcg@K`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    #[serde(flatten)]
    pub metrics: BTreeMap<String, f64>,
    /// Number of users the means were taken over.
    pub users: usize,
}

impl EvalResult {
    pub fn recall(&self, k: usize) -> Option<f64> {
        self.metrics.get(&format!("recall@{k}")).copied()
    }

    pub fn ndcg(&self, k: usize) -> Option<f64> {
        self.metrics.get(&format!("ndcg@{k}")).copied()
    }

    pub fn ks(&self) -> Vec<usize> {
        let mut ks: Vec<usize> = self
            .metrics
            .keys()
            .filter_map(|key| key.strip_prefix("recall@"))
            .filter_map(|k| k.parse().ok())
            .collect();
        ks.sort_unstable();
        ks
    }

    /// One-line rendering for action records and prompts.
    pub fn render(&self) -> String {
        let parts: Vec<String> = self
            .metrics
            .iter()
            .map(|(key, value)| format!("{key}={value:.5}"))
            .collect();
        format!("{} (over {} users)", parts.join(", "), self.users)
    }
}

/// Top-k items for a user over the whole catalog minus `exclude`, ordered by
/// score descending with ties broken by the smaller item index. Returns all
/// candidates when fewer than `k` remain.
pub fn rank_items<S: Scalar>(
    params: &GmfParams<S>,
    u: usize,
    exclude: &HashSet<usize>,
    k: usize,
) -> Result<Vec<usize>, EvalError> {
    if k == 0 {
        return Err(EvalError::InvalidArgument("k must be >= 1".into()));
    }
    if u >= params.num_users() {
        return Err(EvalError::InvalidArgument(format!(
            "user {u} out of range ({} users)",
            params.num_users()
        )));
    }
    let mut scored: Vec<(S, usize)> = (0..params.num_items())
        .filter(|i| !exclude.contains(i))
        .map(|i| (params.score_raw(u, i), i))
        .collect();
    scored.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .expect("finite scores")
            .then_with(|| a.1.cmp(&b.1))
    });
    scored.truncate(k);
    Ok(scored.into_iter().map(|(_, i)| i).collect())
}

/// |top-k hits| / |relevant|.
pub fn recall_at_k(ranked: &[usize], relevant: &HashSet<usize>, k: usize) -> f64 {
    debug_assert!(!relevant.is_empty());
    let hits = ranked
        .iter()
        .take(k)
        .filter(|i| relevant.contains(i))
        .count();
    hits as f64 / relevant.len() as f64
}

/// Binary-relevance NDCG with the `1 / log2(rank + 1)` discount.
pub fn ndcg_at_k(ranked: &[usize], relevant: &HashSet<usize>, k: usize) -> f64 {
    debug_assert!(!relevant.is_empty());
    let discount = |rank: usize| 1.0 / ((rank + 1) as f64).log2();
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, i)| relevant.contains(i))
        .map(|(pos, _)| discount(pos + 1))
        .sum();
    let ideal: f64 = (1..=k.min(relevant.len())).map(discount).sum();
    dcg / ideal
}

/// Per-user full-catalog ranking (training positives excluded) and the mean
/// Recall@K / NDCG@K over users with at least one held-out item.
pub fn evaluate<S: Scalar>(
    params: &GmfParams<S>,
    heldout: &InteractionSet,
    train: &InteractionSet,
    ks: &[usize],
) -> Result<EvalResult, EvalError> {
    if heldout.num_users != train.num_users || heldout.num_items != train.num_items {
        return Err(EvalError::IdSpaceMismatch);
    }
    if ks.is_empty() || ks.contains(&0) {
        return Err(EvalError::InvalidArgument(
            "ks must be non-empty and positive".into(),
        ));
    }
    let relevant_by_user = {
        let mut sets = vec![HashSet::new(); heldout.num_users];
        for it in &heldout.interactions {
            sets[it.user].insert(it.item);
        }
        sets
    };
    let train_by_user = train.positives_by_user();
    let k_max = *ks.iter().max().unwrap();

    let mut sums: BTreeMap<String, f64> = BTreeMap::new();
    let mut users = 0usize;
    for u in 0..heldout.num_users {
        let relevant = &relevant_by_user[u];
        if relevant.is_empty() {
            continue;
        }
        users += 1;
        let ranked = rank_items(params, u, &train_by_user[u], k_max)?;
        for &k in ks {
            *sums.entry(format!("recall@{k}")).or_default() += recall_at_k(&ranked, relevant, k);
            *sums.entry(format!("ndcg@{k}")).or_default() += ndcg_at_k(&ranked, relevant, k);
        }
    }
    if users == 0 {
        return Err(EvalError::NoEvaluableUsers);
    }

    let metrics = sums
        .into_iter()
        .map(|(key, sum)| (key, sum / users as f64))
        .collect();
    Ok(EvalResult { metrics, users })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::parse_interactions;
    use crate::model::{init_params, params_from_rows};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn one_user(scores: &[f64]) -> GmfParams<f64> {
        // dim 1: item embedding = score, user embedding = 1, h = 1.
        params_from_rows(
            vec![vec![1.0]],
            scores.iter().map(|&s| vec![s]).collect(),
            vec![1.0],
        )
    }

    #[test]
    fn rank_sorts_by_score() {
        let params = one_user(&[0.1, 0.9, 0.5]);
        let ranked = rank_items(&params, 0, &HashSet::new(), 2).unwrap();
        assert_eq!(ranked, vec![1, 2]);
    }

    #[test]
    fn rank_respects_exclusions() {
        let params = one_user(&[0.1, 0.9, 0.5]);
        let exclude: HashSet<usize> = [0, 1].into_iter().collect();
        assert_eq!(rank_items(&params, 0, &exclude, 5).unwrap(), vec![2]);
    }

    #[test]
    fn rank_breaks_ties_by_index() {
        let params = one_user(&[0.5, 0.5, 0.5, 0.5]);
        assert_eq!(
            rank_items(&params, 0, &HashSet::new(), 4).unwrap(),
            vec![0, 1, 2, 3]
        );
    }

    #[test]
    fn recall_hand_values() {
        let relevant: HashSet<usize> = [10, 20].into_iter().collect();
        assert_eq!(recall_at_k(&[10, 1, 2], &relevant, 3), 0.5);
        assert_eq!(recall_at_k(&[10, 20, 2], &relevant, 3), 1.0);
        assert_eq!(recall_at_k(&[5, 6, 7], &relevant, 3), 0.0);
    }

    #[test]
    fn ndcg_hand_values() {
        let single: HashSet<usize> = [7].into_iter().collect();
        assert_abs_diff_eq!(ndcg_at_k(&[7, 1, 2], &single, 3), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(ndcg_at_k(&[1, 2, 7], &single, 3), 0.5, epsilon = 1e-12);
        let pair: HashSet<usize> = [3, 4].into_iter().collect();
        assert_abs_diff_eq!(ndcg_at_k(&[3, 4, 5], &pair, 3), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn metrics_are_monotone_in_k() {
        // Recall@k never decreases with k. NDCG@k shares that property once
        // k covers the relevant set; below that the ideal DCG still grows
        // with k, so the normalized value can legitimately dip.
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..50 {
            let n = rng.gen_range(3..20);
            let ranked: Vec<usize> = (0..n).collect();
            let relevant: HashSet<usize> =
                (0..n).filter(|_| rng.gen_bool(0.3)).chain([0]).collect();
            for k in 1..n {
                assert!(
                    recall_at_k(&ranked, &relevant, k) <= recall_at_k(&ranked, &relevant, k + 1)
                );
                if k >= relevant.len() {
                    assert!(
                        ndcg_at_k(&ranked, &relevant, k)
                            <= ndcg_at_k(&ranked, &relevant, k + 1) + 1e-12
                    );
                }
            }
        }
    }

    #[test]
    fn evaluate_perfect_single_user() {
        let (full, _) = parse_interactions("A\ti0\nA\ti1\n").unwrap();
        let heldout = full.with_interactions(vec![full.interactions[1]]);
        let train = full.with_interactions(vec![full.interactions[0]]);
        // Held-out item i1 scores highest among non-train candidates.
        let params = one_user(&[0.9, 0.8]);
        let result = evaluate(&params, &heldout, &train, &[10, 20]).unwrap();
        assert_eq!(result.recall(10), Some(1.0));
        assert_eq!(result.ndcg(20), Some(1.0));
        assert_eq!(result.users, 1);
    }

    #[test]
    fn evaluate_errors_without_evaluable_users() {
        let (full, _) = parse_interactions("A\ti0\n").unwrap();
        let heldout = full.with_interactions(vec![]);
        let params = one_user(&[0.5]);
        assert!(matches!(
            evaluate(&params, &heldout, &full, &[10]),
            Err(EvalError::NoEvaluableUsers)
        ));
    }

    #[test]
    fn evaluate_is_invariant_under_monotone_score_transforms() {
        let params: GmfParams<f64> = init_params(4, 12, 6, 3).unwrap();
        let mut scaled = params.clone();
        scaled
            .output_weights_mut()
            .iter_mut()
            .for_each(|h| *h *= 2.5);

        // Six items per user so the split leaves test items for everyone.
        let text: String = (0..4)
            .flat_map(|u| {
                (0..12)
                    .filter(move |i| (u + i) % 2 == 0)
                    .map(move |i| (u, i))
            })
            .map(|(u, i)| format!("u{u}\ti{i}\n"))
            .collect();
        let (full, _) = parse_interactions(&text).unwrap();
        let (train, _valid, test) = crate::dataset::split(&full, 5).unwrap();

        let a = evaluate(&params, &test, &train, &[2, 5]).unwrap();
        let b = evaluate(&scaled, &test, &train, &[2, 5]).unwrap();
        assert_eq!(a, b);
    }

    /// Brute-force re-implementation: full sort of all candidate scores and
    /// literal metric definitions, kept independent of `rank_items`.
    fn brute_force_metrics(
        params: &GmfParams<f64>,
        heldout: &InteractionSet,
        train: &InteractionSet,
        k: usize,
    ) -> Option<(f64, f64)> {
        let mut recall_sum = 0.0;
        let mut ndcg_sum = 0.0;
        let mut users = 0;
        for u in 0..heldout.num_users {
            let relevant: Vec<usize> = heldout
                .interactions
                .iter()
                .filter(|it| it.user == u)
                .map(|it| it.item)
                .collect();
            if relevant.is_empty() {
                continue;
            }
            users += 1;
            let excluded: HashSet<usize> = train
                .interactions
                .iter()
                .filter(|it| it.user == u)
                .map(|it| it.item)
                .collect();
            let mut candidates: Vec<usize> = (0..train.num_items)
                .filter(|i| !excluded.contains(i))
                .collect();
            // Selection by repeated argmax: independent of the sort in eval.
            let mut ordered = Vec::new();
            while !candidates.is_empty() {
                let best = *candidates
                    .iter()
                    .max_by(|&&a, &&b| {
                        crate::model::score(params, u, a)
                            .unwrap()
                            .partial_cmp(&crate::model::score(params, u, b).unwrap())
                            .unwrap()
                            .then_with(|| b.cmp(&a))
                    })
                    .unwrap();
                ordered.push(best);
                candidates.retain(|&i| i != best);
            }
            let hits: Vec<bool> = ordered
                .iter()
                .take(k)
                .map(|i| relevant.contains(i))
                .collect();
            recall_sum += hits.iter().filter(|&&h| h).count() as f64 / relevant.len() as f64;
            let dcg: f64 = hits
                .iter()
                .enumerate()
                .filter(|(_, &h)| h)
                .map(|(pos, _)| 1.0 / ((pos + 2) as f64).log2())
                .sum();
            let idcg: f64 = (0..k.min(relevant.len()))
                .map(|pos| 1.0 / ((pos + 2) as f64).log2())
                .sum();
            ndcg_sum += dcg / idcg;
        }
        (users > 0).then(|| (recall_sum / users as f64, ndcg_sum / users as f64))
    }

    #[test]
    fn evaluate_matches_brute_force_on_micro_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut checked = 0;
        while checked < 20 {
            let num_users = rng.gen_range(1..=5);
            let num_items = rng.gen_range(2..=10);
            let text: String = (0..num_users)
                .flat_map(|u| {
                    let mut items: Vec<usize> = (0..num_items).collect();
                    let keep = rng.gen_range(1..=num_items);
                    let (kept, _) =
                        rand::seq::SliceRandom::partial_shuffle(&mut items[..], &mut rng, keep);
                    kept.iter().map(|&i| (u, i)).collect::<Vec<_>>()
                })
                .map(|(u, i)| format!("u{u}\ti{i}\n"))
                .collect();
            let (full, _) = parse_interactions(&text).unwrap();
            let (train, _, test) = crate::dataset::split(&full, rng.gen()).unwrap();
            if test.is_empty() {
                continue;
            }
            let params: GmfParams<f64> =
                init_params(full.num_users, full.num_items, 4, rng.gen()).unwrap();
            let k = rng.gen_range(1..=num_items);

            let Some((recall, ndcg)) = brute_force_metrics(&params, &test, &train, k) else {
                continue;
            };
            let result = evaluate(&params, &test, &train, &[k]).unwrap();
            assert_eq!(result.recall(k), Some(recall));
            assert_eq!(result.ndcg(k), Some(ndcg));
            checked += 1;
        }
    }

    #[test]
    fn eval_result_serializes_with_metric_keys() {
        let mut metrics = BTreeMap::new();
        metrics.insert("recall@10".to_string(), 0.5);
        metrics.insert("ndcg@10".to_string(), 0.25);
        let result = EvalResult { metrics, users: 3 };
        let json = serde_json::to_string(&result).unwrap();
        assert!(json.contains("\"recall@10\":0.5"));
        assert!(json.contains("\"ndcg@10\":0.25"));
        let back: EvalResult = serde_json::from_str(&json).unwrap();
        assert_eq!(back, result);
    }
}
