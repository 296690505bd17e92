//! Shared order statistics used by the percentile filter, rule predicates,
//! and the confidence initialization map.

use crate::scalar::Scalar;

/// Nearest-rank percentile: the value at rank `ceil(p * N)` (1-based) of the
/// ascending sort. `p` must lie in (0, 1) and `values` must be non-empty.
pub fn nearest_rank_percentile<S: Scalar>(values: &[S], p: f64) -> S {
    debug_assert!(!values.is_empty());
    debug_assert!(p > 0.0 && p < 1.0);
    let mut sorted: Vec<S> = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite loss values"));
    let rank = (p * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Population variance (divides by N, not N-1).
pub fn population_variance<S: Scalar>(values: &[S]) -> S {
    debug_assert!(!values.is_empty());
    let n = S::from_f64(values.len() as f64);
    let mean = values.iter().copied().sum::<S>() / n;
    values.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n
}

/// Median of the values; the mean of the two middle elements for even N.
pub fn median<S: Scalar>(values: &[S]) -> S {
    debug_assert!(!values.is_empty());
    let mut sorted: Vec<S> = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite loss values"));
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / S::from_f64(2.0)
    }
}

/// Fraction of values less than or equal to `x`, in (0, 1].
pub fn percentile_rank<S: Scalar>(values: &[S], x: S) -> f64 {
    debug_assert!(!values.is_empty());
    let at_or_below = values.iter().filter(|&&v| v <= x).count();
    at_or_below as f64 / values.len() as f64
}
