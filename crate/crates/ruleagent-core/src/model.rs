//! GMF scoring model: embedding tables with a learned output weight vector,
//! pairwise ranking losses, their analytic gradients, and the Adam update.
//!
//! The score is `f(u, i) = sum_k h[k] * z_u[k] * z_i[k]`. With the output
//! weights initialized to ones this degenerates to a plain dot product, so
//! the first training cycle is comparable to vanilla matrix factorization.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("index out of range: {kind} {index} (limit {limit})")]
    IndexOutOfRange {
        kind: &'static str,
        index: usize,
        limit: usize,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt parameter dump {path}: {message}")]
    Corrupt { path: String, message: String },
}

/// Embedding tables and the GMF output weights.
#[derive(Debug, Clone, PartialEq)]
pub struct GmfParams<S: Scalar> {
    user_embeddings: Vec<S>,
    item_embeddings: Vec<S>,
    output_weights: Vec<S>,
    num_users: usize,
    num_items: usize,
    dim: usize,
}

impl<S: Scalar> GmfParams<S> {
    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn user_row(&self, u: usize) -> &[S] {
        &self.user_embeddings[u * self.dim..(u + 1) * self.dim]
    }

    pub fn item_row(&self, i: usize) -> &[S] {
        &self.item_embeddings[i * self.dim..(i + 1) * self.dim]
    }

    pub fn output_weights(&self) -> &[S] {
        &self.output_weights
    }

    pub fn user_row_mut(&mut self, u: usize) -> &mut [S] {
        &mut self.user_embeddings[u * self.dim..(u + 1) * self.dim]
    }

    pub fn item_row_mut(&mut self, i: usize) -> &mut [S] {
        &mut self.item_embeddings[i * self.dim..(i + 1) * self.dim]
    }

    pub fn output_weights_mut(&mut self) -> &mut [S] {
        &mut self.output_weights
    }

    fn check_user(&self, u: usize) -> Result<(), ModelError> {
        if u >= self.num_users {
            return Err(ModelError::IndexOutOfRange {
                kind: "user",
                index: u,
                limit: self.num_users,
            });
        }
        Ok(())
    }

    fn check_item(&self, i: usize) -> Result<(), ModelError> {
        if i >= self.num_items {
            return Err(ModelError::IndexOutOfRange {
                kind: "item",
                index: i,
                limit: self.num_items,
            });
        }
        Ok(())
    }

    /// `f(z_u, z_i)` without bounds checks; callers validate indices up front.
    pub(crate) fn score_raw(&self, u: usize, i: usize) -> S {
        let zu = self.user_row(u);
        let zi = self.item_row(i);
        let mut acc = S::zero();
        for k in 0..self.dim {
            acc += self.output_weights[k] * zu[k] * zi[k];
        }
        acc
    }

    pub fn all_finite(&self) -> bool {
        self.user_embeddings.iter().all(|v| v.is_finite())
            && self.item_embeddings.iter().all(|v| v.is_finite())
            && self.output_weights.iter().all(|v| v.is_finite())
    }
}

/// Xavier-uniform initialization with `fan_in = fan_out = dim`, so embeddings
/// land in `[-b, b]` with `b = sqrt(6 / (2 dim))`. Output weights start at
/// all-ones.
pub fn init_params<S: Scalar>(
    num_users: usize,
    num_items: usize,
    dim: usize,
    seed: u64,
) -> Result<GmfParams<S>, ModelError> {
    if dim == 0 {
        return Err(ModelError::InvalidArgument(
            "embedding dim must be >= 1".to_string(),
        ));
    }
    let bound = xavier_bound(dim);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |n: usize| -> Vec<S> {
        (0..n)
            .map(|_| S::from_f64(rng.gen_range(-bound..=bound)))
            .collect()
    };
    Ok(GmfParams {
        user_embeddings: draw(num_users * dim),
        item_embeddings: draw(num_items * dim),
        output_weights: vec![S::one(); dim],
        num_users,
        num_items,
        dim,
    })
}

/// `sqrt(6 / (fan_in + fan_out))` with both fans equal to the embedding dim.
pub fn xavier_bound(dim: usize) -> f64 {
    (6.0 / (2 * dim) as f64).sqrt()
}

/// `f(z_u, z_i) = sum_k h[k] z_u[k] z_i[k]`.
pub fn score<S: Scalar>(params: &GmfParams<S>, u: usize, i: usize) -> Result<S, ModelError> {
    params.check_user(u)?;
    params.check_item(i)?;
    Ok(params.score_raw(u, i))
}

/// `-log sigmoid(x)` computed as `softplus(-x)`, stable for large `|x|`.
pub fn log_sigmoid_loss<S: Scalar>(delta: S) -> S {
    let x = -delta;
    let zero = S::zero();
    // softplus(x) = max(x, 0) + ln(1 + exp(-|x|))
    let m = if x > zero { x } else { zero };
    m + (-x.abs()).exp().ln_1p()
}

fn sigmoid<S: Scalar>(x: S) -> S {
    let one = S::one();
    if x >= S::zero() {
        one / (one + (-x).exp())
    } else {
        let e = x.exp();
        e / (one + e)
    }
}

/// Pairwise ranking loss `-log sigmoid(f(u,i) - f(u,j))` for a positive `i`
/// and an unobserved `j`.
pub fn bpr_loss<S: Scalar>(
    params: &GmfParams<S>,
    u: usize,
    i: usize,
    j: usize,
) -> Result<S, ModelError> {
    params.check_user(u)?;
    params.check_item(i)?;
    params.check_item(j)?;
    Ok(log_sigmoid_loss(
        params.score_raw(u, i) - params.score_raw(u, j),
    ))
}

/// Reversal loss term `-log sigmoid(f(u,i) - alpha_t * w * f(u,n))` for a
/// clean positive `i` and a flagged positive `n` of the same user. `alpha_t`
/// ramps over the unlearning phase and `w` grades how suspicious `n` is.
pub fn eraser_term<S: Scalar>(
    params: &GmfParams<S>,
    u: usize,
    i: usize,
    n: usize,
    alpha_t: f64,
    w: f64,
) -> Result<S, ModelError> {
    if !(0.0..=1.0).contains(&alpha_t) {
        return Err(ModelError::InvalidArgument(format!(
            "alpha_t {alpha_t} outside [0, 1]"
        )));
    }
    if !(0.0..=1.0).contains(&w) {
        return Err(ModelError::InvalidArgument(format!(
            "reversal weight {w} outside [0, 1]"
        )));
    }
    params.check_user(u)?;
    params.check_item(i)?;
    params.check_item(n)?;
    let scale = S::from_f64(alpha_t * w);
    Ok(log_sigmoid_loss(
        params.score_raw(u, i) - scale * params.score_raw(u, n),
    ))
}

/// Dense gradient buffer matching a [`GmfParams`] shape. Untouched rows stay
/// zero.
#[derive(Debug, Clone)]
pub struct Gradients<S: Scalar> {
    pub user: Vec<S>,
    pub item: Vec<S>,
    pub output: Vec<S>,
    dim: usize,
}

impl<S: Scalar> Gradients<S> {
    pub fn zeros_like(params: &GmfParams<S>) -> Gradients<S> {
        Gradients {
            user: vec![S::zero(); params.num_users * params.dim],
            item: vec![S::zero(); params.num_items * params.dim],
            output: vec![S::zero(); params.dim],
            dim: params.dim,
        }
    }

    pub fn clear(&mut self) {
        self.user.iter_mut().for_each(|v| *v = S::zero());
        self.item.iter_mut().for_each(|v| *v = S::zero());
        self.output.iter_mut().for_each(|v| *v = S::zero());
    }

    pub fn scale(&mut self, factor: S) {
        self.user.iter_mut().for_each(|v| *v *= factor);
        self.item.iter_mut().for_each(|v| *v *= factor);
        self.output.iter_mut().for_each(|v| *v *= factor);
    }

    pub fn user_row(&self, u: usize) -> &[S] {
        &self.user[u * self.dim..(u + 1) * self.dim]
    }

    pub fn item_row(&self, i: usize) -> &[S] {
        &self.item[i * self.dim..(i + 1) * self.dim]
    }

    pub fn is_finite(&self) -> bool {
        self.user.iter().all(|v| v.is_finite())
            && self.item.iter().all(|v| v.is_finite())
            && self.output.iter().all(|v| v.is_finite())
    }
}

/// Accumulates `d/dparams [ coeff * f(u, x) ]` into the buffer.
fn accumulate_score_grad<S: Scalar>(
    params: &GmfParams<S>,
    grad: &mut Gradients<S>,
    u: usize,
    x: usize,
    coeff: S,
) {
    let dim = params.dim;
    let zu = &params.user_embeddings[u * dim..(u + 1) * dim];
    let zx = &params.item_embeddings[x * dim..(x + 1) * dim];
    let h = &params.output_weights;
    let gu = &mut grad.user[u * dim..(u + 1) * dim];
    for k in 0..dim {
        gu[k] += coeff * h[k] * zx[k];
    }
    let gx = &mut grad.item[x * dim..(x + 1) * dim];
    for k in 0..dim {
        gx[k] += coeff * h[k] * zu[k];
    }
    for k in 0..dim {
        grad.output[k] += coeff * zu[k] * zx[k];
    }
}

/// Accumulates the gradient of one ranking triple,
/// `weight * -log sigmoid(f(u,i) - scale * f(u,x))`, into `grad`.
/// `scale = 1` gives the plain pairwise loss; `scale = alpha_t * w` gives the
/// reversal term.
pub fn accumulate_pair_grad<S: Scalar>(
    params: &GmfParams<S>,
    grad: &mut Gradients<S>,
    u: usize,
    i: usize,
    x: usize,
    scale: S,
    weight: S,
) {
    let delta = params.score_raw(u, i) - scale * params.score_raw(u, x);
    // d/d_delta of softplus(-delta) = -(1 - sigmoid(delta))
    let slope = S::one() - sigmoid(delta);
    accumulate_score_grad(params, grad, u, i, -weight * slope);
    accumulate_score_grad(params, grad, u, x, weight * slope * scale);
}

/// Analytic gradient of `L_rec + alpha * L_eraser` for a single clean triple
/// `(u, i, j)` and an optional eraser triple `(u, i', n)`.
pub fn grad_combined<S: Scalar>(
    params: &GmfParams<S>,
    clean: (usize, usize, usize),
    eraser: Option<(usize, usize, usize)>,
    alpha: f64,
    alpha_t: f64,
    w: f64,
) -> Result<Gradients<S>, ModelError> {
    if alpha < 0.0 {
        return Err(ModelError::InvalidArgument(format!(
            "alpha {alpha} must be >= 0"
        )));
    }
    if !(0.0..=1.0).contains(&alpha_t) || !(0.0..=1.0).contains(&w) {
        return Err(ModelError::InvalidArgument(
            "alpha_t and w must lie in [0, 1]".to_string(),
        ));
    }
    let mut grad = Gradients::zeros_like(params);
    let (u, i, j) = clean;
    params.check_user(u)?;
    params.check_item(i)?;
    params.check_item(j)?;
    accumulate_pair_grad(params, &mut grad, u, i, j, S::one(), S::one());
    if let Some((eu, ei, en)) = eraser {
        params.check_user(eu)?;
        params.check_item(ei)?;
        params.check_item(en)?;
        accumulate_pair_grad(
            params,
            &mut grad,
            eu,
            ei,
            en,
            S::from_f64(alpha_t * w),
            S::from_f64(alpha),
        );
    }
    Ok(grad)
}

/// Adam accumulators, one slot per parameter.
#[derive(Debug, Clone)]
pub struct AdamState<S: Scalar> {
    m_user: Vec<S>,
    v_user: Vec<S>,
    m_item: Vec<S>,
    v_item: Vec<S>,
    m_output: Vec<S>,
    v_output: Vec<S>,
    pub step: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl<S: Scalar> AdamState<S> {
    /// Fresh state with the canonical constants (beta1 0.9, beta2 0.999,
    /// epsilon 1e-8).
    pub fn new(params: &GmfParams<S>, learning_rate: f64) -> AdamState<S> {
        AdamState {
            m_user: vec![S::zero(); params.num_users * params.dim],
            v_user: vec![S::zero(); params.num_users * params.dim],
            m_item: vec![S::zero(); params.num_items * params.dim],
            v_item: vec![S::zero(); params.num_items * params.dim],
            m_output: vec![S::zero(); params.dim],
            v_output: vec![S::zero(); params.dim],
            step: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One Adam update with bias correction. The gradient must be finite and
/// shape-compatible with the parameters.
pub fn adam_step<S: Scalar>(
    params: &mut GmfParams<S>,
    state: &mut AdamState<S>,
    grad: &Gradients<S>,
) -> Result<(), ModelError> {
    if grad.user.len() != params.user_embeddings.len()
        || grad.item.len() != params.item_embeddings.len()
        || grad.output.len() != params.output_weights.len()
    {
        return Err(ModelError::InvalidArgument(
            "gradient shape does not match parameters".to_string(),
        ));
    }
    if !grad.is_finite() {
        return Err(ModelError::NonFinite("gradient"));
    }

    state.step += 1;
    let t = state.step as i32;
    let beta1 = S::from_f64(state.beta1);
    let beta2 = S::from_f64(state.beta2);
    let one = S::one();
    let correction1 = one - beta1.powi(t);
    let correction2 = one - beta2.powi(t);
    let lr = S::from_f64(state.learning_rate);
    let eps = S::from_f64(state.epsilon);

    let update = |theta: &mut [S], m: &mut [S], v: &mut [S], g: &[S]| {
        for k in 0..theta.len() {
            m[k] = beta1 * m[k] + (one - beta1) * g[k];
            v[k] = beta2 * v[k] + (one - beta2) * g[k] * g[k];
            let m_hat = m[k] / correction1;
            let v_hat = v[k] / correction2;
            theta[k] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    };
    update(
        &mut params.user_embeddings,
        &mut state.m_user,
        &mut state.v_user,
        &grad.user,
    );
    update(
        &mut params.item_embeddings,
        &mut state.m_item,
        &mut state.v_item,
        &grad.item,
    );
    update(
        &mut params.output_weights,
        &mut state.m_output,
        &mut state.v_output,
        &grad.output,
    );
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct ParamsDump {
    version: u32,
    dim: usize,
    num_users: usize,
    num_items: usize,
    seed: Option<u64>,
    user_embeddings: Vec<f64>,
    item_embeddings: Vec<f64>,
    output_weights: Vec<f64>,
}

const PARAMS_DUMP_VERSION: u32 = 1;

/// Persists parameters as a JSON dump with a dims/seed/version header.
pub fn save_params<S: Scalar>(
    params: &GmfParams<S>,
    path: impl AsRef<Path>,
    seed: Option<u64>,
) -> Result<(), ModelError> {
    let path = path.as_ref();
    let dump = ParamsDump {
        version: PARAMS_DUMP_VERSION,
        dim: params.dim,
        num_users: params.num_users,
        num_items: params.num_items,
        seed,
        user_embeddings: params.user_embeddings.iter().map(|v| v.as_f64()).collect(),
        item_embeddings: params.item_embeddings.iter().map(|v| v.as_f64()).collect(),
        output_weights: params.output_weights.iter().map(|v| v.as_f64()).collect(),
    };
    let text = serde_json::to_string(&dump).expect("params serialize");
    fs::write(path, text).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Loads a dump written by [`save_params`].
pub fn load_params<S: Scalar>(path: impl AsRef<Path>) -> Result<GmfParams<S>, ModelError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let corrupt = |message: String| ModelError::Corrupt {
        path: path.display().to_string(),
        message,
    };
    let dump: ParamsDump = serde_json::from_str(&text).map_err(|e| corrupt(e.to_string()))?;
    if dump.version != PARAMS_DUMP_VERSION {
        return Err(corrupt(format!("unsupported version {}", dump.version)));
    }
    if dump.user_embeddings.len() != dump.num_users * dump.dim
        || dump.item_embeddings.len() != dump.num_items * dump.dim
        || dump.output_weights.len() != dump.dim
    {
        return Err(corrupt("matrix sizes disagree with header".to_string()));
    }
    Ok(GmfParams {
        user_embeddings: dump.user_embeddings.into_iter().map(S::from_f64).collect(),
        item_embeddings: dump.item_embeddings.into_iter().map(S::from_f64).collect(),
        output_weights: dump.output_weights.into_iter().map(S::from_f64).collect(),
        num_users: dump.num_users,
        num_items: dump.num_items,
        dim: dump.dim,
    })
}

/// Test/fixture helper: parameters with explicit contents.
pub fn params_from_rows<S: Scalar>(
    user_rows: Vec<Vec<S>>,
    item_rows: Vec<Vec<S>>,
    output_weights: Vec<S>,
) -> GmfParams<S> {
    let dim = output_weights.len();
    assert!(user_rows.iter().all(|r| r.len() == dim));
    assert!(item_rows.iter().all(|r| r.len() == dim));
    GmfParams {
        num_users: user_rows.len(),
        num_items: item_rows.len(),
        user_embeddings: user_rows.into_iter().flatten().collect(),
        item_embeddings: item_rows.into_iter().flatten().collect(),
        output_weights,
        dim,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    const LN_2: f64 = std::f64::consts::LN_2;

    #[test]
    fn xavier_bound_at_dim_64() {
        assert_abs_diff_eq!(xavier_bound(64), 0.21650635094610965, epsilon = 1e-12);
    }

    #[test]
    fn init_respects_bound_and_units() {
        let params: GmfParams<f64> = init_params(5, 7, 64, 3).unwrap();
        let b = xavier_bound(64);
        for u in 0..5 {
            assert!(params.user_row(u).iter().all(|v| v.abs() <= b));
        }
        for i in 0..7 {
            assert!(params.item_row(i).iter().all(|v| v.abs() <= b));
        }
        assert!(params.output_weights().iter().all(|&h| h == 1.0));
    }

    #[test]
    fn init_is_deterministic() {
        let a: GmfParams<f64> = init_params(3, 4, 8, 11).unwrap();
        let b: GmfParams<f64> = init_params(3, 4, 8, 11).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn init_rejects_zero_dim() {
        assert!(init_params::<f64>(1, 1, 0, 0).is_err());
    }

    #[test]
    fn score_hand_values() {
        let params = params_from_rows(
            vec![vec![1.0, 0.0], vec![1.0, 2.0]],
            vec![vec![1.0, 0.0], vec![3.0, 4.0], vec![0.0, 0.0]],
            vec![1.0, 1.0],
        );
        assert_eq!(score(&params, 0, 0).unwrap(), 1.0);
        assert_eq!(score(&params, 1, 1).unwrap(), 11.0);
        assert_eq!(score(&params, 1, 2).unwrap(), 0.0);
    }

    #[test]
    fn score_checks_bounds() {
        let params = params_from_rows::<f64>(vec![vec![1.0]], vec![vec![1.0]], vec![1.0]);
        assert!(matches!(
            score(&params, 1, 0),
            Err(ModelError::IndexOutOfRange { kind: "user", .. })
        ));
        assert!(matches!(
            score(&params, 0, 5),
            Err(ModelError::IndexOutOfRange { kind: "item", .. })
        ));
    }

    #[test]
    fn score_is_bilinear() {
        let h = vec![0.5, -1.0, 2.0];
        let zu = vec![0.3, 0.7, -0.2];
        let zi = vec![1.0, 0.4, 0.9];
        let scaled_u: Vec<f64> = zu.iter().map(|v| v * 3.0).collect();
        let base = params_from_rows(vec![zu.clone()], vec![zi.clone()], h.clone());
        let scaled = params_from_rows(vec![scaled_u], vec![zi], h);
        assert_abs_diff_eq!(
            score(&scaled, 0, 0).unwrap(),
            3.0 * score(&base, 0, 0).unwrap(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn bpr_loss_closed_forms() {
        // Two items with equal scores, one with score difference 1.
        let params = params_from_rows(
            vec![vec![1.0, 0.0]],
            vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 0.0]],
            vec![1.0, 1.0],
        );
        assert_abs_diff_eq!(bpr_loss(&params, 0, 0, 1).unwrap(), LN_2, epsilon = 1e-12);
        assert_abs_diff_eq!(
            bpr_loss(&params, 0, 0, 2).unwrap(),
            (1.0 + (-1.0f64).exp()).ln(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn bpr_loss_decreases_with_margin_and_stays_positive() {
        let mut prev = f64::INFINITY;
        for d in [-30.0, -5.0, 0.0, 1.0, 10.0, 40.0, 500.0] {
            let loss = log_sigmoid_loss(d);
            assert!(loss >= 0.0);
            assert!(loss < prev, "loss must strictly decrease in the margin");
            assert!(loss.is_finite());
            prev = loss;
        }
    }

    #[test]
    fn eraser_term_reductions() {
        let params = params_from_rows(
            vec![vec![1.0, 0.0]],
            vec![vec![1.0, 0.0], vec![1.0, 0.0]],
            vec![1.0, 1.0],
        );
        // f(u, 0) = f(u, 1) = 1.
        let base = log_sigmoid_loss(1.0f64);
        assert_abs_diff_eq!(
            eraser_term(&params, 0, 0, 1, 0.0, 1.0).unwrap(),
            base,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            eraser_term(&params, 0, 0, 1, 1.0, 0.0).unwrap(),
            base,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            eraser_term(&params, 0, 0, 1, 1.0, 1.0).unwrap(),
            LN_2,
            epsilon = 1e-12
        );
    }

    #[test]
    fn eraser_term_with_full_scale_equals_bpr() {
        let params: GmfParams<f64> = init_params(2, 5, 4, 9).unwrap();
        for (i, n) in [(0usize, 1usize), (2, 3), (4, 0)] {
            assert_abs_diff_eq!(
                eraser_term(&params, 1, i, n, 1.0, 1.0).unwrap(),
                bpr_loss(&params, 1, i, n).unwrap(),
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn eraser_term_validates_ranges() {
        let params =
            params_from_rows::<f64>(vec![vec![1.0]], vec![vec![1.0], vec![1.0]], vec![1.0]);
        assert!(eraser_term(&params, 0, 0, 1, 1.5, 0.5).is_err());
        assert!(eraser_term(&params, 0, 0, 1, 0.5, -0.1).is_err());
    }

    /// Total loss matching `grad_combined`, used by the finite-difference
    /// check below.
    fn combined_loss(
        params: &GmfParams<f64>,
        clean: (usize, usize, usize),
        eraser: Option<(usize, usize, usize)>,
        alpha: f64,
        alpha_t: f64,
        w: f64,
    ) -> f64 {
        let (u, i, j) = clean;
        let mut total = bpr_loss(params, u, i, j).unwrap();
        if let Some((eu, ei, en)) = eraser {
            total += alpha * eraser_term(params, eu, ei, en, alpha_t, w).unwrap();
        }
        total
    }

    fn central_difference(
        params: &GmfParams<f64>,
        clean: (usize, usize, usize),
        eraser: Option<(usize, usize, usize)>,
        alpha: f64,
        alpha_t: f64,
        w: f64,
    ) -> Gradients<f64> {
        let h = 1e-5;
        let mut fd = Gradients::zeros_like(params);
        let probe = |write: &dyn Fn(&mut GmfParams<f64>, f64)| -> f64 {
            let mut plus = params.clone();
            write(&mut plus, h);
            let mut minus = params.clone();
            write(&mut minus, -h);
            (combined_loss(&plus, clean, eraser, alpha, alpha_t, w)
                - combined_loss(&minus, clean, eraser, alpha, alpha_t, w))
                / (2.0 * h)
        };
        for u in 0..params.num_users() {
            for k in 0..params.dim() {
                fd.user[u * params.dim() + k] =
                    probe(&|p: &mut GmfParams<f64>, eps: f64| p.user_row_mut(u)[k] += eps);
            }
        }
        for i in 0..params.num_items() {
            for k in 0..params.dim() {
                fd.item[i * params.dim() + k] =
                    probe(&|p: &mut GmfParams<f64>, eps: f64| p.item_row_mut(i)[k] += eps);
            }
        }
        for k in 0..params.dim() {
            fd.output[k] =
                probe(&|p: &mut GmfParams<f64>, eps: f64| p.output_weights_mut()[k] += eps);
        }
        fd
    }

    fn assert_close(analytic: &[f64], numeric: &[f64], tol: f64) {
        for (a, n) in analytic.iter().zip(numeric) {
            let scale = 1.0f64.max(a.abs()).max(n.abs());
            assert!(
                (a - n).abs() / scale <= tol,
                "gradient mismatch: analytic {a} vs numeric {n}"
            );
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        for case in 0..100 {
            let num_users = rng.gen_range(1..=3);
            let num_items = rng.gen_range(3..=6);
            let dim = rng.gen_range(1..=8);
            let params: GmfParams<f64> = init_params(num_users, num_items, dim, rng.gen()).unwrap();
            let u = rng.gen_range(0..num_users);
            let i = rng.gen_range(0..num_items);
            let j = rng.gen_range(0..num_items);
            let with_eraser = case % 2 == 0;
            let eraser = with_eraser.then(|| {
                (
                    rng.gen_range(0..num_users),
                    rng.gen_range(0..num_items),
                    rng.gen_range(0..num_items),
                )
            });
            let alpha = rng.gen_range(0.0..2.0);
            let alpha_t = rng.gen_range(0.0..=1.0);
            let w = rng.gen_range(0.0..=1.0);

            let analytic = grad_combined(&params, (u, i, j), eraser, alpha, alpha_t, w).unwrap();
            let numeric = central_difference(&params, (u, i, j), eraser, alpha, alpha_t, w);
            assert_close(&analytic.user, &numeric.user, 1e-4);
            assert_close(&analytic.item, &numeric.item, 1e-4);
            assert_close(&analytic.output, &numeric.output, 1e-4);
        }
    }

    #[test]
    fn gradient_with_alpha_zero_is_pure_bpr() {
        let params: GmfParams<f64> = init_params(2, 4, 4, 5).unwrap();
        let with = grad_combined(&params, (0, 1, 2), Some((0, 1, 3)), 0.0, 0.5, 0.7).unwrap();
        let without = grad_combined(&params, (0, 1, 2), None, 0.0, 0.5, 0.7).unwrap();
        assert_eq!(with.user, without.user);
        assert_eq!(with.item, without.item);
        assert_eq!(with.output, without.output);
    }

    #[test]
    fn eraser_gradient_pushes_noisy_score_down() {
        // d L_eraser / d f(u,n) = alpha_t * w * (1 - sigmoid(delta)) >= 0,
        // so the update (negative gradient direction on z_n) lowers f(u,n).
        let params: GmfParams<f64> = init_params(1, 3, 4, 21).unwrap();
        let (alpha_t, w) = (0.8, 0.9);
        let grad = grad_combined(&params, (0, 0, 1), Some((0, 0, 2)), 1.0, alpha_t, w).unwrap();
        // Direction of f(u,n) growth is h[k] * z_u[k]; the inner product of
        // the gradient with it must be alpha * alpha_t * w * (1 - sigma) >= 0.
        let mut along_score = 0.0;
        for k in 0..params.dim() {
            along_score += grad.item_row(2)[k] * params.output_weights()[k] * params.user_row(0)[k];
        }
        assert!(along_score >= 0.0);
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut params: GmfParams<f64> = init_params(2, 2, 4, 8).unwrap();
        let snapshot = params.clone();
        let mut state = AdamState::new(&params, 0.001);
        let grad = Gradients::zeros_like(&params);
        adam_step(&mut params, &mut state, &grad).unwrap();
        assert_eq!(params, snapshot);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut params = params_from_rows::<f64>(vec![vec![0.5]], vec![vec![0.5]], vec![1.0]);
        let mut state = AdamState::new(&params, 0.001);
        let mut grad = Gradients::zeros_like(&params);
        grad.user[0] = 3.0;
        grad.item[0] = -2.0;
        adam_step(&mut params, &mut state, &grad).unwrap();
        // First bias-corrected step is lr * g / (|g| + eps) ~ lr * sign(g).
        assert_abs_diff_eq!(params.user_row(0)[0], 0.5 - 0.001, epsilon = 1e-9);
        assert_abs_diff_eq!(params.item_row(0)[0], 0.5 + 0.001, epsilon = 1e-9);
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut params: GmfParams<f64> = init_params(2, 3, 4, 13).unwrap();
            let mut state = AdamState::new(&params, 0.01);
            for step in 0..5 {
                let grad =
                    grad_combined(&params, (0, step % 3, (step + 1) % 3), None, 0.0, 0.0, 0.0)
                        .unwrap();
                adam_step(&mut params, &mut state, &grad).unwrap();
            }
            params
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let mut params: GmfParams<f64> = init_params(1, 1, 2, 0).unwrap();
        let mut state = AdamState::new(&params, 0.001);
        let mut grad = Gradients::zeros_like(&params);
        grad.user[0] = f64::NAN;
        assert!(matches!(
            adam_step(&mut params, &mut state, &grad),
            Err(ModelError::NonFinite(_))
        ));
    }

    #[test]
    fn params_round_trip_through_dump() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("params.json");
        let params: GmfParams<f64> = init_params(3, 4, 6, 99).unwrap();
        save_params(&params, &path, Some(99)).unwrap();
        let loaded: GmfParams<f64> = load_params(&path).unwrap();
        assert_eq!(params, loaded);
    }
}
