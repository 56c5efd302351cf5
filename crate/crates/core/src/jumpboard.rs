//! Jumpboard construction: a zero-output block stepped along the first-order
//! descent direction `-C`, where `C` is the mean outer product of activation
//! gradients and block features at the insertion layer.

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{stream_rng, Dataset};
use crate::error::{Error, Result};
use crate::netmodel::{
    evaluate_loss, record_forward, record_loss, NetworkSpec, NetworkState, EVAL_CHUNK,
};
use crate::tape::Tape;
use crate::tensor::{self, Tensor};

/// Below this Frobenius norm the direction is treated as absent.
pub const DESCENT_TOLERANCE: f64 = 1e-10;

/// Activation-gradient summaries at the insertion layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientStats {
    pub mu: Vec<f64>,
    pub g: Vec<f64>,
    /// `M x N` train gradients, one row per sample.
    pub per_sample_grads: Option<Tensor>,
    /// Per-coordinate train variances, denominator `M - 1`.
    pub sigma_diag: Vec<f64>,
    /// Sampled off-diagonal train covariance entries.
    pub offdiag_samples: Vec<f64>,
    pub mu_norm_sq: f64,
    pub g_norm_sq: f64,
    pub mu_dot_g: f64,
}

/// Insertion-layer activations `z_i = f_bot(x_i)` and per-sample gradients
/// `q_i = grad_z loss(f_top(z_i), y_i)`, both `n x N`, in dataset order.
pub fn activation_gradients(
    spec: &NetworkSpec,
    state: &NetworkState,
    data: &Dataset,
) -> Result<(Tensor, Tensor)> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut zs = Vec::new();
    let mut qs = Vec::new();
    let mut start = 0;
    while start < data.len() {
        let end = (start + EVAL_CHUNK).min(data.len());
        let chunk = data.slice(start, end)?;
        let mut tape = Tape::new();
        let g = record_forward(&mut tape, spec, state, &chunk.x)?;
        let loss = record_loss(&mut tape, spec, g.logits, &chunk.targets)?;
        tape.backward(loss, Tensor::scalar(1.0))?;
        // The summed loss makes row i of the gradient sample i's own gradient.
        zs.push(tape.value(g.insertion).clone());
        qs.push(tape.grad_at(g.insertion)?);
        start = end;
    }
    Ok((Tensor::vstack(&zs)?, Tensor::vstack(&qs)?))
}

/// Unbiased per-column variances (denominator `n - 1`, or 1 when `n = 1`).
pub fn column_variances(q: &Tensor) -> Vec<f64> {
    let mean = q.column_means();
    let denom = (q.rows().max(2) - 1) as f64;
    (0..q.cols())
        .map(|j| {
            (0..q.rows())
                .map(|r| {
                    let d = q.get(r, j) - mean[j];
                    d * d
                })
                .sum::<f64>()
                / denom
        })
        .collect()
}

/// Unbiased covariance of columns `j` and `k`.
pub fn column_covariance(q: &Tensor, mean: &[f64], j: usize, k: usize) -> f64 {
    let denom = (q.rows().max(2) - 1) as f64;
    (0..q.rows()).map(|r| (q.get(r, j) - mean[j]) * (q.get(r, k) - mean[k])).sum::<f64>() / denom
}

/// Decodes a linear index into the `i < j` pair it names, pairs ordered
/// row by row over the strict upper triangle of an `n x n` matrix.
pub fn pair_from_index(n: usize, idx: usize) -> (usize, usize) {
    let offset = |i: usize| i * (2 * n - i - 1) / 2;
    let (mut lo, mut hi) = (0, n - 1);
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if offset(mid) <= idx {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let i = if offset(hi) <= idx { hi } else { lo };
    (i, i + 1 + idx - offset(i))
}

/// Up to `count` distinct coordinate pairs drawn uniformly without
/// replacement (all pairs when `count` covers them), in sorted order.
pub fn sample_pairs<R: Rng + ?Sized>(n: usize, count: usize, rng: &mut R) -> Vec<(usize, usize)> {
    let total = n * n.saturating_sub(1) / 2;
    let chosen: Vec<usize> = if count >= total {
        (0..total).collect()
    } else {
        // Floyd's algorithm.
        let mut set = alloc::collections::BTreeSet::new();
        for j in (total - count)..total {
            let t = rng.random_range(0..=j);
            if !set.insert(t) {
                set.insert(j);
            }
        }
        set.into_iter().collect()
    };
    chosen.into_iter().map(|i| pair_from_index(n, i)).collect()
}

/// Train/test activation-gradient means and train covariance summaries.
pub fn collect_gradient_stats(
    spec: &NetworkSpec,
    state: &NetworkState,
    train: &Dataset,
    test: &Dataset,
    offdiag_pairs: usize,
    seed: u64,
) -> Result<GradientStats> {
    let (_, q_train) = activation_gradients(spec, state, train)?;
    let (_, q_test) = activation_gradients(spec, state, test)?;
    Ok(stats_from_gradients(q_train, &q_test, offdiag_pairs, seed))
}

pub fn stats_from_gradients(
    q_train: Tensor,
    q_test: &Tensor,
    offdiag_pairs: usize,
    seed: u64,
) -> GradientStats {
    let mu = q_train.column_means();
    let g = q_test.column_means();
    let sigma_diag = column_variances(&q_train);
    let mut rng = stream_rng(seed, 0xc0);
    let offdiag_samples = sample_pairs(q_train.cols(), offdiag_pairs, &mut rng)
        .into_iter()
        .map(|(j, k)| column_covariance(&q_train, &mu, j, k))
        .collect();
    GradientStats {
        mu_norm_sq: tensor::dot(&mu, &mu),
        g_norm_sq: tensor::dot(&g, &g),
        mu_dot_g: tensor::dot(&mu, &g),
        mu,
        g,
        per_sample_grads: Some(q_train),
        sigma_diag,
        offdiag_samples,
    }
}

/// The block-output descent direction `delta_v = -c`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Direction {
    /// `C = (1/n) sum_i q_i psi_i^T`, `N x feature_dim`.
    pub c: Tensor,
    pub delta_v: Tensor,
    /// `|C|_F`.
    pub norm: f64,
}

impl Direction {
    /// First-order change of the mean loss along `delta_v`: `-|C|_F^2`.
    pub fn directional_derivative(&self) -> f64 {
        -self.norm * self.norm
    }
}

/// `C = (1/n) q^T psi` and `delta_v = -C` from per-sample gradients `q`
/// (`n x N`) and block features `psi` (`n x m`).
pub fn empirical_descent_direction(q: &Tensor, psi: &Tensor) -> Result<Direction> {
    if q.rows() == 0 {
        return Err(Error::EmptyDataset);
    }
    let c = q.t_matmul(psi)?.scale(1.0 / q.rows() as f64);
    let norm = c.frobenius_norm();
    if !(norm > DESCENT_TOLERANCE) {
        return Err(Error::NoDescentDirection { norm });
    }
    let delta_v = c.scale(-1.0);
    Ok(Direction { c, delta_v, norm })
}

/// Descent direction of the block carried by `state`, averaged over `data`.
pub fn block_direction(
    spec: &NetworkSpec,
    state: &NetworkState,
    data: &Dataset,
) -> Result<Direction> {
    let block = state
        .inserted
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig("state carries no inserted block".into()))?;
    let (z, q) = activation_gradients(spec, state, data)?;
    empirical_descent_direction(&q, &block.features(&z)?)
}

/// Population-proxy direction: the same estimator on an estimation split
/// disjoint from train and test.
pub fn population_descent_direction(
    spec: &NetworkSpec,
    state: &NetworkState,
    estimation: &Dataset,
) -> Result<Direction> {
    block_direction(spec, state, estimation)
}

/// Copy of `state` whose block output projection is `eta * delta_v`.
pub fn apply_step(state: &NetworkState, delta_v: &Tensor, eta: f64) -> Result<NetworkState> {
    let mut out = state.clone();
    let block = out
        .inserted
        .as_mut()
        .ok_or_else(|| Error::InvalidConfig("state carries no inserted block".into()))?;
    if !block.v.same_shape(delta_v) {
        return Err(Error::ShapeMismatch("direction does not match block output".into()));
    }
    block.v = delta_v.scale(eta);
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LineSearchConfig {
    pub eta0: f64,
    pub armijo: f64,
    pub max_halvings: usize,
}

impl Default for LineSearchConfig {
    fn default() -> Self {
        LineSearchConfig { eta0: 0.1, armijo: 1e-4, max_halvings: 60 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LineSearch {
    pub eta: f64,
    pub value: f64,
    /// No trial step decreased the objective; `eta` is 0.
    pub degenerate: bool,
    pub trials: usize,
}

/// Armijo backtracking on `objective(eta)` from `eta0`, halving on failure.
/// A step is accepted only if it also strictly decreases the objective.
pub fn backtracking<F>(f0: f64, slope: f64, cfg: &LineSearchConfig, mut objective: F) -> Result<LineSearch>
where
    F: FnMut(f64) -> Result<f64>,
{
    let mut eta = cfg.eta0;
    for trial in 1..=cfg.max_halvings + 1 {
        let v = objective(eta)?;
        if v < f0 && v <= f0 + cfg.armijo * eta * slope {
            return Ok(LineSearch { eta, value: v, degenerate: false, trials: trial });
        }
        eta *= 0.5;
    }
    Ok(LineSearch { eta: 0.0, value: f0, degenerate: true, trials: cfg.max_halvings + 1 })
}

/// Step size for the jumpboard along `dir` on the train loss.
pub fn line_search_eta(
    spec: &NetworkSpec,
    state: &NetworkState,
    dir: &Direction,
    train: &Dataset,
    cfg: &LineSearchConfig,
) -> Result<LineSearch> {
    let base = apply_step(state, &dir.delta_v, 0.0)?;
    let f0 = evaluate_loss(spec, &base, train)?;
    backtracking(f0, dir.directional_derivative(), cfg, |eta| {
        evaluate_loss(spec, &apply_step(state, &dir.delta_v, eta)?, train)
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Choice {
    Alg,
    Jump,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub choice: Choice,
    pub delta_erm: f64,
}

/// Train-loss argmin over the two candidates; ties keep the optimizer output.
pub fn select_by_loss(l_alg: f64, l_jump: f64) -> Selection {
    if l_alg <= l_jump {
        Selection { choice: Choice::Alg, delta_erm: l_jump - l_alg }
    } else {
        Selection { choice: Choice::Jump, delta_erm: 0.0 }
    }
}

/// Fallback selection between an optimizer output and the jumpboard model.
/// Without an optimizer output the jumpboard is selected.
pub fn select_final_model(
    spec: &NetworkSpec,
    f_alg: Option<&NetworkState>,
    f_jump: &NetworkState,
    train: &Dataset,
) -> Result<(NetworkState, Selection)> {
    let Some(alg) = f_alg else {
        return Ok((f_jump.clone(), Selection { choice: Choice::Jump, delta_erm: 0.0 }));
    };
    let sel = select_by_loss(evaluate_loss(spec, alg, train)?, evaluate_loss(spec, f_jump, train)?);
    Ok((if sel.choice == Choice::Alg { alg.clone() } else { f_jump.clone() }, sel))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginReport {
    pub delta_train_s: f64,
    pub delta_r_test: f64,
    pub delta_erm: f64,
    pub l_train_old: f64,
    pub l_train_jump: f64,
    pub l_train_new: f64,
    pub l_test_old: f64,
    pub l_test_jump: f64,
    pub l_test_new: f64,
}

impl MarginReport {
    pub fn from_losses(train: [f64; 3], test: [f64; 3]) -> Self {
        let [l_train_old, l_train_jump, l_train_new] = train;
        let [l_test_old, l_test_jump, l_test_new] = test;
        MarginReport {
            delta_train_s: l_train_old - l_train_jump,
            delta_r_test: l_test_old - l_test_jump,
            delta_erm: l_train_jump - l_train_new,
            l_train_old,
            l_train_jump,
            l_train_new,
            l_test_old,
            l_test_jump,
            l_test_new,
        }
    }

    pub fn entries(&self) -> [(&'static str, f64); 9] {
        [
            ("delta_train_s", self.delta_train_s),
            ("delta_r_test", self.delta_r_test),
            ("delta_erm", self.delta_erm),
            ("l_train_old", self.l_train_old),
            ("l_train_jump", self.l_train_jump),
            ("l_train_new", self.l_train_new),
            ("l_test_old", self.l_test_old),
            ("l_test_jump", self.l_test_jump),
            ("l_test_new", self.l_test_new),
        ]
    }

    /// Inverse of [`MarginReport::entries`]; the margins are recomputed.
    pub fn from_entries<'a>(mut get: impl FnMut(&'a str) -> Option<f64>) -> core::result::Result<Self, String> {
        let mut need = |k: &'a str| get(k).ok_or_else(|| alloc::format!("missing field {k}"));
        Ok(MarginReport::from_losses(
            [need("l_train_old")?, need("l_train_jump")?, need("l_train_new")?],
            [need("l_test_old")?, need("l_test_jump")?, need("l_test_new")?],
        ))
    }
}

/// Evaluates all six losses; margins follow from their definitions.
pub fn measure_margins(
    spec: &NetworkSpec,
    old: &NetworkState,
    jump: &NetworkState,
    new: &NetworkState,
    train: &Dataset,
    test: &Dataset,
) -> Result<MarginReport> {
    let ev = |s: &NetworkState, d: &Dataset| evaluate_loss(spec, s, d);
    Ok(MarginReport::from_losses(
        [ev(old, train)?, ev(jump, train)?, ev(new, train)?],
        [ev(old, test)?, ev(jump, test)?, ev(new, test)?],
    ))
}

/// Predicted test margin `eta mu^T g` of a small step.
pub fn first_order_test_margin(stats: &GradientStats, eta: f64) -> f64 {
    eta * stats.mu_dot_g
}

/// Predicted test margin of a step `eta * (-C_train)` for a general block:
/// `eta <C_train, C_test>`. With features reduced to the constant one this
/// is `eta mu^T g`.
pub fn first_order_block_margin(c_train: &Tensor, c_test: &Tensor, eta: f64) -> Result<f64> {
    Ok(eta * c_train.inner(c_test)?)
}
