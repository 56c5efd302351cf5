//! Plain mini-batch SGD with projection onto the norm caps after every step.

use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{stream_rng, Dataset};
use crate::error::{Error, Result};
use crate::netmodel::{
    evaluate_loss, project_norms, record_forward, record_loss, FrozenNormStats, NetworkSpec,
    NetworkState, NormKind,
};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Which parameters an SGD run updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainScope {
    /// Residual layers and top map.
    Base,
    /// Output projection `V` of the inserted block only.
    BlockOnly,
    /// Everything trainable, including the block's `V`.
    Joint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    /// Full-train-loss checkpoint interval; 0 picks `steps / 10`.
    #[serde(default)]
    pub eval_every: usize,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig { learning_rate: 0.05, steps: 500, batch_size: 64, eval_every: 0 }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidConfig("learning rate must be finite and >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub state: NetworkState,
    /// `(step, full train loss)` at every checkpoint, starting with step 0.
    pub loss_trace: Vec<(usize, f64)>,
    /// Step of the returned checkpoint.
    pub best_step: usize,
}

impl TrainOutcome {
    pub fn initial_loss(&self) -> f64 {
        self.loss_trace[0].1
    }

    pub fn final_loss(&self) -> f64 {
        self.loss_trace.iter().find(|(s, _)| *s == self.best_step).map_or(f64::NAN, |p| p.1)
    }
}

fn diverged(step: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite(_) => Error::DivergedTraining { step },
        other => other,
    }
}

/// Mean-loss gradient of every parameter in `scope` on one batch, in the
/// layout of `state`.
pub fn batch_gradient(
    spec: &NetworkSpec,
    state: &NetworkState,
    batch: &Dataset,
    scope: TrainScope,
) -> Result<(f64, NetworkState)> {
    let mut tape = Tape::new();
    let g = record_forward(&mut tape, spec, state, &batch.x)?;
    let loss = record_loss(&mut tape, spec, g.logits, &batch.targets)?;
    let n = batch.len() as f64;
    let value = tape.value(loss).data()[0] / n;
    tape.backward(loss, Tensor::scalar(1.0 / n))?;

    let mut grad = state.clone();
    let base = matches!(scope, TrainScope::Base | TrainScope::Joint);
    for (l, layer) in grad.layers.iter_mut().enumerate() {
        if base {
            layer.w1 = tape.grad_at(g.params.w1[l])?;
            layer.w2 = tape.grad_at(g.params.w2[l])?;
        } else {
            layer.w1 = Tensor::zeros(layer.w1.shape());
            layer.w2 = Tensor::zeros(layer.w2.shape());
        }
    }
    if base {
        grad.top.weight = tape.grad_at(g.params.top_w)?;
        grad.top.bias = tape.grad_at(g.params.top_b)?.into_data();
    } else {
        grad.top.weight = Tensor::zeros(grad.top.weight.shape());
        grad.top.bias.iter_mut().for_each(|b| *b = 0.0);
    }
    if let Some(block) = &mut grad.inserted {
        block.u = Tensor::zeros(block.u.shape());
        block.v = match (scope, g.params.block_v) {
            (TrainScope::BlockOnly | TrainScope::Joint, Some(v)) => tape.grad_at(v)?,
            _ => Tensor::zeros(block.v.shape()),
        };
    }
    Ok((value, grad))
}

/// `state - lr * grad` on the trainable tensors.
fn sgd_update(state: &mut NetworkState, grad: &NetworkState, lr: f64) -> Result<()> {
    for (p, g) in state.layers.iter_mut().zip(&grad.layers) {
        p.w1.axpy(-lr, &g.w1)?;
        p.w2.axpy(-lr, &g.w2)?;
    }
    state.top.weight.axpy(-lr, &grad.top.weight)?;
    for (b, g) in state.top.bias.iter_mut().zip(&grad.top.bias) {
        *b -= lr * g;
    }
    if let (Some(p), Some(g)) = (&mut state.inserted, &grad.inserted) {
        p.v.axpy(-lr, &g.v)?;
    }
    Ok(())
}

/// Runs SGD from `init` and returns the checkpoint with the lowest full
/// train loss (the initial state included), so the returned loss never
/// exceeds the starting loss.
pub fn sgd(
    spec: &NetworkSpec,
    init: &NetworkState,
    train: &Dataset,
    cfg: &SgdConfig,
    scope: TrainScope,
    seed: u64,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let eval_every = if cfg.eval_every == 0 { (cfg.steps / 10).max(1) } else { cfg.eval_every };
    let mut rng = stream_rng(seed, 0x5eed);
    let mut state = init.clone();
    let initial = evaluate_loss(spec, &state, train).map_err(diverged(0))?;
    let mut trace = alloc::vec![(0, initial)];
    let (mut best, mut best_step, mut best_loss) = (state.clone(), 0, initial);
    let n = train.len();
    let b = cfg.batch_size.min(n);

    for step in 1..=cfg.steps {
        let idx: Vec<usize> = (0..b).map(|_| rng.random_range(0..n)).collect();
        let batch = train.select(&idx)?;
        let (_, grad) = batch_gradient(spec, &state, &batch, scope).map_err(diverged(step))?;
        sgd_update(&mut state, &grad, cfg.learning_rate)?;
        state = project_norms(spec, &state);
        if step % eval_every == 0 || step == cfg.steps {
            let loss = evaluate_loss(spec, &state, train).map_err(diverged(step))?;
            trace.push((step, loss));
            if loss < best_loss {
                best = state.clone();
                best_step = step;
                best_loss = loss;
            }
        }
    }
    Ok(TrainOutcome { state: best, loss_trace: trace, best_step })
}

/// The seeded starting point of `train_base`.
pub fn initial_state(spec: &NetworkSpec, seed: u64) -> Result<NetworkState> {
    NetworkState::init(spec, &mut stream_rng(seed, 0x1417))
}

/// Initializes a network, calibrates frozen BatchNorm statistics if needed,
/// and trains every base parameter.
pub fn train_base(
    spec: &NetworkSpec,
    train: &Dataset,
    cfg: &SgdConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    train_from(spec, &initial_state(spec, seed)?, train, cfg, seed)
}

/// `train_base` from a caller-supplied starting state.
pub fn train_from(
    spec: &NetworkSpec,
    init: &NetworkState,
    train: &Dataset,
    cfg: &SgdConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    let init = calibrate_batchnorm(spec, init, train)?;
    sgd(spec, &init, train, cfg, TrainScope::Base, seed)
}

/// Sets each layer's frozen statistics to the mean and (population)
/// variance of its pre-normalization input over `data`, layer by layer.
pub fn calibrate_batchnorm(
    spec: &NetworkSpec,
    state: &NetworkState,
    data: &Dataset,
) -> Result<NetworkState> {
    if spec.norm_kind != NormKind::FixedBatchnorm {
        return Ok(state.clone());
    }
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut out = state.clone();
    let nw = spec.width;
    // Propagate the whole dataset one layer at a time so layer l's
    // statistics are taken under the already-calibrated layers below it.
    let mut z = data.x.matmul_t(&out.embedding)?;
    for l in 0..spec.depth {
        if l == spec.insertion_layer {
            if let Some(block) = &out.inserted {
                let h = block.features(&z)?.matmul_t(&block.v)?;
                z = z.add(&h)?;
            }
        }
        let layer = &out.layers[l];
        let pre = z.matmul_t(&layer.w1)?.map(|v| if v > 0.0 { v } else { 0.0 });
        let sum = z.add(&pre.matmul_t(&layer.w2)?)?;
        let mean = sum.column_means();
        let rows = sum.rows() as f64;
        let var: Vec<f64> = (0..nw)
            .map(|j| (0..sum.rows()).map(|r| {
                let d = sum.get(r, j) - mean[j];
                d * d
            })
            .sum::<f64>()
                / rows)
            .collect();
        let beta = out.layers[l].norm_stats.as_ref().map_or(alloc::vec![0.0; nw], |s| s.beta.clone());
        out.layers[l].norm_stats = Some(FrozenNormStats { mean, var, beta });
        let norm = out.norm_map(spec, l);
        let mut next = Vec::with_capacity(sum.len());
        for r in 0..sum.rows() {
            next.extend(norm.apply(sum.row(r)));
        }
        z = Tensor::matrix(sum.rows(), nw, next)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SyntheticTask;

    fn small_task() -> (NetworkSpec, Dataset) {
        let mut t = SyntheticTask::default_mixture(1);
        t.m_train = 128;
        t.k_test = 16;
        t.m_proxy = 16;
        t.m_estimation = 16;
        let spec = t.network_spec(2, 8).unwrap();
        (spec, t.generate().unwrap().train)
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let (spec, train) = small_task();
        let mut rng = stream_rng(0, 0);
        let init = NetworkState::init(&spec, &mut rng).unwrap();
        let cfg = SgdConfig { learning_rate: 0.0, steps: 5, batch_size: 16, eval_every: 1 };
        let out = sgd(&spec, &init, &train, &cfg, TrainScope::Base, 3).unwrap();
        assert_eq!(out.state, init);
    }

    #[test]
    fn training_decreases_loss_and_is_deterministic() {
        let (spec, train) = small_task();
        let cfg = SgdConfig { learning_rate: 0.1, steps: 100, batch_size: 32, eval_every: 20 };
        let a = train_base(&spec, &train, &cfg, 9).unwrap();
        let b = train_base(&spec, &train, &cfg, 9).unwrap();
        assert_eq!(a.state, b.state);
        assert!(a.final_loss() < a.initial_loss());
    }
}
