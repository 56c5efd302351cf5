use alloc::vec::Vec;

use super::{LossKind, NetworkSpec, NetworkState};
use crate::data::{Dataset, Targets};
use crate::error::{Error, Result};
use crate::math;
use crate::tape::{NodeId, Tape};
use crate::tensor::{self, Tensor};

/// Rows per forward pass when evaluating whole datasets.
pub const EVAL_CHUNK: usize = 1024;

#[derive(Clone, Debug)]
pub struct ParamNodes {
    pub w1: Vec<NodeId>,
    pub w2: Vec<NodeId>,
    pub top_w: NodeId,
    pub top_b: NodeId,
    pub block_u: Option<NodeId>,
    pub block_v: Option<NodeId>,
}

/// Node handles of one recorded forward pass.
#[derive(Clone, Debug)]
pub struct ForwardGraph {
    pub input: NodeId,
    /// Post-normalization states `z_0 .. z_L` (`z_0` is the embedded input).
    pub hidden: Vec<NodeId>,
    /// `x^(l*) = f_bot(x)`.
    pub insertion: NodeId,
    /// `x^(l*) + h(x^(l*))`; equal to `insertion` when no block is present.
    pub block_out: NodeId,
    pub logits: NodeId,
    pub params: ParamNodes,
}

fn check_inputs(spec: &NetworkSpec, x: &Tensor) -> Result<()> {
    if x.cols() != spec.input_dim {
        return Err(Error::ShapeMismatch(alloc::format!(
            "input has {} columns, network expects {}",
            x.cols(),
            spec.input_dim
        )));
    }
    for r in 0..x.rows() {
        let n = tensor::norm(x.row(r));
        if n > spec.input_bound * (1.0 + 1e-12) {
            return Err(Error::InputTooLarge { norm: n, bound: spec.input_bound });
        }
    }
    Ok(())
}

/// Records the full network on `tape` for the batch `x` (one sample per row).
pub fn record_forward(
    tape: &mut Tape,
    spec: &NetworkSpec,
    state: &NetworkState,
    x: &Tensor,
) -> Result<ForwardGraph> {
    check_inputs(spec, x)?;
    let input = tape.leaf(x.clone())?;
    let emb = tape.leaf(state.embedding.clone())?;
    let mut z = tape.matmul_t(input, emb)?;
    let mut hidden = alloc::vec![z];
    let mut w1s = Vec::with_capacity(spec.depth);
    let mut w2s = Vec::with_capacity(spec.depth);
    let mut insertion = z;
    let mut block_out = z;
    let mut block_u = None;
    let mut block_v = None;

    let mut insert = |tape: &mut Tape, z: NodeId| -> Result<NodeId> {
        insertion = z;
        let Some(block) = &state.inserted else {
            block_out = z;
            return Ok(z);
        };
        let u = tape.leaf(block.u.clone())?;
        let v = tape.leaf(block.v.clone())?;
        let pre = tape.matmul_t(z, u)?;
        let mut feat = tape.relu(pre)?;
        if block.bias_feature {
            feat = tape.append_ones(feat)?;
        }
        let h = tape.matmul_t(feat, v)?;
        let out = tape.add(z, h)?;
        block_u = Some(u);
        block_v = Some(v);
        block_out = out;
        Ok(out)
    };

    for (l, layer) in state.layers.iter().enumerate() {
        if l == spec.insertion_layer {
            z = insert(tape, z)?;
        }
        let w1 = tape.leaf(layer.w1.clone())?;
        let w2 = tape.leaf(layer.w2.clone())?;
        let pre = tape.matmul_t(z, w1)?;
        let act = tape.relu(pre)?;
        let branch = tape.matmul_t(act, w2)?;
        let sum = tape.add(z, branch)?;
        z = tape.norm(sum, state.norm_map(spec, l))?;
        hidden.push(z);
        w1s.push(w1);
        w2s.push(w2);
    }
    if spec.insertion_layer == state.layers.len() {
        z = insert(tape, z)?;
    }
    let top_w = tape.leaf(state.top.weight.clone())?;
    let top_b = tape.leaf(Tensor::vector(state.top.bias.clone()))?;
    let lin = tape.matmul_t(z, top_w)?;
    let logits = tape.add_row(lin, top_b)?;
    Ok(ForwardGraph {
        input,
        hidden,
        insertion,
        block_out,
        logits,
        params: ParamNodes { w1: w1s, w2: w2s, top_w, top_b, block_u, block_v },
    })
}

/// Summed loss over the batch.
pub fn record_loss(
    tape: &mut Tape,
    spec: &NetworkSpec,
    logits: NodeId,
    targets: &Targets,
) -> Result<NodeId> {
    match (&spec.loss, targets) {
        (LossKind::SoftmaxCrossEntropy, Targets::Classes(labels)) => {
            tape.softmax_cross_entropy(logits, labels)
        }
        (LossKind::SquaredError { .. }, Targets::Values(y)) => tape.squared_error(logits, y),
        _ => Err(Error::InvalidConfig("loss kind does not match the targets".into())),
    }
}

/// Mean loss over a dataset, accumulated chunk by chunk in row order.
pub fn evaluate_loss(spec: &NetworkSpec, state: &NetworkState, data: &Dataset) -> Result<f64> {
    let n = data.len();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut total = 0.0;
    let mut start = 0;
    while start < n {
        let end = (start + EVAL_CHUNK).min(n);
        let chunk = data.slice(start, end)?;
        let mut tape = Tape::new();
        let g = record_forward(&mut tape, spec, state, &chunk.x)?;
        let l = record_loss(&mut tape, spec, g.logits, &chunk.targets)?;
        total += tape.value(l).data()[0];
        start = end;
    }
    let mean = total / n as f64;
    if math::abs(mean).is_finite() {
        Ok(mean)
    } else {
        Err(Error::NonFinite("evaluate_loss"))
    }
}

/// `(f_bot(x), f_top(f_bot(x)))` for a batch.
pub fn forward_decomposed(
    spec: &NetworkSpec,
    state: &NetworkState,
    x: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let g = record_forward(&mut tape, spec, state, x)?;
    Ok((tape.value(g.insertion).clone(), tape.value(g.logits).clone()))
}
