use super::{NetworkSpec, NetworkState};
use crate::linalg;
use crate::math;
use crate::tensor::Tensor;

// Caps are treated as met within this relative slack so that projecting an
// already-projected matrix is the identity.
const CAP_SLACK: f64 = 1e-12;

/// Radially rescales `w` so that `|w|_sigma <= s` and `|w|_F <= b`.
/// Feasible inputs come back unchanged.
pub fn project_matrix(w: &Tensor, s: f64, b: f64) -> Tensor {
    let sigma = linalg::spectral_norm(w);
    let fro = w.frobenius_norm();
    if sigma <= s * (1.0 + CAP_SLACK) && fro <= b * (1.0 + CAP_SLACK) {
        return w.clone();
    }
    let factor = (s / sigma).min(b / fro).min(1.0);
    w.scale(factor)
}

fn project_vector(v: &[f64], cap: f64) -> alloc::vec::Vec<f64> {
    let n = math::sqrt(v.iter().map(|x| x * x).sum());
    if n <= cap * (1.0 + CAP_SLACK) {
        v.to_vec()
    } else {
        v.iter().map(|x| x * cap / n).collect()
    }
}

/// Enforces every declared norm cap on the trainable parameters.
pub fn project_norms(spec: &NetworkSpec, state: &NetworkState) -> NetworkState {
    let (s, b) = (spec.spectral_cap, spec.frobenius_cap);
    let mut out = state.clone();
    for layer in &mut out.layers {
        layer.w1 = project_matrix(&layer.w1, s, b);
        layer.w2 = project_matrix(&layer.w2, s, b);
    }
    out.top.weight = project_matrix(&out.top.weight, spec.top_spectral_cap, f64::INFINITY);
    out.top.bias = project_vector(&out.top.bias, spec.top_bias_cap);
    if let Some(block) = &mut out.inserted {
        block.u = project_matrix(&block.u, s, b);
        block.v = project_matrix(&block.v, s, b);
    }
    out
}
