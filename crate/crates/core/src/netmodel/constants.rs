use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::norm::output_bound;
use super::{LossKind, NetworkSpec, NetworkState};
use crate::math;

/// Per-layer constants entering the covering-number bound.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerConstants {
    /// Input-Lipschitz constant of the branch `h_l`.
    pub s: f64,
    /// Frobenius radius of the layer's parameter vector.
    pub b: f64,
    /// Parameter-Lipschitz constant `L_l^(p)`.
    pub l_p: f64,
    /// Number of scalar parameters.
    pub d: usize,
    /// Lipschitz constant of the layer's normalization (1 for the inserted block).
    pub c: f64,
    pub lambda: f64,
}

/// Constant inventory of a hypothesis class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchConstants {
    pub b_ell: f64,
    pub l_ell: f64,
    pub l_top: f64,
    pub b0: f64,
    pub gamma_max: f64,
    pub b_x: f64,
    pub b_norm: f64,
    pub b_star: f64,
    pub layers: Vec<LayerConstants>,
    pub d: usize,
    pub b_bar: f64,
    /// Number of parameterized layers (the `L` of the covering bound).
    pub depth: usize,
    pub lambda_max: f64,
}

/// `Lambda_l = L_top L_l^(p) B_* c_l prod_{k>l} c_k (1 + s_k)` for layers
/// given as `(l_p, c, s)`.
pub fn lambda_products(l_top: f64, b_star: f64, layers: &[(f64, f64, f64)]) -> Vec<f64> {
    let n = layers.len();
    let mut tail = alloc::vec![1.0; n + 1];
    for k in (0..n).rev() {
        let (_, c, s) = layers[k];
        tail[k] = tail[k + 1] * c * (1.0 + s);
    }
    layers
        .iter()
        .enumerate()
        .map(|(l, &(l_p, c, _))| l_top * l_p * b_star * c * tail[l + 1])
        .collect()
}

/// Class-level constants for `spec`, with the inserted block counted as a
/// layer when `state` carries one. Branch constants come from the caps, not
/// from the current weights, so they bound every member of the class.
pub fn compute_arch_constants(spec: &NetworkSpec, state: &NetworkState) -> ArchConstants {
    let m = spec.branch_width;
    let s_cap = spec.spectral_cap;
    let gamma_max = spec.gamma_max();
    let b_x = spec.input_bound;
    let sqrt2 = math::sqrt(2.0);

    // Walk the network once to bound every representation.
    let block = state.inserted.as_ref();
    let block_s = s_cap * s_cap;
    let block_bias = block.map_or(false, |b| b.bias_feature);
    let through_block = |r: f64| (1.0 + block_s) * r + if block_bias { s_cap } else { 0.0 };
    let mut r = b_x;
    let mut b_norm: f64 = 0.0;
    let mut b_star = b_x;
    let mut norms_c = Vec::with_capacity(spec.depth);
    for l in 0..spec.depth {
        if block.is_some() && l == spec.insertion_layer {
            r = through_block(r);
            b_star = b_star.max(r);
        }
        let norm = state.norm_map(spec, l);
        norms_c.push(super::norm::lipschitz_bound(&norm));
        r = output_bound(spec, &norm, (1.0 + s_cap * s_cap) * r);
        b_norm = b_norm.max(r);
    }
    if block.is_some() && spec.insertion_layer == spec.depth {
        r = through_block(r);
    }
    b_star = b_star.max(b_norm).max(r);
    let top_in = r;

    let l_top = spec.top_spectral_cap;
    let b0 = spec.top_bias_cap;
    let b_out = b0 + l_top * top_in;
    let (b_ell, l_ell) = match spec.loss {
        LossKind::SoftmaxCrossEntropy => {
            (math::ln(spec.output_dim as f64) + 2.0 * b_out, sqrt2)
        }
        LossKind::SquaredError { target_bound } => {
            let r = b_out + target_bound;
            (0.5 * r * r, r)
        }
    };

    let mut raw: Vec<(f64, f64, f64, f64, usize)> = Vec::new(); // (l_p, c, s, b, d)
    let residual = |c: f64| {
        (sqrt2 * s_cap, c, s_cap * s_cap, sqrt2 * spec.frobenius_cap, 2 * spec.width * m)
    };
    let block_entry = |b: &super::InsertedBlock| {
        let feat = b.feature_dim();
        let l_p = if b.bias_feature {
            sqrt2 * s_cap.max(1.0) * (1.0 + 1.0 / b_star)
        } else {
            sqrt2 * s_cap
        };
        (l_p, 1.0, block_s, sqrt2 * spec.frobenius_cap, spec.width * (b.u.rows() + feat))
    };
    for l in 0..spec.depth {
        if let Some(b) = block.filter(|_| l == spec.insertion_layer) {
            raw.push(block_entry(b));
        }
        raw.push(residual(norms_c[l]));
    }
    if let Some(b) = block.filter(|_| spec.insertion_layer == spec.depth) {
        raw.push(block_entry(b));
    }

    let triples: Vec<(f64, f64, f64)> = raw.iter().map(|&(lp, c, s, _, _)| (lp, c, s)).collect();
    let lambdas = lambda_products(l_top, b_star, &triples);
    let layers: Vec<LayerConstants> = raw
        .iter()
        .zip(&lambdas)
        .map(|(&(l_p, c, s, b, d), &lambda)| LayerConstants { s, b, l_p, d, c, lambda })
        .collect();
    let d = layers.iter().map(|l| l.d).sum();
    let b_bar = layers.iter().map(|l| l.b).fold(0.0, f64::max);
    let lambda_max = lambdas.iter().copied().fold(0.0, f64::max);
    ArchConstants {
        b_ell,
        l_ell,
        l_top,
        b0,
        gamma_max,
        b_x,
        b_norm,
        b_star,
        depth: layers.len(),
        layers,
        d,
        b_bar,
        lambda_max,
    }
}
