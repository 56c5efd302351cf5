//! The normalized residual network family `T_l(z) = N_l(z + h_l(z))`.
//!
//! A network is a fixed input embedding (spectral norm at most one), `depth`
//! residual layers with two-layer ReLU branches `h(z) = W2 relu(W1 z)`, and a
//! linear top map. The split point `insertion_layer` divides it into `f_bot`
//! (embedding plus the first `l*` layers) and `f_top` (remaining layers plus
//! the top map); a jumpboard block, when present, is inserted there as a plain
//! residual `z + V psi(z)` with no normalization.

mod constants;
mod forward;
mod norm;
mod project;

pub use constants::{compute_arch_constants, lambda_products, ArchConstants, LayerConstants};
pub use forward::{
    evaluate_loss, forward_decomposed, record_forward, record_loss, ForwardGraph, ParamNodes,
    EVAL_CHUNK,
};
pub use norm::{layernorm_eps, lipschitz_bound, norm_lipschitz_constants, rmsnorm_eps};
pub use project::{project_matrix, project_norms};

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::math;
use crate::tape::RowNorm;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    RmsnormEps,
    LayernormEps,
    FixedBatchnorm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossKind {
    SoftmaxCrossEntropy,
    /// `0.5 |f(x) - y|^2` with `|y| <= target_bound`.
    SquaredError { target_bound: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub depth: usize,
    pub width: usize,
    pub input_dim: usize,
    pub output_dim: usize,
    /// Hidden width `m` of every residual branch and of the jumpboard features.
    pub branch_width: usize,
    pub norm_kind: NormKind,
    pub eps_eng: f64,
    pub gamma: Vec<f64>,
    pub insertion_layer: usize,
    /// Per-matrix spectral cap for branch matrices.
    pub spectral_cap: f64,
    /// Per-matrix Frobenius cap for branch matrices.
    pub frobenius_cap: f64,
    pub top_spectral_cap: f64,
    pub top_bias_cap: f64,
    /// `B_x`: every input must satisfy `|x| <= input_bound`.
    pub input_bound: f64,
    pub loss: LossKind,
}

impl NetworkSpec {
    /// RMSNorm network with unit `gamma` and moderate caps.
    pub fn rms_default(depth: usize, width: usize, input_dim: usize, output_dim: usize) -> Self {
        NetworkSpec {
            depth,
            width,
            input_dim,
            output_dim,
            branch_width: width,
            norm_kind: NormKind::RmsnormEps,
            eps_eng: 1e-5,
            gamma: vec![1.0; width],
            insertion_layer: depth,
            spectral_cap: 1.0,
            frobenius_cap: 4.0,
            top_spectral_cap: 4.0,
            top_bias_cap: 4.0,
            input_bound: 16.0,
            loss: LossKind::SoftmaxCrossEntropy,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.into()));
        if self.width == 0 || self.input_dim == 0 || self.output_dim == 0 || self.branch_width == 0
        {
            return bad("dimensions must be positive");
        }
        if !(self.eps_eng > 0.0) {
            return bad("eps_eng must be positive");
        }
        if self.insertion_layer > self.depth {
            return Err(Error::InvalidConfig(format!(
                "insertion layer {} exceeds depth {}",
                self.insertion_layer, self.depth
            )));
        }
        if self.gamma.len() != self.width {
            return bad("gamma must have one entry per hidden coordinate");
        }
        if [self.spectral_cap, self.frobenius_cap, self.top_spectral_cap, self.top_bias_cap]
            .iter()
            .any(|&c| !(c > 0.0))
        {
            return bad("norm caps must be positive");
        }
        if !(self.input_bound > 0.0) {
            return bad("input bound must be positive");
        }
        if let LossKind::SquaredError { target_bound } = self.loss {
            if !(target_bound >= 0.0) {
                return bad("target bound must be non-negative");
            }
        }
        Ok(())
    }

    pub fn gamma_max(&self) -> f64 {
        self.gamma.iter().map(|&g| math::abs(g)).fold(0.0, f64::max)
    }
}

/// Frozen running statistics for evaluation-mode BatchNorm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrozenNormStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub beta: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualLayer {
    /// `m x N`.
    pub w1: Tensor,
    /// `N x m`.
    pub w2: Tensor,
    pub norm_stats: Option<FrozenNormStats>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopMap {
    /// `C x N`.
    pub weight: Tensor,
    pub bias: Vec<f64>,
}

/// Zero-output residual block `h(z) = V psi_U(z)`, `psi_U(z) = relu(U z)`,
/// optionally extended with a constant feature.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InsertedBlock {
    /// `m x N`.
    pub u: Tensor,
    pub bias_feature: bool,
    /// `N x (m + bias_feature)`.
    pub v: Tensor,
}

impl InsertedBlock {
    pub fn feature_dim(&self) -> usize {
        self.u.rows() + usize::from(self.bias_feature)
    }

    /// `psi_U(z)` for every row of `z`.
    pub fn features(&self, z: &Tensor) -> Result<Tensor> {
        let pre = z.matmul_t(&self.u)?;
        let (r, m) = (pre.rows(), pre.cols());
        let width = self.feature_dim();
        Ok(Tensor::from_fn(r, width, |i, j| {
            if j < m {
                let v = pre.get(i, j);
                if v > 0.0 {
                    v
                } else {
                    0.0
                }
            } else {
                1.0
            }
        }))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkState {
    /// `N x d_in`, spectral norm at most one, never trained.
    pub embedding: Tensor,
    pub layers: Vec<ResidualLayer>,
    pub top: TopMap,
    pub inserted: Option<InsertedBlock>,
}

fn gaussian_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| std * rng.sample::<f64, _>(StandardNormal))
}

impl NetworkState {
    /// Random initialization, projected onto the declared caps.
    pub fn init<R: Rng + ?Sized>(spec: &NetworkSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let (n, d, m, c) = (spec.width, spec.input_dim, spec.branch_width, spec.output_dim);
        let embedding = if d <= n {
            Tensor::from_fn(n, d, |i, j| if i == j { 1.0 } else { 0.0 })
        } else {
            let e = gaussian_matrix(rng, n, d, 1.0);
            let s = linalg::spectral_norm(&e);
            e.scale(1.0 / s)
        };
        let mut layers = Vec::with_capacity(spec.depth);
        for _ in 0..spec.depth {
            let w1 = gaussian_matrix(rng, m, n, 1.0 / math::sqrt(n as f64));
            let w2 = gaussian_matrix(rng, n, m, 0.5 / math::sqrt(m as f64));
            let norm_stats = (spec.norm_kind == NormKind::FixedBatchnorm).then(|| FrozenNormStats {
                mean: vec![0.0; n],
                var: vec![1.0; n],
                beta: vec![0.0; n],
            });
            layers.push(ResidualLayer { w1, w2, norm_stats });
        }
        let top = TopMap {
            weight: gaussian_matrix(rng, c, n, 1.0 / math::sqrt(n as f64)),
            bias: vec![0.0; c],
        };
        let state = NetworkState { embedding, layers, top, inserted: None };
        Ok(project_norms(spec, &state))
    }

    /// The normalization map of residual layer `l`.
    pub fn norm_map(&self, spec: &NetworkSpec, l: usize) -> RowNorm {
        match spec.norm_kind {
            NormKind::RmsnormEps => RowNorm::Rms { gamma: spec.gamma.clone(), eps: spec.eps_eng },
            NormKind::LayernormEps => {
                RowNorm::Layer { gamma: spec.gamma.clone(), eps: spec.eps_eng }
            }
            NormKind::FixedBatchnorm => {
                let n = spec.width;
                let default = FrozenNormStats {
                    mean: vec![0.0; n],
                    var: vec![1.0; n],
                    beta: vec![0.0; n],
                };
                let st = self.layers[l].norm_stats.as_ref().unwrap_or(&default);
                let scale: Vec<f64> = spec
                    .gamma
                    .iter()
                    .zip(&st.var)
                    .map(|(g, v)| g / math::sqrt(v + spec.eps_eng))
                    .collect();
                let shift = scale
                    .iter()
                    .zip(st.mean.iter().zip(&st.beta))
                    .map(|(a, (mu, b))| b - a * mu)
                    .collect();
                RowNorm::Affine { scale, shift }
            }
        }
    }

    /// A copy with a zero-output block at the insertion layer.
    pub fn with_block(&self, u: Tensor, bias_feature: bool) -> NetworkState {
        let n = u.cols();
        let width = u.rows() + usize::from(bias_feature);
        let mut out = self.clone();
        out.inserted = Some(InsertedBlock { u, bias_feature, v: Tensor::zeros(&[n, width]) });
        out
    }

    /// Draws the frozen feature extractor `U0` with entries `N(0, 1/N)`.
    pub fn draw_block_features<R: Rng + ?Sized>(spec: &NetworkSpec, rng: &mut R) -> Tensor {
        gaussian_matrix(rng, spec.branch_width, spec.width, 1.0 / math::sqrt(spec.width as f64))
    }

    /// Number of trainable scalars in the residual layers.
    pub fn residual_parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.w1.len() + l.w2.len()).sum()
    }
}
