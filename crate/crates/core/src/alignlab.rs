//! Train/test alignment of activation gradients: the Chebyshev bound on
//! `P(mu^T g <= 0)`, its Monte Carlo ground truth, and covariance diagnostics.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::stream_rng;
use crate::error::{Error, Result};
use crate::jumpboard::{column_covariance, column_variances, sample_pairs};
use crate::linalg;
use crate::math;
use crate::stats;
use crate::tensor::{self, Tensor};

/// Trials handled by one RNG stream. Counts depend only on the seed and the
/// chunk index, never on how chunks are distributed over workers.
pub const TRIAL_CHUNK: u64 = 1024;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SigmaModel {
    Diagonal { variances: Vec<f64> },
    ScaledIdentity { variance: f64 },
    Full { matrix: Tensor },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    /// Draw the two means directly: `mu ~ N(mu_bar, Sigma/M)`, `g ~ N(mu_bar, Sigma/K)`.
    #[default]
    SufficientStatistic,
    /// Draw all `M + K` gradients and average them.
    PerSample,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlignmentConfig {
    pub n: usize,
    pub m: usize,
    pub k: usize,
    pub mu_bar: Vec<f64>,
    pub sigma: SigmaModel,
    pub c_sigma: f64,
    pub tau_sq: f64,
    pub trials: u64,
    pub seed: u64,
    #[serde(default)]
    pub sampling: Sampling,
}

impl AlignmentConfig {
    /// Isotropic noise `tau_sq I` and `mu_bar = alpha (1, ..., 1)`, so that
    /// `|mu_bar|^2 = alpha^2 N`.
    pub fn uniformly_active(
        n: usize,
        m: usize,
        k: usize,
        alpha: f64,
        tau_sq: f64,
        trials: u64,
        seed: u64,
    ) -> Self {
        AlignmentConfig {
            n,
            m,
            k,
            mu_bar: vec![alpha; n],
            sigma: SigmaModel::ScaledIdentity { variance: tau_sq },
            c_sigma: 1.0,
            tau_sq,
            trials,
            seed,
            sampling: Sampling::SufficientStatistic,
        }
    }

    pub fn sigma_matrix(&self) -> Tensor {
        match &self.sigma {
            SigmaModel::Diagonal { variances } => {
                Tensor::from_fn(self.n, self.n, |i, j| if i == j { variances[i] } else { 0.0 })
            }
            SigmaModel::ScaledIdentity { variance } => Tensor::identity(self.n).scale(*variance),
            SigmaModel::Full { matrix } => matrix.clone(),
        }
    }

    pub fn trace(&self) -> f64 {
        match &self.sigma {
            SigmaModel::Diagonal { variances } => variances.iter().sum(),
            SigmaModel::ScaledIdentity { variance } => variance * self.n as f64,
            SigmaModel::Full { matrix } => (0..self.n).map(|i| matrix.get(i, i)).sum(),
        }
    }

    fn diag(&self) -> Vec<f64> {
        match &self.sigma {
            SigmaModel::Diagonal { variances } => variances.clone(),
            SigmaModel::ScaledIdentity { variance } => vec![*variance; self.n],
            SigmaModel::Full { matrix } => (0..self.n).map(|i| matrix.get(i, i)).collect(),
        }
    }

    fn lambda_max(&self) -> f64 {
        match &self.sigma {
            SigmaModel::Full { matrix } => linalg::lambda_max(matrix),
            _ => self.diag().into_iter().fold(0.0, f64::max),
        }
    }

    pub fn mu_bar_norm_sq(&self) -> f64 {
        tensor::dot(&self.mu_bar, &self.mu_bar)
    }

    /// Shape checks plus the covariance caps `lambda_max <= C tau^2` and
    /// `tau^2 >= max_j Sigma_jj`.
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.m == 0 || self.k == 0 {
            return Err(Error::InvalidConfig("N, M and K must be positive".into()));
        }
        if self.trials == 0 {
            return Err(Error::InvalidConfig("trials must be positive".into()));
        }
        if self.mu_bar.len() != self.n {
            return Err(Error::InvalidConfig("mu_bar must have N entries".into()));
        }
        let bad = |msg: &str| Err(Error::InvalidCovariance(msg.into()));
        match &self.sigma {
            SigmaModel::Diagonal { variances } if variances.len() != self.n => {
                return bad("diagonal model needs N variances")
            }
            SigmaModel::Full { matrix } if matrix.shape() != [self.n, self.n] => {
                return bad("full model needs an N x N matrix")
            }
            SigmaModel::Full { matrix } => {
                for i in 0..self.n {
                    for j in 0..i {
                        if matrix.get(i, j) != matrix.get(j, i) {
                            return bad("covariance matrix is not symmetric");
                        }
                    }
                }
            }
            _ => {}
        }
        let diag = self.diag();
        if diag.iter().any(|&v| !(v >= 0.0)) {
            return bad("variances must be non-negative");
        }
        if !(self.tau_sq > 0.0 && self.c_sigma > 0.0) {
            return bad("tau^2 and C_sigma must be positive");
        }
        let slack = 1.0 + 1e-12;
        if diag.iter().any(|&v| v > self.tau_sq * slack) {
            return bad("a coordinate variance exceeds tau^2");
        }
        if self.lambda_max() > self.c_sigma * self.tau_sq * slack {
            return bad("lambda_max(Sigma) exceeds C_sigma tau^2");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentBound {
    pub train_term: f64,
    pub test_term: f64,
    pub mixed_term: f64,
    pub total: f64,
}

/// `4 C tau^2/(M |mu_bar|^2) + 4 C tau^2/(K |mu_bar|^2)
///  + 4 C tau^2 tr(Sigma)/(K M |mu_bar|^4)`.
pub fn alignment_bound_terms(
    c_sigma: f64,
    tau_sq: f64,
    m: f64,
    k: f64,
    mu_bar_norm_sq: f64,
    trace: f64,
) -> Result<AlignmentBound> {
    if !(mu_bar_norm_sq > 0.0) {
        return Err(Error::ZeroMeanSignal);
    }
    let a = 4.0 * c_sigma * tau_sq;
    let train_term = a / (m * mu_bar_norm_sq);
    let test_term = a / (k * mu_bar_norm_sq);
    let mixed_term = a * trace / (k * m * mu_bar_norm_sq * mu_bar_norm_sq);
    Ok(AlignmentBound { train_term, test_term, mixed_term, total: train_term + test_term + mixed_term })
}

pub fn alignment_bound(cfg: &AlignmentConfig) -> Result<AlignmentBound> {
    alignment_bound_terms(
        cfg.c_sigma,
        cfg.tau_sq,
        cfg.m as f64,
        cfg.k as f64,
        cfg.mu_bar_norm_sq(),
        cfg.trace(),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentResult {
    pub failures: u64,
    pub trials: u64,
    pub empirical_fail_rate: f64,
    pub wilson_ci_upper: f64,
    /// Absent when `mu_bar = 0`.
    pub bound: Option<AlignmentBound>,
}

impl AlignmentResult {
    /// Whether the Wilson upper limit respects the bound; `None` when the
    /// bound is absent or not below one.
    pub fn dominance(&self) -> Option<bool> {
        self.bound.filter(|b| b.total < 1.0).map(|b| self.wilson_ci_upper <= b.total)
    }
}

enum Factor {
    Diag(Vec<f64>),
    Lower(Tensor),
}

/// A validated configuration with its covariance factor precomputed.
pub struct AlignmentSampler {
    cfg: AlignmentConfig,
    factor: Factor,
}

impl AlignmentSampler {
    pub fn new(cfg: &AlignmentConfig) -> Result<Self> {
        cfg.validate()?;
        let factor = match &cfg.sigma {
            SigmaModel::Full { matrix } => Factor::Lower(linalg::cholesky(matrix)?),
            _ => Factor::Diag(cfg.diag().into_iter().map(math::sqrt).collect()),
        };
        Ok(AlignmentSampler { cfg: cfg.clone(), factor })
    }

    pub fn config(&self) -> &AlignmentConfig {
        &self.cfg
    }

    pub fn num_chunks(&self) -> u64 {
        self.cfg.trials.div_ceil(TRIAL_CHUNK)
    }

    /// `mu_bar + scale * L z` into `out`.
    fn draw<R: Rng + ?Sized>(&self, rng: &mut R, scale: f64, z: &mut [f64], out: &mut [f64]) {
        for v in z.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        match &self.factor {
            Factor::Diag(s) => {
                for j in 0..out.len() {
                    out[j] = self.cfg.mu_bar[j] + scale * s[j] * z[j];
                }
            }
            Factor::Lower(l) => {
                for (j, o) in out.iter_mut().enumerate() {
                    let row = l.row(j);
                    *o = self.cfg.mu_bar[j] + scale * tensor::dot(&row[..=j], &z[..=j]);
                }
            }
        }
    }

    fn mean_of<R: Rng + ?Sized>(&self, rng: &mut R, count: usize, z: &mut [f64], buf: &mut [f64], out: &mut [f64]) {
        match self.cfg.sampling {
            Sampling::SufficientStatistic => self.draw(rng, 1.0 / math::sqrt(count as f64), z, out),
            Sampling::PerSample => {
                out.iter_mut().for_each(|v| *v = 0.0);
                for _ in 0..count {
                    self.draw(rng, 1.0, z, buf);
                    for (o, b) in out.iter_mut().zip(buf.iter()) {
                        *o += b;
                    }
                }
                out.iter_mut().for_each(|v| *v /= count as f64);
            }
        }
    }

    /// Number of trials in chunk `index` with `mu^T g <= 0`.
    pub fn chunk_failures(&self, index: u64) -> u64 {
        let start = index * TRIAL_CHUNK;
        let len = TRIAL_CHUNK.min(self.cfg.trials.saturating_sub(start));
        let mut rng = stream_rng(self.cfg.seed, index);
        let n = self.cfg.n;
        let (mut z, mut buf, mut mu, mut g) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        let mut fails = 0;
        for _ in 0..len {
            self.mean_of(&mut rng, self.cfg.m, &mut z, &mut buf, &mut mu);
            self.mean_of(&mut rng, self.cfg.k, &mut z, &mut buf, &mut g);
            if tensor::dot(&mu, &g) <= 0.0 {
                fails += 1;
            }
        }
        fails
    }

    pub fn finish(&self, failures: u64) -> AlignmentResult {
        let trials = self.cfg.trials;
        AlignmentResult {
            failures,
            trials,
            empirical_fail_rate: failures as f64 / trials as f64,
            wilson_ci_upper: stats::wilson_upper(failures, trials, stats::Z_95),
            bound: alignment_bound(&self.cfg).ok(),
        }
    }
}

/// Single-threaded Monte Carlo estimate of `P(mu^T g <= 0)`.
pub fn simulate_alignment(cfg: &AlignmentConfig) -> Result<AlignmentResult> {
    let s = AlignmentSampler::new(cfg)?;
    let failures = (0..s.num_chunks()).map(|i| s.chunk_failures(i)).sum();
    Ok(s.finish(failures))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `bins + 1` increasing edges.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn new(values: &[f64], bins: usize) -> Histogram {
        let r = values.iter().map(|v| math::abs(*v)).fold(0.0, f64::max);
        let r = if r > 0.0 { r } else { 1.0 };
        let bins = bins.max(1);
        let w = 2.0 * r / bins as f64;
        let edges: Vec<f64> = (0..=bins).map(|i| -r + w * i as f64).collect();
        let mut counts = vec![0u64; bins];
        for &v in values {
            let i = (((v + r) / w) as usize).min(bins - 1);
            counts[i] += 1;
        }
        Histogram { edges, counts }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OffDiagonalEntry {
    pub j: usize,
    pub k: usize,
    pub value: f64,
    /// Sampling standard error under independence: `sqrt(S_jj S_kk / (M-1))`.
    pub noise: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovarianceDiagnostics {
    pub sigma_diag: Vec<f64>,
    pub offdiag: Vec<OffDiagonalEntry>,
    pub histogram: Histogram,
    /// `max |offdiag| / max diag`.
    pub ratio: f64,
    /// `max_j (S_jj + sum_{k != j} |S_jk|)` over the sampled rows.
    pub gershgorin_lambda_max: f64,
    pub gershgorin_rows: Vec<usize>,
}

impl CovarianceDiagnostics {
    /// Fraction of sampled entries with `|value| <= bands * noise`.
    pub fn fraction_within_bands(&self, bands: f64) -> f64 {
        if self.offdiag.is_empty() {
            return 1.0;
        }
        let inside = self.offdiag.iter().filter(|e| math::abs(e.value) <= bands * e.noise).count();
        inside as f64 / self.offdiag.len() as f64
    }
}

pub const HISTOGRAM_BINS: usize = 50;

/// Covariance summaries of `M x N` per-sample gradients. `pair_samples`
/// off-diagonal pairs are drawn without replacement; `gershgorin_rows`
/// rows (all rows when 0 or at least N) enter the eigenvalue estimate.
pub fn covariance_diagnostics(
    q: &Tensor,
    pair_samples: usize,
    gershgorin_rows: usize,
    seed: u64,
) -> Result<CovarianceDiagnostics> {
    let (m, n) = (q.rows(), q.cols());
    if m < 2 {
        return Err(Error::InvalidConfig("covariance diagnostics need at least 2 samples".into()));
    }
    let mean = q.column_means();
    let sigma_diag = column_variances(q);
    let mut rng = stream_rng(seed, 0xd1a9);
    let offdiag: Vec<OffDiagonalEntry> = sample_pairs(n, pair_samples, &mut rng)
        .into_iter()
        .map(|(j, k)| OffDiagonalEntry {
            j,
            k,
            value: column_covariance(q, &mean, j, k),
            noise: math::sqrt(sigma_diag[j] * sigma_diag[k] / (m - 1) as f64),
        })
        .collect();
    let values: Vec<f64> = offdiag.iter().map(|e| e.value).collect();
    let max_off = values.iter().map(|v| math::abs(*v)).fold(0.0, f64::max);
    let max_diag = sigma_diag.iter().copied().fold(0.0, f64::max);
    let ratio = if max_diag > 0.0 { max_off / max_diag } else { 0.0 };

    let rows: Vec<usize> = if gershgorin_rows == 0 || gershgorin_rows >= n {
        (0..n).collect()
    } else {
        let mut all: Vec<usize> = (0..n).collect();
        for i in 0..gershgorin_rows {
            let j = rng.random_range(i..n);
            all.swap(i, j);
        }
        let mut r = all[..gershgorin_rows].to_vec();
        r.sort_unstable();
        r
    };
    let gershgorin_lambda_max = rows
        .iter()
        .map(|&j| {
            sigma_diag[j]
                + (0..n)
                    .filter(|&k| k != j)
                    .map(|k| math::abs(column_covariance(q, &mean, j, k)))
                    .sum::<f64>()
        })
        .fold(0.0, f64::max);
    Ok(CovarianceDiagnostics {
        sigma_diag,
        histogram: Histogram::new(&values, HISTOGRAM_BINS),
        offdiag,
        ratio,
        gershgorin_lambda_max,
        gershgorin_rows: rows,
    })
}
