//! TOML run configurations. Unknown keys are rejected everywhere.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use resexp_core::alignlab::{AlignmentConfig, Sampling, SigmaModel};
use resexp_core::data::{mix_seed, Generator, SyntheticTask};
use resexp_core::harness::{ExpansionConfig, InsertionPolicy, SweepConfig};
use resexp_core::netmodel::{NetworkSpec, NetworkState, NormKind};
use resexp_core::scalelab::{CouplingModel, ScalingParams};
use resexp_core::tensor::Tensor;
use resexp_core::train::SgdConfig;

use crate::error::{CliError, Result};

/// Reads and parses a TOML file. Parse errors carry line and column.
pub fn load<T: DeserializeOwned>(path: &Path) -> Result<(T, Vec<u8>)> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Config {
        path: path.to_path_buf(),
        message: format!("cannot read: {e}"),
    })?;
    let text = std::str::from_utf8(&bytes).map_err(|e| CliError::Config {
        path: path.to_path_buf(),
        message: format!("not UTF-8: {e}"),
    })?;
    let parsed = toml::from_str(text).map_err(|e| CliError::Config {
        path: path.to_path_buf(),
        message: anchored(text, &e),
    })?;
    Ok((parsed, bytes))
}

fn anchored(text: &str, e: &toml::de::Error) -> String {
    let msg = e.message().trim().to_string();
    match e.span() {
        Some(span) => {
            let before = &text[..span.start.min(text.len())];
            let line = before.matches('\n').count() + 1;
            let col = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
            format!("line {line}, column {col}: {msg}")
        }
        None => msg,
    }
}

fn default_task() -> TaskConfig {
    let t = SyntheticTask::default_mixture(0);
    TaskConfig {
        generator: t.generator,
        m_train: t.m_train,
        k_test: t.k_test,
        m_proxy: t.m_proxy,
        m_estimation: t.m_estimation,
    }
}

/// A synthetic task without its seed; the run seed is attached later.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub generator: Generator,
    pub m_train: usize,
    pub k_test: usize,
    pub m_proxy: usize,
    #[serde(default)]
    pub m_estimation: usize,
}

impl TaskConfig {
    pub fn with_seed(&self, seed: u64) -> SyntheticTask {
        SyntheticTask {
            generator: self.generator.clone(),
            m_train: self.m_train,
            k_test: self.k_test,
            m_proxy: self.m_proxy,
            m_estimation: self.m_estimation,
            seed,
        }
    }
}

/// Network shape and overrides of the task-derived defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub depth: Option<usize>,
    pub width: Option<usize>,
    pub branch_width: Option<usize>,
    pub norm_kind: Option<NormKind>,
    pub eps_eng: Option<f64>,
    /// Uniform norm gain.
    pub gamma: Option<f64>,
    /// Defaults to the last layer.
    pub insertion_layer: Option<usize>,
    pub spectral_cap: Option<f64>,
    pub frobenius_cap: Option<f64>,
    pub top_spectral_cap: Option<f64>,
    pub top_bias_cap: Option<f64>,
    /// Start the top map at the identity (requires output dim = width).
    #[serde(default)]
    pub identity_top: bool,
}

impl NetworkConfig {
    pub fn shape(&self) -> Result<(usize, usize)> {
        match (self.depth, self.width) {
            (Some(d), Some(w)) => Ok((d, w)),
            _ => Err(CliError::Invalid("[network] needs depth and width".into())),
        }
    }

    pub fn spec(&self, task: &SyntheticTask, depth: usize, width: usize) -> Result<NetworkSpec> {
        let mut s = task.network_spec(depth, width)?;
        if let Some(v) = self.branch_width {
            s.branch_width = v;
        }
        if let Some(v) = self.norm_kind {
            s.norm_kind = v;
        }
        if let Some(v) = self.eps_eng {
            s.eps_eng = v;
        }
        if let Some(v) = self.gamma {
            s.gamma = vec![v; width];
        }
        s.insertion_layer = self.insertion_layer.unwrap_or(depth);
        if let Some(v) = self.spectral_cap {
            s.spectral_cap = v;
        }
        if let Some(v) = self.frobenius_cap {
            s.frobenius_cap = v;
        }
        if let Some(v) = self.top_spectral_cap {
            s.top_spectral_cap = v;
        }
        if let Some(v) = self.top_bias_cap {
            s.top_bias_cap = v;
        }
        if self.identity_top && s.output_dim != width {
            return Err(CliError::Invalid(format!(
                "identity_top needs output dim {} to equal width {width}",
                s.output_dim
            )));
        }
        s.validate()?;
        Ok(s)
    }

    /// Applies start-state overrides to a freshly initialized state.
    pub fn adjust_init(&self, spec: &NetworkSpec, state: &mut NetworkState) {
        if self.identity_top {
            state.top.weight = Tensor::identity(spec.width);
            state.top.bias = vec![0.0; spec.output_dim];
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainFile {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_task")]
    pub task: TaskConfig,
    pub network: NetworkConfig,
    #[serde(default)]
    pub sgd: SgdConfig,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpandFile {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_task")]
    pub task: TaskConfig,
    #[serde(default)]
    pub network: NetworkConfig,
    #[serde(default)]
    pub sgd: SgdConfig,
    #[serde(default)]
    pub expansion: ExpansionConfig,
    /// Base model; trained from `[network]` and `[sgd]` when absent.
    /// Relative paths resolve against the config file's directory.
    pub model: Option<PathBuf>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CovarianceFile {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_task")]
    pub task: TaskConfig,
    #[serde(default)]
    pub network: NetworkConfig,
    #[serde(default)]
    pub sgd: SgdConfig,
    #[serde(default)]
    pub covariance: CovarianceOptions,
    pub model: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    Test,
    Proxy,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CovarianceOptions {
    #[serde(default = "default_pairs")]
    pub pair_samples: usize,
    /// Rows entering the Gershgorin estimate; 0 means all.
    #[serde(default)]
    pub gershgorin_rows: usize,
    #[serde(default = "default_split")]
    pub split: SplitName,
    /// Band half-width, in noise units, for the reported within-band fraction.
    #[serde(default = "default_bands")]
    pub bands: f64,
}

fn default_pairs() -> usize {
    100_000
}

fn default_split() -> SplitName {
    SplitName::Train
}

fn default_bands() -> f64 {
    3.0
}

impl Default for CovarianceOptions {
    fn default() -> Self {
        CovarianceOptions {
            pair_samples: default_pairs(),
            gershgorin_rows: 0,
            split: default_split(),
            bands: default_bands(),
        }
    }
}

/// Noise model of an alignment grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseShape {
    /// `tau^2 I`.
    Isotropic,
    /// Variances ramping linearly from `low * tau^2` to `tau^2`.
    DiagonalRamp { low: f64 },
    /// `tau^2 ((1 - rho) I + rho 11^T)`, a full covariance.
    Equicorrelated { rho: f64 },
}

/// Full factorial alignment grid over `n x m x k x alpha x noise`.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlignGrid {
    pub n: Vec<usize>,
    pub m: Vec<usize>,
    pub k: Vec<usize>,
    /// Per-coordinate mean signal; `|mu_bar|^2 = alpha^2 N`.
    pub alpha: Vec<f64>,
    #[serde(default = "one")]
    pub tau_sq: f64,
    #[serde(default = "isotropic")]
    pub noise: Vec<NoiseShape>,
    pub trials: u64,
    #[serde(default)]
    pub sampling: Sampling,
}

fn one() -> f64 {
    1.0
}

fn isotropic() -> Vec<NoiseShape> {
    vec![NoiseShape::Isotropic]
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlignFile {
    #[serde(default)]
    pub seed: u64,
    pub align: AlignGrid,
}

impl NoiseShape {
    /// Covariance model and the smallest admissible `C_sigma`.
    pub fn build(&self, n: usize, tau_sq: f64) -> Result<(SigmaModel, f64)> {
        match *self {
            NoiseShape::Isotropic => Ok((SigmaModel::ScaledIdentity { variance: tau_sq }, 1.0)),
            NoiseShape::DiagonalRamp { low } => {
                if !(0.0..=1.0).contains(&low) {
                    return Err(CliError::Invalid("diagonal_ramp low must be in [0, 1]".into()));
                }
                let variances = (0..n)
                    .map(|i| {
                        let t = if n == 1 { 1.0 } else { i as f64 / (n - 1) as f64 };
                        tau_sq * (low + (1.0 - low) * t)
                    })
                    .collect();
                Ok((SigmaModel::Diagonal { variances }, 1.0))
            }
            NoiseShape::Equicorrelated { rho } => {
                if !(0.0..1.0).contains(&rho) {
                    return Err(CliError::Invalid("equicorrelated rho must be in [0, 1)".into()));
                }
                let matrix =
                    Tensor::from_fn(n, n, |i, j| if i == j { tau_sq } else { rho * tau_sq });
                Ok((SigmaModel::Full { matrix }, 1.0 + (n as f64 - 1.0) * rho))
            }
        }
    }

    pub fn label(&self) -> String {
        match self {
            NoiseShape::Isotropic => "isotropic".into(),
            NoiseShape::DiagonalRamp { low } => format!("diagonal_ramp({low})"),
            NoiseShape::Equicorrelated { rho } => format!("equicorrelated({rho})"),
        }
    }
}

impl AlignGrid {
    /// Cells in `n`-major order; each cell's seed is derived from its index.
    pub fn cells(&self, seed: u64) -> Result<Vec<(AlignmentConfig, NoiseShape)>> {
        let mut out = Vec::new();
        for &n in &self.n {
            for &m in &self.m {
                for &k in &self.k {
                    for &alpha in &self.alpha {
                        for noise in &self.noise {
                            let (sigma, c_sigma) = noise.build(n, self.tau_sq)?;
                            let cfg = AlignmentConfig {
                                n,
                                m,
                                k,
                                mu_bar: vec![alpha; n],
                                sigma,
                                c_sigma,
                                tau_sq: self.tau_sq,
                                trials: self.trials,
                                seed: mix_seed(seed, out.len() as u64),
                                sampling: self.sampling,
                            };
                            cfg.validate()?;
                            out.push((cfg, *noise));
                        }
                    }
                }
            }
        }
        if out.is_empty() {
            return Err(CliError::Invalid("alignment grid is empty".into()));
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalingSection {
    pub beta: f64,
    /// Per-step rate `c`; alternatively give `c_g` and `q`.
    pub c: Option<f64>,
    pub c_g: Option<f64>,
    pub q: Option<f64>,
    pub delta0: f64,
    pub model: CouplingModel,
    pub p_min: f64,
    pub p_max: f64,
    pub points: usize,
    #[serde(default = "one")]
    pub steps_per_depth: f64,
    pub reliability: Option<ReliabilityOptions>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReliabilityOptions {
    pub m: f64,
    pub k: f64,
    pub delta: f64,
    #[serde(default = "one")]
    pub constant: f64,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalingFile {
    #[serde(default)]
    pub seed: u64,
    pub scaling: ScalingSection,
}

impl ScalingSection {
    pub fn params(&self) -> Result<ScalingParams> {
        let p = match (self.c, self.c_g, self.q) {
            (Some(c), None, None) => ScalingParams::with_rate(self.beta, c, self.delta0, 0),
            (None, Some(c_g), Some(q)) => {
                ScalingParams { beta: self.beta, c_g, q, delta0: self.delta0, steps: 0 }
            }
            _ => return Err(CliError::Invalid("give either `c` or both `c_g` and `q`".into())),
        };
        p.validate()?;
        self.model.validate()?;
        if !(self.p_min > 0.0 && self.p_max > self.p_min) {
            return Err(CliError::Invalid("need 0 < p_min < p_max".into()));
        }
        Ok(p)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepKind {
    GradientDecay,
    JointScaling,
    Expansion,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub kind: SweepKind,
    pub depths: Vec<usize>,
    pub widths: Vec<usize>,
    pub seeds: Vec<u64>,
    #[serde(default = "last_layer")]
    pub insertion: InsertionPolicy,
}

fn last_layer() -> InsertionPolicy {
    InsertionPolicy::LastLayer
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepFile {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_task")]
    pub task: TaskConfig,
    /// Shape keys are ignored; the sweep supplies depth and width.
    #[serde(default)]
    pub network: NetworkConfig,
    #[serde(default)]
    pub sgd: SgdConfig,
    #[serde(default)]
    pub expansion: ExpansionConfig,
    pub sweep: SweepSection,
}

impl SweepFile {
    pub fn sweep_config(&self) -> Result<SweepConfig> {
        let cfg = SweepConfig {
            depths: self.sweep.depths.clone(),
            widths: self.sweep.widths.clone(),
            seeds: self.sweep.seeds.clone(),
            sgd: self.sgd.clone(),
            insertion: self.sweep.insertion,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Resolves `p` against the directory holding `config`.
pub fn relative_to(config: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        config.parent().unwrap_or(Path::new(".")).join(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_key_is_rejected_with_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "seed = 1\n[network]\ndepth = 2\nwidth = 8\nbogus = 3\n").unwrap();
        let err = load::<TrainFile>(&p).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("line 5"), "{err}");
    }

    #[test]
    fn minimal_train_config_parses() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "[network]\ndepth = 2\nwidth = 8\n").unwrap();
        let (f, _) = load::<TrainFile>(&p).unwrap();
        assert_eq!(f.network.shape().unwrap(), (2, 8));
        assert_eq!(f.task.m_train, 2048);
    }

    #[test]
    fn equicorrelated_cells_validate() {
        let grid = AlignGrid {
            n: vec![4, 16],
            m: vec![8],
            k: vec![8],
            alpha: vec![0.5],
            tau_sq: 2.0,
            noise: vec![NoiseShape::Equicorrelated { rho: 0.3 }, NoiseShape::DiagonalRamp { low: 0.2 }],
            trials: 10,
            sampling: Sampling::SufficientStatistic,
        };
        let cells = grid.cells(3).unwrap();
        assert_eq!(cells.len(), 4);
        assert_ne!(cells[0].0.seed, cells[1].0.seed);
    }
}
