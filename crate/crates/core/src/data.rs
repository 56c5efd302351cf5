//! Datasets and seeded synthetic task generators.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;
use crate::netmodel::{self, LossKind, NetworkSpec, NetworkState};
use crate::tensor::{self, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Targets {
    Classes(Vec<usize>),
    Values(Tensor),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub x: Tensor,
    pub targets: Targets,
}

impl Dataset {
    pub fn new(x: Tensor, targets: Targets) -> Result<Self> {
        let n = match &targets {
            Targets::Classes(c) => c.len(),
            Targets::Values(v) => v.rows(),
        };
        if n != x.rows() {
            return Err(Error::ShapeMismatch(alloc::format!(
                "{} inputs but {n} targets",
                x.rows()
            )));
        }
        Ok(Dataset { x, targets })
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn slice(&self, start: usize, end: usize) -> Result<Dataset> {
        let x = self.x.slice_rows(start, end)?;
        let targets = match &self.targets {
            Targets::Classes(c) => Targets::Classes(c[start..end].to_vec()),
            Targets::Values(v) => Targets::Values(v.slice_rows(start, end)?),
        };
        Ok(Dataset { x, targets })
    }

    pub fn select(&self, idx: &[usize]) -> Result<Dataset> {
        let x = self.x.select_rows(idx)?;
        let targets = match &self.targets {
            Targets::Classes(c) => Targets::Classes(idx.iter().map(|&i| c[i]).collect()),
            Targets::Values(v) => Targets::Values(v.select_rows(idx)?),
        };
        Ok(Dataset { x, targets })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Generator {
    /// Isotropic unit-variance clusters around means of norm `separation`.
    GaussianMixture { classes: usize, input_dim: usize, separation: f64 },
    /// Targets from a random RMSNorm teacher plus uniform noise of the given std.
    TeacherRegression {
        input_dim: usize,
        output_dim: usize,
        teacher_depth: usize,
        teacher_width: usize,
        noise_std: f64,
    },
    /// Inputs and targets with i.i.d. unit-variance uniform coordinates,
    /// independent of each other.
    IndependentCoordinates { dim: usize },
}

/// One synthetic problem with independent train/test/proxy/estimation splits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTask {
    pub generator: Generator,
    pub m_train: usize,
    pub k_test: usize,
    pub m_proxy: usize,
    #[serde(default)]
    pub m_estimation: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSplits {
    pub train: Dataset,
    pub test: Dataset,
    pub proxy: Dataset,
    pub estimation: Dataset,
}

const STREAM_PARAMS: u64 = 0;
const STREAM_TRAIN: u64 = 1;
const STREAM_TEST: u64 = 2;
const STREAM_PROXY: u64 = 3;
const STREAM_ESTIMATION: u64 = 4;

/// Derives an independent seed from `base` and `salt` (SplitMix64 finalizer).
pub fn mix_seed(base: u64, salt: u64) -> u64 {
    let mut z = base ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn clip_rows(x: &mut Tensor, bound: f64) {
    for r in 0..x.rows() {
        let n = tensor::norm(x.row(r));
        if n > bound {
            let k = bound / n;
            x.row_mut(r).iter_mut().for_each(|v| *v *= k);
        }
    }
}

/// Fixed parameters of a task (cluster means or teacher weights).
enum Law {
    Mixture { means: Tensor, bound: f64 },
    Teacher { spec: NetworkSpec, state: NetworkState, bound: f64, noise_half_width: f64 },
    Independent { dim: usize },
}

impl SyntheticTask {
    /// The default desk-scale classification task.
    pub fn default_mixture(seed: u64) -> Self {
        SyntheticTask {
            generator: Generator::GaussianMixture { classes: 4, input_dim: 16, separation: 2.0 },
            m_train: 2048,
            k_test: 2048,
            m_proxy: 20480,
            m_estimation: 20480,
            seed,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self.generator {
            Generator::GaussianMixture { input_dim, .. }
            | Generator::TeacherRegression { input_dim, .. } => input_dim,
            Generator::IndependentCoordinates { dim } => dim,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self.generator {
            Generator::GaussianMixture { classes, .. } => classes,
            Generator::TeacherRegression { output_dim, .. } => output_dim,
            Generator::IndependentCoordinates { dim } => dim,
        }
    }

    /// Radius that contains every generated input.
    pub fn input_bound(&self) -> f64 {
        match self.generator {
            Generator::GaussianMixture { input_dim, separation, .. } => {
                separation + 2.0 * math::sqrt(input_dim as f64)
            }
            Generator::TeacherRegression { input_dim, .. } => 2.0 * math::sqrt(input_dim as f64),
            Generator::IndependentCoordinates { dim } => math::sqrt(3.0 * dim as f64),
        }
    }

    pub fn loss_kind(&self) -> Result<LossKind> {
        Ok(match &self.generator {
            Generator::GaussianMixture { .. } => LossKind::SoftmaxCrossEntropy,
            Generator::TeacherRegression { .. } => match self.law()? {
                Law::Teacher { state, spec, noise_half_width, .. } => {
                    let cst = netmodel::compute_arch_constants(&spec, &state);
                    let teacher_out = cst.b0 + cst.l_top * cst.b_norm.max(cst.b_x);
                    LossKind::SquaredError {
                        target_bound: teacher_out
                            + noise_half_width * math::sqrt(spec.output_dim as f64),
                    }
                }
                _ => unreachable!("teacher generator builds a teacher law"),
            },
            Generator::IndependentCoordinates { dim } => {
                LossKind::SquaredError { target_bound: math::sqrt(3.0 * *dim as f64) }
            }
        })
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self.generator {
            Generator::GaussianMixture { classes, input_dim, separation } => {
                classes >= 2 && input_dim > 0 && separation >= 0.0
            }
            Generator::TeacherRegression { input_dim, output_dim, teacher_width, noise_std, .. } => {
                input_dim > 0 && output_dim > 0 && teacher_width > 0 && noise_std >= 0.0
            }
            Generator::IndependentCoordinates { dim } => dim > 0,
        };
        if !ok {
            return Err(Error::InvalidConfig("invalid task generator parameters".into()));
        }
        if self.m_train == 0 || self.k_test == 0 || self.m_proxy == 0 {
            return Err(Error::InvalidConfig("split sizes must be positive".into()));
        }
        Ok(())
    }

    fn law(&self) -> Result<Law> {
        let mut rng = stream_rng(self.seed, STREAM_PARAMS);
        Ok(match self.generator {
            Generator::GaussianMixture { classes, input_dim, separation } => {
                let mut means = Tensor::zeros(&[classes, input_dim]);
                for c in 0..classes {
                    let dir: Vec<f64> =
                        (0..input_dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                    let n = tensor::norm(&dir);
                    for (o, d) in means.row_mut(c).iter_mut().zip(&dir) {
                        *o = separation * d / n;
                    }
                }
                Law::Mixture { means, bound: self.input_bound() }
            }
            Generator::TeacherRegression {
                input_dim,
                output_dim,
                teacher_depth,
                teacher_width,
                noise_std,
            } => {
                let mut spec =
                    NetworkSpec::rms_default(teacher_depth, teacher_width, input_dim, output_dim);
                spec.input_bound = self.input_bound();
                spec.top_spectral_cap = 1.0;
                spec.loss = LossKind::SquaredError { target_bound: 0.0 };
                let state = NetworkState::init(&spec, &mut rng)?;
                Law::Teacher {
                    spec,
                    state,
                    bound: self.input_bound(),
                    noise_half_width: math::sqrt(3.0) * noise_std,
                }
            }
            Generator::IndependentCoordinates { dim } => Law::Independent { dim },
        })
    }

    fn sample(&self, law: &Law, n: usize, stream: u64) -> Result<Dataset> {
        let mut rng = stream_rng(self.seed, stream);
        match law {
            Law::Mixture { means, bound } => {
                let (classes, d) = (means.rows(), means.cols());
                let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
                let mut x = Tensor::from_fn(n, d, |_, _| rng.sample::<f64, _>(StandardNormal));
                for (r, &c) in labels.iter().enumerate() {
                    for (v, m) in x.row_mut(r).iter_mut().zip(means.row(c)) {
                        *v += m;
                    }
                }
                clip_rows(&mut x, *bound);
                Dataset::new(x, Targets::Classes(labels))
            }
            Law::Teacher { spec, state, bound, noise_half_width } => {
                let d = spec.input_dim;
                let mut x = Tensor::from_fn(n, d, |_, _| rng.sample::<f64, _>(StandardNormal));
                clip_rows(&mut x, *bound);
                let (_, out) = netmodel::forward_decomposed(spec, state, &x)?;
                let mut y = out;
                let h = *noise_half_width;
                for v in y.data_mut() {
                    *v += rng.random_range(-1.0..=1.0) * h;
                }
                Dataset::new(x, Targets::Values(y))
            }
            Law::Independent { dim } => {
                let a = math::sqrt(3.0);
                let x = Tensor::from_fn(n, *dim, |_, _| rng.random_range(-a..=a));
                let y = Tensor::from_fn(n, *dim, |_, _| rng.random_range(-a..=a));
                Dataset::new(x, Targets::Values(y))
            }
        }
    }

    /// Draws all four splits. Each split has its own RNG stream, so split
    /// sizes never influence each other's samples.
    pub fn generate(&self) -> Result<TaskSplits> {
        self.validate()?;
        let law = self.law()?;
        let est = if self.m_estimation == 0 { self.m_proxy } else { self.m_estimation };
        Ok(TaskSplits {
            train: self.sample(&law, self.m_train, STREAM_TRAIN)?,
            test: self.sample(&law, self.k_test, STREAM_TEST)?,
            proxy: self.sample(&law, self.m_proxy, STREAM_PROXY)?,
            estimation: self.sample(&law, est, STREAM_ESTIMATION)?,
        })
    }

    /// A network spec sized for this task.
    pub fn network_spec(&self, depth: usize, width: usize) -> Result<NetworkSpec> {
        let mut spec = NetworkSpec::rms_default(depth, width, self.input_dim(), self.output_dim());
        spec.input_bound = self.input_bound();
        spec.loss = self.loss_kind()?;
        Ok(spec)
    }
}
