//! End-to-end desk-scale pipelines: expansion with certification, and the
//! per-cell work of the gradient-decay and joint-scaling sweeps.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::certify::{self, CertificateReport, PopulationRecord};
use crate::data::{Dataset, SyntheticTask, TaskSplits};
use crate::error::{Error, Result};
use crate::jumpboard::{
    self, activation_gradients, apply_step, Direction, GradientStats, LineSearchConfig,
    MarginReport, Selection,
};
use crate::math;
use crate::netmodel::{
    compute_arch_constants, evaluate_loss, ArchConstants, NetworkSpec, NetworkState,
};
use crate::stats;
use crate::tensor::{self, Tensor};
use crate::train::{self, SgdConfig, TrainScope};
use crate::data::stream_rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    pub sgd: SgdConfig,
    pub scope: TrainScope,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            sgd: SgdConfig { learning_rate: 0.05, steps: 200, batch_size: 64, eval_every: 20 },
            scope: TrainScope::BlockOnly,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpansionConfig {
    #[serde(default)]
    pub line_search: LineSearchConfig,
    #[serde(default)]
    pub bias_feature: bool,
    /// Optimizer run producing `f_alg`; `None` selects the jumpboard.
    #[serde(default)]
    pub finetune: Option<FinetuneConfig>,
    /// Also build the population-proxy jumpboard from the estimation split.
    #[serde(default = "yes")]
    pub population: bool,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default)]
    pub offdiag_pairs: usize,
}

fn yes() -> bool {
    true
}

fn default_delta() -> f64 {
    0.05
}

impl Default for ExpansionConfig {
    fn default() -> Self {
        ExpansionConfig {
            line_search: LineSearchConfig::default(),
            bias_feature: false,
            finetune: Some(FinetuneConfig::default()),
            population: true,
            delta: default_delta(),
            offdiag_pairs: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpansionOutcome {
    /// The empirical direction vanished: deepest-model regime at this layer.
    pub degenerate_direction: bool,
    /// The line search found no decreasing step.
    pub degenerate_step: bool,
    pub direction_norm: f64,
    pub eta: f64,
    pub selection: Selection,
    pub margins: MarginReport,
    pub population: Option<PopulationRecord>,
    pub certificate: CertificateReport,
    pub constants: ArchConstants,
    pub stats: GradientStats,
    /// `eta <C_train, C_test>`, the first-order test margin of the step.
    pub predicted_test_margin: f64,
    pub old: NetworkState,
    pub jump: NetworkState,
    pub new: NetworkState,
}

/// `(1/n) q^T psi` for the block of `state` over `data`.
pub fn feature_gradient_mean(
    spec: &NetworkSpec,
    state: &NetworkState,
    data: &Dataset,
) -> Result<Tensor> {
    let block = state
        .inserted
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig("state carries no inserted block".into()))?;
    let (z, q) = activation_gradients(spec, state, data)?;
    Ok(q.t_matmul(&block.features(&z)?)?.scale(1.0 / q.rows() as f64))
}

/// Direction plus line search; a vanished direction yields the zero block.
fn jumpboard_from(
    spec: &NetworkSpec,
    block_state: &NetworkState,
    direction_data: &Dataset,
    objective_data: &Dataset,
    ls: &LineSearchConfig,
) -> Result<(NetworkState, Option<Direction>, f64, bool)> {
    match jumpboard::block_direction(spec, block_state, direction_data) {
        Ok(dir) => {
            let r = jumpboard::line_search_eta(spec, block_state, &dir, objective_data, ls)?;
            let jump = apply_step(block_state, &dir.delta_v, r.eta)?;
            Ok((jump, Some(dir), r.eta, r.degenerate))
        }
        Err(Error::NoDescentDirection { .. }) => Ok((block_state.clone(), None, 0.0, true)),
        Err(e) => Err(e),
    }
}

/// Collect, construct, search, fine-tune, select, measure and certify.
///
/// `spec.insertion_layer` fixes where the block goes; `block_seed` draws its
/// frozen feature map.
pub fn expansion_pipeline(
    spec: &NetworkSpec,
    splits: &TaskSplits,
    base: &NetworkState,
    cfg: &ExpansionConfig,
    block_seed: u64,
) -> Result<ExpansionOutcome> {
    spec.validate()?;
    let old = NetworkState { inserted: None, ..base.clone() };
    let stats = jumpboard::collect_gradient_stats(
        spec,
        &old,
        &splits.train,
        &splits.test,
        cfg.offdiag_pairs,
        block_seed,
    )?;
    let mut rng = stream_rng(block_seed, 0xb10c);
    let u0 = NetworkState::draw_block_features(spec, &mut rng);
    let block_state = old.with_block(u0, cfg.bias_feature);

    let (jump, dir, eta, degenerate_step) =
        jumpboard_from(spec, &block_state, &splits.train, &splits.train, &cfg.line_search)?;
    let degenerate_direction = dir.is_none();
    let direction_norm = dir.as_ref().map_or(0.0, |d| d.norm);
    let predicted_test_margin = match &dir {
        Some(d) => {
            let c_test = feature_gradient_mean(spec, &block_state, &splits.test)?;
            jumpboard::first_order_block_margin(&d.c, &c_test, eta)?
        }
        None => 0.0,
    };

    let alg = match &cfg.finetune {
        Some(ft) => Some(
            train::sgd(spec, &block_state, &splits.train, &ft.sgd, ft.scope, block_seed ^ 0xa1)?
                .state,
        ),
        None => None,
    };
    let (new, selection) =
        jumpboard::select_final_model(spec, alg.as_ref(), &jump, &splits.train)?;
    let margins =
        jumpboard::measure_margins(spec, &old, &jump, &new, &splits.train, &splits.test)?;

    let population = if cfg.population {
        let (pop_jump, _, _, _) = jumpboard_from(
            spec,
            &block_state,
            &splits.estimation,
            &splits.estimation,
            &cfg.line_search,
        )?;
        let (pop_new, _) =
            jumpboard::select_final_model(spec, alg.as_ref(), &pop_jump, &splits.train)?;
        let ev = |s: &NetworkState, d: &Dataset| evaluate_loss(spec, s, d);
        Some(PopulationRecord {
            r_old: ev(&old, &splits.proxy)?,
            r_jump: ev(&pop_jump, &splits.proxy)?,
            r_new: ev(&pop_new, &splits.proxy)?,
            l_train_jump: ev(&pop_jump, &splits.train)?,
            l_train_new: ev(&pop_new, &splits.train)?,
            l_test_old: margins.l_test_old,
            l_test_new: ev(&pop_new, &splits.test)?,
        })
    } else {
        None
    };

    let constants = compute_arch_constants(spec, &block_state);
    let terms = (&constants).into();
    let (m, k) = (splits.train.len() as f64, splits.test.len() as f64);
    let eps = |n: f64| certify::eps_gen_norm(&terms, n, cfg.delta, 1.0 / math::sqrt(n));
    let certificate = certify::certify(
        &margins,
        population.as_ref(),
        eps(m),
        eps(k),
        cfg.delta,
        k,
        constants.b_ell,
    );
    Ok(ExpansionOutcome {
        degenerate_direction,
        degenerate_step,
        direction_norm,
        eta,
        selection,
        margins,
        population,
        certificate,
        constants,
        stats,
        predicted_test_margin,
        old,
        jump,
        new,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InsertionPolicy {
    LastLayer,
    ScanAll,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub depths: Vec<usize>,
    pub widths: Vec<usize>,
    pub seeds: Vec<u64>,
    pub sgd: SgdConfig,
    #[serde(default = "last_layer")]
    pub insertion: InsertionPolicy,
}

fn last_layer() -> InsertionPolicy {
    InsertionPolicy::LastLayer
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cell {
    pub depth: usize,
    pub width: usize,
    pub seed: u64,
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depths.is_empty() || self.widths.is_empty() || self.seeds.is_empty() {
            return Err(Error::InvalidConfig("depths, widths and seeds must be nonempty".into()));
        }
        if self.widths.contains(&0) {
            return Err(Error::InvalidConfig("widths must be positive".into()));
        }
        self.sgd.validate()
    }

    /// Seeds in first-appearance order with repeats removed.
    pub fn unique_seeds(&self) -> Vec<u64> {
        let mut out: Vec<u64> = Vec::new();
        for &s in &self.seeds {
            if !out.contains(&s) {
                out.push(s);
            }
        }
        out
    }

    /// Full factorial grid, depth-major then width then seed.
    pub fn cells(&self) -> Vec<Cell> {
        let seeds = self.unique_seeds();
        let mut out = Vec::new();
        for &depth in &self.depths {
            for &width in &self.widths {
                for &seed in &seeds {
                    out.push(Cell { depth, width, seed });
                }
            }
        }
        out
    }
}

/// The task of one sweep seed: the base task with its seed replaced.
pub fn task_for_seed(task: &SyntheticTask, seed: u64) -> SyntheticTask {
    SyntheticTask { seed, ..task.clone() }
}

fn check_cell(spec: &NetworkSpec, cell: Cell) -> Result<()> {
    if spec.depth != cell.depth || spec.width != cell.width {
        return Err(Error::InvalidConfig("network spec does not match the sweep cell".into()));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayRow {
    pub depth: usize,
    pub width: usize,
    pub seed: u64,
    pub mu_norm: f64,
    pub normalized: f64,
}

/// Trains one model and measures `|mu|` at the last hidden layer.
/// `spec` must have the cell's depth and width.
pub fn gradient_decay_cell(
    spec: &NetworkSpec,
    splits: &TaskSplits,
    cell: Cell,
    sgd: &SgdConfig,
) -> Result<DecayRow> {
    check_cell(spec, cell)?;
    let spec = NetworkSpec { insertion_layer: cell.depth, ..spec.clone() };
    let state = train::train_base(&spec, &splits.train, sgd, cell.seed)?.state;
    let (_, q) = activation_gradients(&spec, &state, &splits.train)?;
    let mu = q.column_means();
    Ok(DecayRow {
        depth: cell.depth,
        width: cell.width,
        seed: cell.seed,
        mu_norm: tensor::norm(&mu),
        normalized: f64::NAN,
    })
}

/// Divides each row by the seed-mean `|mu|` of the shallowest depth at the
/// same width.
pub fn normalize_by_shallowest(rows: &mut [DecayRow]) {
    let widths: Vec<usize> = {
        let mut w: Vec<usize> = rows.iter().map(|r| r.width).collect();
        w.sort_unstable();
        w.dedup();
        w
    };
    for w in widths {
        let min_depth = rows.iter().filter(|r| r.width == w).map(|r| r.depth).min().unwrap_or(0);
        let base: Vec<f64> = rows
            .iter()
            .filter(|r| r.width == w && r.depth == min_depth)
            .map(|r| r.mu_norm)
            .collect();
        let b = stats::mean(&base);
        for r in rows.iter_mut().filter(|r| r.width == w) {
            r.normalized = r.mu_norm / b;
        }
    }
}

/// Per-depth mean `|mu|` over widths and seeds, ordered by depth.
pub fn depth_profile(rows: &[DecayRow]) -> Vec<(usize, f64)> {
    let mut depths: Vec<usize> = rows.iter().map(|r| r.depth).collect();
    depths.sort_unstable();
    depths.dedup();
    depths
        .into_iter()
        .map(|d| {
            let v: Vec<f64> = rows.iter().filter(|r| r.depth == d).map(|r| r.mu_norm).collect();
            (d, stats::mean(&v))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointRow {
    pub depth: usize,
    pub width: usize,
    pub seed: u64,
    pub train_loss: f64,
    pub test_loss: f64,
}

pub fn joint_scaling_cell(
    spec: &NetworkSpec,
    splits: &TaskSplits,
    cell: Cell,
    sgd: &SgdConfig,
) -> Result<JointRow> {
    check_cell(spec, cell)?;
    let spec = spec.clone();
    let out = train::train_base(&spec, &splits.train, sgd, cell.seed)?;
    Ok(JointRow {
        depth: cell.depth,
        width: cell.width,
        seed: cell.seed,
        train_loss: out.final_loss(),
        test_loss: evaluate_loss(&spec, &out.state, &splits.test)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointCell {
    pub depth: usize,
    pub width: usize,
    pub seeds: usize,
    pub train_mean: f64,
    pub train_std: f64,
    pub test_mean: f64,
    pub test_std: f64,
}

/// Mean and population standard deviation per `(depth, width)`, in
/// first-appearance order.
pub fn aggregate_joint(rows: &[JointRow]) -> Vec<JointCell> {
    let mut keys: Vec<(usize, usize)> = Vec::new();
    for r in rows {
        if !keys.contains(&(r.depth, r.width)) {
            keys.push((r.depth, r.width));
        }
    }
    keys.into_iter()
        .map(|(depth, width)| {
            let sel: Vec<&JointRow> =
                rows.iter().filter(|r| r.depth == depth && r.width == width).collect();
            let tr: Vec<f64> = sel.iter().map(|r| r.train_loss).collect();
            let te: Vec<f64> = sel.iter().map(|r| r.test_loss).collect();
            JointCell {
                depth,
                width,
                seeds: sel.len(),
                train_mean: stats::mean(&tr),
                train_std: stats::population_std(&tr),
                test_mean: stats::mean(&te),
                test_std: stats::population_std(&te),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_task(seed: u64) -> SyntheticTask {
        let mut t = SyntheticTask::default_mixture(seed);
        t.m_train = 128;
        t.k_test = 64;
        t.m_proxy = 256;
        t.m_estimation = 256;
        t
    }

    #[test]
    fn pipeline_improves_train_loss() {
        let task = tiny_task(2);
        let splits = task.generate().unwrap();
        let spec = task.network_spec(2, 8).unwrap();
        let sgd = SgdConfig { learning_rate: 0.1, steps: 60, batch_size: 32, eval_every: 20 };
        let base = train::train_base(&spec, &splits.train, &sgd, 2).unwrap().state;
        let mut cfg = ExpansionConfig::default();
        cfg.finetune = None;
        let out = expansion_pipeline(&spec, &splits, &base, &cfg, 5).unwrap();
        assert!(!out.degenerate_direction);
        assert!(out.margins.delta_train_s > 0.0);
        assert_eq!(out.margins.delta_erm, 0.0);
        assert_eq!(out.new, out.jump);
        assert!(out.certificate.audit_holds());
    }

    #[test]
    fn single_depth_normalizes_to_one() {
        let mut rows: Vec<DecayRow> = [(8, 0.3), (8, 0.5), (16, 0.2)]
            .iter()
            .map(|&(w, m)| DecayRow { depth: 3, width: w, seed: 0, mu_norm: m, normalized: 0.0 })
            .collect();
        rows[1].seed = 1;
        normalize_by_shallowest(&mut rows);
        assert!((rows[2].normalized - 1.0).abs() < 1e-15);
        assert!((rows[0].normalized + rows[1].normalized - 2.0).abs() < 1e-15);
    }

    #[test]
    fn duplicate_seeds_collapse() {
        let cfg = SweepConfig {
            depths: alloc::vec![1],
            widths: alloc::vec![4],
            seeds: alloc::vec![3, 3, 4],
            sgd: SgdConfig::default(),
            insertion: InsertionPolicy::LastLayer,
        };
        assert_eq!(cfg.cells().len(), 2);
    }

    #[test]
    fn one_seed_has_zero_std() {
        let rows = [JointRow { depth: 1, width: 2, seed: 0, train_loss: 0.4, test_loss: 0.5 }];
        let agg = aggregate_joint(&rows);
        assert_eq!(agg.len(), 1);
        assert_eq!(agg[0].test_std, 0.0);
    }
}
