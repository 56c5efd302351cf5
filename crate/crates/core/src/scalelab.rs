//! The excess-risk recursion `D_{k+1} = D_k - c D_k^{1+beta}`, its
//! power-law envelope, depth-width coupling, and fitted scaling exponents.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;
use crate::stats;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalingParams {
    pub beta: f64,
    pub c_g: f64,
    pub q: f64,
    pub delta0: f64,
    pub steps: usize,
}

impl ScalingParams {
    /// Parameters with per-step rate `c` directly (`c_G = 2c`, `q = 1`).
    pub fn with_rate(beta: f64, c: f64, delta0: f64, steps: usize) -> Self {
        ScalingParams { beta, c_g: 2.0 * c, q: 1.0, delta0, steps }
    }

    /// `c = c_G / (2q)`.
    pub fn c(&self) -> f64 {
        self.c_g / (2.0 * self.q)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0) || !(self.c_g >= 0.0) || !(self.q > 0.0) || !(self.delta0 > 0.0) {
            return Err(Error::InvalidConfig(
                "need beta >= 0, c_G >= 0, q > 0 and delta0 > 0".into(),
            ));
        }
        Ok(())
    }

    fn step(&self, d: f64) -> f64 {
        d - self.c() * math::powf(d, 1.0 + self.beta)
    }
}

/// `D_0 .. D_steps` at equality.
pub fn run_recursion(p: &ScalingParams) -> Result<Vec<f64>> {
    recursion_steps(p, p.steps)
}

fn recursion_steps(p: &ScalingParams, steps: usize) -> Result<Vec<f64>> {
    p.validate()?;
    let mut out = Vec::with_capacity(steps + 1);
    let mut d = p.delta0;
    out.push(d);
    for k in 0..steps {
        d = p.step(d);
        if !(d > 0.0) {
            return Err(Error::StepTooLarge { step: k + 1 });
        }
        out.push(d);
    }
    Ok(out)
}

/// `(D_0^{-beta} + beta c k)^{-1/beta}`.
pub fn power_law_envelope(p: &ScalingParams, k: f64) -> Result<f64> {
    if p.beta == 0.0 {
        return Err(Error::BetaZero);
    }
    let b = p.beta;
    Ok(math::powf(math::powf(p.delta0, -b) + b * p.c() * k, -1.0 / b))
}

/// `(1 - c)^k D_0`, the exact trajectory when `beta = 0`.
pub fn exponential_trajectory(p: &ScalingParams, k: usize) -> f64 {
    math::powi(1.0 - p.c(), k as i32) * p.delta0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Coupling {
    /// `L = kappa N`.
    Linear { kappa: f64 },
    /// `L = kappa N^{1 - nu}`.
    Polynomial { kappa: f64, nu: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CouplingModel {
    pub coupling: Coupling,
    pub a_arch: f64,
}

impl CouplingModel {
    pub fn linear(kappa: f64, a_arch: f64) -> Self {
        CouplingModel { coupling: Coupling::Linear { kappa }, a_arch }
    }

    pub fn polynomial(kappa: f64, nu: f64, a_arch: f64) -> Self {
        CouplingModel { coupling: Coupling::Polynomial { kappa, nu }, a_arch }
    }

    pub fn kappa_nu(&self) -> (f64, f64) {
        match self.coupling {
            Coupling::Linear { kappa } => (kappa, 0.0),
            Coupling::Polynomial { kappa, nu } => (kappa, nu),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (kappa, nu) = self.kappa_nu();
        if !(kappa > 0.0 && self.a_arch > 0.0 && (0.0..1.0).contains(&nu)) {
            return Err(Error::InvalidConfig("need kappa > 0, a_arch > 0, 0 <= nu < 1".into()));
        }
        Ok(())
    }

    /// Depth `u(N)`.
    pub fn depth(&self, n: f64) -> f64 {
        let (kappa, nu) = self.kappa_nu();
        kappa * math::powf(n, 1.0 - nu)
    }

    /// `P(N) = a_arch u(N) N^2`.
    pub fn params(&self, n: f64) -> f64 {
        self.a_arch * self.depth(n) * n * n
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WidthDepth {
    pub n: f64,
    pub l: f64,
}

/// Solves `P = a_arch u(N) N^2` in closed form.
pub fn params_to_width(p: f64, model: &CouplingModel) -> Result<WidthDepth> {
    model.validate()?;
    if !(p > 0.0) {
        return Err(Error::InvalidConfig("parameter budget must be positive".into()));
    }
    let (kappa, nu) = model.kappa_nu();
    let n = math::powf(p / (model.a_arch * kappa), 1.0 / (3.0 - nu));
    Ok(WidthDepth { n, l: model.depth(n) })
}

/// Inverts any increasing `f` on `(0, inf)` by bracketing and bisection.
pub fn invert_increasing(f: impl Fn(f64) -> f64, target: f64) -> f64 {
    let (mut lo, mut hi) = (0.0, 1.0);
    while f(hi) < target {
        lo = hi;
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if f(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// `a_PL = (1 - nu) / ((3 - nu) beta)`.
pub fn scaling_exponent(nu: f64, beta: f64) -> f64 {
    (1.0 - nu) / ((3.0 - nu) * beta)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub p: f64,
    pub n: f64,
    pub l: f64,
    pub k: usize,
    pub delta: f64,
    /// Absent when `beta = 0`.
    pub envelope: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskCurve {
    pub points: Vec<CurvePoint>,
    /// `-slope` of `ln D` against `ln P` on the tail half of the grid.
    pub fitted_exponent: f64,
    pub analytic_exponent: f64,
}

impl RiskCurve {
    pub fn relative_error(&self) -> f64 {
        math::abs(self.fitted_exponent - self.analytic_exponent) / self.analytic_exponent
    }
}

/// Log-spaced grid of `count` points from `lo` to `hi`.
pub fn log_grid(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return alloc::vec![lo];
    }
    let (a, b) = (math::ln(lo), math::ln(hi));
    (0..count).map(|i| math::exp(a + (b - a) * i as f64 / (count - 1) as f64)).collect()
}

/// Runs `k = round(steps_per_depth * L(P))` recursion steps for every
/// budget and fits the power-law exponent on the tail half of the grid.
pub fn coupled_risk_curve(
    grid: &[f64],
    model: &CouplingModel,
    params: &ScalingParams,
    steps_per_depth: f64,
) -> Result<RiskCurve> {
    if grid.len() < 4 {
        return Err(Error::InsufficientFitData("need at least 4 grid points".into()));
    }
    let (lo, hi) = grid.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &p| (a.min(p), b.max(p)));
    if !(hi / lo >= 100.0) {
        return Err(Error::InsufficientFitData("grid must span at least 2 decades".into()));
    }
    let mut points = Vec::with_capacity(grid.len());
    for &p in grid {
        let wd = params_to_width(p, model)?;
        let k = math::round(steps_per_depth * wd.l) as usize;
        let traj = recursion_steps(params, k)?;
        let envelope = power_law_envelope(params, k as f64).ok();
        points.push(CurvePoint { p, n: wd.n, l: wd.l, k, delta: traj[k], envelope });
    }
    let mut sorted: Vec<&CurvePoint> = points.iter().collect();
    sorted.sort_by(|a, b| a.p.total_cmp(&b.p));
    let tail = &sorted[sorted.len() / 2..];
    let xs: Vec<f64> = tail.iter().map(|c| c.p).collect();
    let ys: Vec<f64> = tail.iter().map(|c| c.delta).collect();
    let slope = stats::log_log_slope(&xs, &ys)?;
    let (_, nu) = model.kappa_nu();
    Ok(RiskCurve { points, fitted_exponent: -slope, analytic_exponent: scaling_exponent(nu, params.beta) })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reliability {
    pub satisfied: bool,
    pub lhs: f64,
    pub rhs: f64,
    /// `rhs / lhs`.
    pub slack: f64,
}

/// `k^{(1+beta)/beta} <= constant * delta * N * min(M, K)`.
pub fn reliability_constraint(
    k: f64,
    n: f64,
    m: f64,
    kk: f64,
    beta: f64,
    delta: f64,
    constant: f64,
) -> Reliability {
    let lhs = math::powf(k, (1.0 + beta) / beta);
    let rhs = constant * delta * n * m.min(kk);
    Reliability { satisfied: lhs <= rhs, lhs, rhs, slack: rhs / lhs }
}
