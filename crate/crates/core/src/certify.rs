//! Closed-form generalization bounds and improvement certificates.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jumpboard::MarginReport;
use crate::math;
use crate::netmodel::ArchConstants;

/// The scalar constants that enter the covering-number bound.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexityTerms {
    pub b_ell: f64,
    pub l_ell: f64,
    pub d: f64,
    pub b_bar: f64,
    pub depth: f64,
    pub lambda_max: f64,
}

impl From<&ArchConstants> for ComplexityTerms {
    fn from(c: &ArchConstants) -> Self {
        ComplexityTerms {
            b_ell: c.b_ell,
            l_ell: c.l_ell,
            d: c.d as f64,
            b_bar: c.b_bar,
            depth: c.depth as f64,
            lambda_max: c.lambda_max,
        }
    }
}

impl ComplexityTerms {
    /// `2 b_bar L L_ell Lambda_max`, the numerator inside every logarithm.
    fn scale(&self) -> f64 {
        2.0 * self.b_bar * self.depth * self.l_ell * self.lambda_max
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    pub terms: ComplexityTerms,
    pub m: u64,
    pub delta: f64,
    /// Covering accuracy; `None` means `m^{-1/2}`.
    pub rho: Option<f64>,
}

impl BoundInputs {
    pub fn new(consts: &ArchConstants, m: u64, delta: f64) -> Result<Self> {
        let b = BoundInputs { terms: consts.into(), m, delta, rho: None };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::InvalidConfig("sample size must be at least 1".into()));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::InvalidConfig("delta must lie in (0, 1)".into()));
        }
        if let Some(r) = self.rho {
            if !(r > 0.0) {
                return Err(Error::InvalidConfig("rho must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn rho(&self) -> f64 {
        self.rho.unwrap_or_else(|| 1.0 / math::sqrt(self.m as f64))
    }

    pub fn rademacher(&self) -> f64 {
        rademacher_bound(&self.terms, self.m as f64, self.rho())
    }

    pub fn eps_gen_norm(&self) -> f64 {
        eps_gen_norm(&self.terms, self.m as f64, self.delta, self.rho())
    }
}

/// `d ln(2b/eps + 1)`.
pub fn covering_number_log(b: f64, eps: f64, d: f64) -> f64 {
    d * math::ln(2.0 * b / eps + 1.0)
}

/// `B_ell sqrt(2 d ln(2 b_bar L L_ell Lambda_max / eps0 + 1) / m) + eps0`.
pub fn rademacher_bound(t: &ComplexityTerms, m: f64, eps0: f64) -> f64 {
    t.b_ell * math::sqrt(2.0 * t.d * math::ln(t.scale() / eps0 + 1.0) / m) + eps0
}

/// The uniform deviation bound:
/// `2 B_ell sqrt(2 d ln(2 b_bar L L_ell Lambda_max / rho + 1) / m) + 2 rho
///  + 3 B_ell sqrt(ln(2/delta) / (2m))`.
pub fn eps_gen_norm(t: &ComplexityTerms, m: f64, delta: f64, rho: f64) -> f64 {
    2.0 * rademacher_bound(t, m, rho) + 3.0 * t.b_ell * math::sqrt(math::ln(2.0 / delta) / (2.0 * m))
}

/// `ln(2 b_bar L L_ell Lambda_max sqrt(m) + 1)`.
pub fn gamma_arch(t: &ComplexityTerms, m: f64) -> f64 {
    math::ln(t.scale() * math::sqrt(m) + 1.0)
}

/// `6 exp(-K Delta_R^2 / (8 B_ell^2))`.
pub fn hoeffding_failure(k: f64, delta_r: f64, b_ell: f64) -> f64 {
    6.0 * math::exp(-k * delta_r * delta_r / (8.0 * b_ell * b_ell))
}

const M_MAX: u64 = 1 << 60;

/// Smallest `m` with `eps_gen_norm(m) <= target` at `rho = m^{-1/2}`.
///
/// With that `rho` every term decreases in `m`, so doubling brackets the
/// answer and bisection finds it.
pub fn data_requirement(target: f64, delta: f64, terms: &ComplexityTerms) -> Result<u64> {
    if !(target > 0.0) {
        return Err(Error::InvalidConfig("target accuracy must be positive".into()));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidConfig("delta must lie in (0, 1)".into()));
    }
    let eps = |m: u64| {
        let mf = m as f64;
        eps_gen_norm(terms, mf, delta, 1.0 / math::sqrt(mf))
    };
    if eps(M_MAX) > target {
        return Err(Error::Unsatisfiable { target });
    }
    let mut hi = 1u64;
    while eps(hi) > target {
        hi *= 2;
    }
    if hi == 1 {
        return Ok(1);
    }
    let mut lo = hi / 2; // eps(lo) > target
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if eps(mid) <= target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    CertifiedStrict,
    CertifiedNonWorsening,
    NotCertified,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::CertifiedStrict => "certified-strict",
            Verdict::CertifiedNonWorsening => "certified-non-worsening",
            Verdict::NotCertified => "not-certified",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "certified-strict" => Some(Verdict::CertifiedStrict),
            "certified-non-worsening" => Some(Verdict::CertifiedNonWorsening),
            "not-certified" => Some(Verdict::NotCertified),
            _ => None,
        }
    }

    /// Strict if `gain > cost`, non-worsening if `gain == cost`.
    pub fn compare(gain: f64, cost: f64) -> Verdict {
        if gain > cost {
            Verdict::CertifiedStrict
        } else if gain >= cost {
            Verdict::CertifiedNonWorsening
        } else {
            Verdict::NotCertified
        }
    }
}

/// Test-level route through population risk.
pub fn route_a_verdict(delta_r: f64, delta_erm: f64, eps_m: f64) -> Verdict {
    Verdict::compare(delta_r / 2.0 + delta_erm, 2.0 * eps_m)
}

/// Direct train/test route with the random test margin.
pub fn route_b_verdict(delta_r_test: f64, delta_erm: f64, eps_m: f64, eps_k: f64) -> Verdict {
    Verdict::compare(delta_r_test + delta_erm, 2.0 * (eps_m + eps_k))
}

/// Population-risk statement.
pub fn population_verdict(delta_r: f64, delta_erm: f64, eps_m: f64) -> Verdict {
    Verdict::compare(delta_r + delta_erm, 2.0 * eps_m)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    Le,
    Eq,
}

/// One arrow of an inequality chain: `lhs <= rhs` (or `=`) on logged values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditStep {
    pub route: String,
    pub label: String,
    pub lhs: f64,
    pub relation: Relation,
    pub rhs: f64,
    pub holds: bool,
}

// Equalities are rebuilt from logged sums, so they hold up to rounding.
const AUDIT_TOL: f64 = 1e-12;

fn step(route: &str, label: &str, lhs: f64, relation: Relation, rhs: f64) -> AuditStep {
    let tol = AUDIT_TOL * (1.0 + math::abs(lhs).max(math::abs(rhs)));
    let holds = match relation {
        Relation::Le => lhs <= rhs + tol,
        Relation::Eq => math::abs(lhs - rhs) <= tol,
    };
    AuditStep { route: route.into(), label: label.into(), lhs, relation, rhs, holds }
}

/// Route B: five arrows from the uniform train/test comparison to the
/// final test inequality, each evaluated on the measured losses.
pub fn route_b_chain(r: &MarginReport, eps_m: f64, eps_k: f64) -> Vec<AuditStep> {
    let tt = eps_m + eps_k;
    let gap = |a: f64, b: f64| math::abs(a - b);
    let worst_gap = gap(r.l_train_old, r.l_test_old)
        .max(gap(r.l_train_jump, r.l_test_jump))
        .max(gap(r.l_train_new, r.l_test_new));
    alloc::vec![
        step("B", "max |L_train - L_test| over old, jump, new <= eps_M + eps_K", worst_gap, Relation::Le, tt),
        step("B", "L_train(jump) <= L_test(jump) + eps_M + eps_K", r.l_train_jump, Relation::Le, r.l_test_jump + tt),
        step("B", "L_train(new) <= L_train(jump) - delta_ERM", r.l_train_new, Relation::Le, r.l_train_jump - r.delta_erm),
        step("B", "L_test(new) <= L_train(new) + eps_M + eps_K", r.l_test_new, Relation::Le, r.l_train_new + tt),
        step(
            "B",
            "L_test(new) <= L_test(old) - delta_R_test - delta_ERM + 2(eps_M + eps_K)",
            r.l_test_new,
            Relation::Le,
            r.l_test_old - r.delta_r_test - r.delta_erm + 2.0 * tt,
        ),
    ]
}

/// Risks of the population-route models, estimated on a held-out proxy set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PopulationRecord {
    pub r_old: f64,
    pub r_jump: f64,
    pub r_new: f64,
    pub l_train_jump: f64,
    pub l_train_new: f64,
    pub l_test_old: f64,
    pub l_test_new: f64,
}

impl PopulationRecord {
    pub fn delta_r(&self) -> f64 {
        self.r_old - self.r_jump
    }

    pub fn delta_erm(&self) -> f64 {
        self.l_train_jump - self.l_train_new
    }
}

/// Route A: population risk to train loss and back, then the test-level
/// statement that also pays the Hoeffding transfer.
pub fn route_a_chain(p: &PopulationRecord, eps_m: f64) -> Vec<AuditStep> {
    let (dr, de) = (p.delta_r(), p.delta_erm());
    alloc::vec![
        step("A", "R(jump) = R(old) - delta_R", p.r_jump, Relation::Eq, p.r_old - dr),
        step("A", "L_train(jump) <= R(jump) + eps_M", p.l_train_jump, Relation::Le, p.r_jump + eps_m),
        step("A", "L_train(new) = L_train(jump) - delta_ERM", p.l_train_new, Relation::Eq, p.l_train_jump - de),
        step("A", "R(new) <= L_train(new) + eps_M", p.r_new, Relation::Le, p.l_train_new + eps_m),
        step("A", "R(new) <= R(old) - delta_R - delta_ERM + 2 eps_M", p.r_new, Relation::Le, p.r_old - dr - de + 2.0 * eps_m),
        step("A", "L_test(new) <= L_test(old) - delta_R/2 - delta_ERM + 2 eps_M", p.l_test_new, Relation::Le, p.l_test_old - dr / 2.0 - de + 2.0 * eps_m),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertificateReport {
    pub eps_m: f64,
    pub eps_k: f64,
    pub delta: f64,
    pub hoeffding_term: f64,
    pub route_a_lhs: f64,
    pub route_a_rhs: f64,
    pub route_b_lhs: f64,
    pub route_b_rhs: f64,
    pub pop_lhs: f64,
    pub pop_rhs: f64,
    pub verdict_a: Verdict,
    pub verdict_b: Verdict,
    pub verdict_pop: Verdict,
    pub audit_chain: Vec<AuditStep>,
}

impl CertificateReport {
    /// Recomputes the three verdicts from the stored numbers.
    pub fn rederive(&self) -> [Verdict; 3] {
        [
            Verdict::compare(self.route_a_lhs, self.route_a_rhs),
            Verdict::compare(self.route_b_lhs, self.route_b_rhs),
            Verdict::compare(self.pop_lhs, self.pop_rhs),
        ]
    }

    pub fn audit_holds(&self) -> bool {
        self.audit_chain.iter().all(|s| s.holds)
    }
}

/// Evaluates all routes. Without a population record the population
/// margin is taken as zero and only the empirical route has a chain.
pub fn certify(
    margins: &MarginReport,
    population: Option<&PopulationRecord>,
    eps_m: f64,
    eps_k: f64,
    delta: f64,
    k_test: f64,
    b_ell: f64,
) -> CertificateReport {
    let (dr, de_pop) = population.map_or((0.0, 0.0), |p| (p.delta_r(), p.delta_erm()));
    let mut audit_chain = route_b_chain(margins, eps_m, eps_k);
    if let Some(p) = population {
        audit_chain.extend(route_a_chain(p, eps_m));
    }
    let route_a_lhs = dr / 2.0 + de_pop;
    let route_b_lhs = margins.delta_r_test + margins.delta_erm;
    let pop_lhs = dr + de_pop;
    CertificateReport {
        eps_m,
        eps_k,
        delta,
        hoeffding_term: hoeffding_failure(k_test, dr.max(0.0), b_ell),
        route_a_lhs,
        route_a_rhs: 2.0 * eps_m,
        route_b_lhs,
        route_b_rhs: 2.0 * (eps_m + eps_k),
        pop_lhs,
        pop_rhs: 2.0 * eps_m,
        verdict_a: route_a_verdict(dr, de_pop, eps_m),
        verdict_b: route_b_verdict(margins.delta_r_test, margins.delta_erm, eps_m, eps_k),
        verdict_pop: population_verdict(dr, de_pop, eps_m),
        audit_chain,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * b.abs().max(1.0)
    }

    fn toy(d: f64, depth: f64) -> ComplexityTerms {
        ComplexityTerms { b_ell: 1.0, l_ell: 1.0, d, b_bar: 1.0, depth, lambda_max: 1.0 }
    }

    #[test]
    fn covering_examples() {
        assert!(close(covering_number_log(1.0, 2.0, 1.0), 2f64.ln(), 1e-15));
        assert!(close(covering_number_log(1.0, 1.0, 3.0), 3.0 * 3f64.ln(), 1e-15));
        assert!(covering_number_log(1.0, 1e300, 5.0) < 1e-290);
    }

    #[test]
    fn rademacher_example() {
        let r = rademacher_bound(&toy(10.0, 1.0), 100.0, 0.1);
        assert!(close(r, (20.0 * 21f64.ln() / 100.0).sqrt() + 0.1, 1e-15));
        assert!((r - 0.8803).abs() < 1e-4);
    }

    #[test]
    fn eps_gen_example() {
        let e = eps_gen_norm(&toy(10.0, 2.0), 100.0, 0.1, 0.1);
        assert!((e - 2.2908).abs() < 1e-4);
    }

    #[test]
    fn hoeffding_examples() {
        assert!(close(hoeffding_failure(100.0, 0.4, 1.0), 6.0 * (-2f64).exp(), 1e-15));
        assert_eq!(hoeffding_failure(100.0, 0.0, 1.0), 6.0);
        assert_eq!(hoeffding_failure(1e300, 1.0, 1.0), 0.0);
    }

    #[test]
    fn verdict_examples() {
        assert_eq!(route_a_verdict(0.4, 0.1, 0.1), Verdict::CertifiedStrict);
        assert_eq!(route_a_verdict(0.0, 0.0, 0.1), Verdict::NotCertified);
        assert_ne!(route_a_verdict(0.5, 0.0, 0.125), Verdict::CertifiedStrict);
        assert_eq!(route_b_verdict(0.2, 0.05, 0.05, 0.05), Verdict::CertifiedStrict);
        assert_eq!(route_b_verdict(-0.1, 1.0, 0.05, 0.05), Verdict::CertifiedStrict);
        assert_eq!(population_verdict(0.3, 0.0, 0.1), Verdict::CertifiedStrict);
        assert_eq!(population_verdict(0.0, 0.0, 0.0), Verdict::CertifiedNonWorsening);
        assert_eq!(population_verdict(0.0, 0.0, 0.1), Verdict::NotCertified);
        assert_eq!(population_verdict(1e-9, 0.0, 0.0), Verdict::CertifiedStrict);
    }

    #[test]
    fn data_requirement_matches_scan() {
        let t = toy(10.0, 1.0);
        let m = data_requirement(0.5, 0.1, &t).unwrap();
        let eps = |m: u64| eps_gen_norm(&t, m as f64, 0.1, 1.0 / (m as f64).sqrt());
        assert!(eps(m) <= 0.5 && eps(m - 1) > 0.5);
        let witness = eps(1000);
        assert!(data_requirement(witness, 0.1, &t).unwrap() <= 1000);
        assert!(matches!(data_requirement(1e-30, 0.1, &t), Err(Error::Unsatisfiable { .. })));
    }

    #[test]
    fn degenerate_report_chain_holds() {
        let r = MarginReport::from_losses([0.7, 0.7, 0.7], [0.72, 0.72, 0.72]);
        let c = certify(&r, None, 3.0, 3.0, 0.1, 100.0, 2.0);
        assert_eq!(c.verdict_b, Verdict::NotCertified);
        assert!(c.audit_holds());
        assert_eq!(c.rederive(), [c.verdict_a, c.verdict_b, c.verdict_pop]);
    }
}
