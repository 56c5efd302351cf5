use proptest::prelude::*;

use resexp_core::certify::{
    data_requirement, eps_gen_norm, hoeffding_failure, route_b_chain, route_b_verdict, BoundInputs,
    ComplexityTerms, Verdict,
};
use resexp_core::jumpboard::MarginReport;

fn terms() -> impl Strategy<Value = ComplexityTerms> {
    (0.1f64..10.0, 0.5f64..5.0, 1.0f64..1e5, 0.1f64..10.0, 1.0f64..20.0, 1e-3f64..1e6).prop_map(
        |(b_ell, l_ell, d, b_bar, depth, lambda_max)| ComplexityTerms {
            b_ell,
            l_ell,
            d: d.round(),
            b_bar,
            depth: depth.round(),
            lambda_max,
        },
    )
}

fn eps_at(t: &ComplexityTerms, m: u64, delta: f64) -> f64 {
    BoundInputs { terms: *t, m, delta, rho: None }.eps_gen_norm()
}

proptest! {
    #[test]
    fn eps_is_nonincreasing_in_sample_size(t in terms(), m in 1u64..1_000_000, extra in 1u64..1_000_000, delta in 1e-6f64..0.99) {
        prop_assert!(eps_at(&t, m + extra, delta) <= eps_at(&t, m, delta));
    }

    #[test]
    fn eps_grows_with_every_complexity_term(
        t in terms(),
        m in 1u64..1_000_000,
        delta in 1e-6f64..0.99,
        factor in 1.0f64..10.0,
        which in 0usize..4,
    ) {
        let mut u = t;
        match which {
            0 => u.d = (t.d * factor).round(),
            1 => u.lambda_max = t.lambda_max * factor,
            2 => u.b_bar = t.b_bar * factor,
            _ => {}
        }
        let smaller_delta = if which == 3 { delta / factor } else { delta };
        let rho = 1.0 / (m as f64).sqrt();
        prop_assert!(eps_gen_norm(&u, m as f64, smaller_delta, rho) >= eps_gen_norm(&t, m as f64, delta, rho));
    }

    #[test]
    fn hoeffding_is_a_probability_scale(
        k in 1.0f64..1e6,
        b in 0.01f64..10.0,
        log_exponent in -15.0f64..2.8,
        zero in prop::bool::weighted(0.1),
    ) {
        // Exponents in [1e-15, ~630] keep exp(-x) strictly inside (0, 1).
        let delta_r = if zero { 0.0 } else { b * (8.0 * 10f64.powf(log_exponent) / k).sqrt() };
        let h = hoeffding_failure(k, delta_r, b);
        prop_assert!(h > 0.0 && h <= 6.0);
        prop_assert_eq!(h == 6.0, delta_r == 0.0);
    }

    #[test]
    fn data_requirement_is_minimal(t in terms(), delta in 1e-3f64..0.5, m0 in 1u64..1_000_000_000) {
        let target = eps_at(&t, m0, delta);
        let m = data_requirement(target, delta, &t).unwrap();
        prop_assert!(m <= m0);
        prop_assert!(eps_at(&t, m, delta) <= target);
        if m > 1 {
            prop_assert!(eps_at(&t, m - 1, delta) > target);
        }
    }

    #[test]
    fn route_b_strict_implies_test_improvement(
        test in prop::array::uniform3(0.0f64..3.0),
        gaps in prop::array::uniform3(-1.0f64..1.0),
        eps_m in 0.0f64..0.2,
        eps_k in 0.0f64..0.2,
        new_from_jump in any::<bool>(),
    ) {
        let tt = eps_m + eps_k;
        let mut test = test;
        let mut train = [0.0; 3];
        for i in 0..3 {
            train[i] = test[i] + gaps[i] * tt;
        }
        // The selection rule never picks a model worse on train than the jumpboard.
        if new_from_jump || train[2] > train[1] {
            train[2] = train[1];
            test[2] = test[1];
        }
        let r = MarginReport::from_losses(train, test);
        let verdict = route_b_verdict(r.delta_r_test, r.delta_erm, eps_m, eps_k);
        let chain = route_b_chain(&r, eps_m, eps_k);
        prop_assert_eq!(chain.len(), 5);
        prop_assert!(chain.iter().all(|s| s.holds), "{:?}", chain);
        if verdict == Verdict::CertifiedStrict {
            prop_assert!(r.l_test_new < r.l_test_old);
        }
    }

    #[test]
    fn verdict_ordering(gain in -1.0f64..1.0, cost in -1.0f64..1.0) {
        let v = Verdict::compare(gain, cost);
        prop_assert_eq!(v == Verdict::CertifiedStrict, gain > cost);
        prop_assert_eq!(v == Verdict::NotCertified, gain < cost);
        prop_assert_eq!(Verdict::compare(gain, gain), Verdict::CertifiedNonWorsening);
    }
}
