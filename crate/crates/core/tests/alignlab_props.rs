use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use resexp_core::alignlab::{
    covariance_diagnostics, simulate_alignment, alignment_bound, AlignmentConfig, AlignmentSampler,
    SigmaModel,
};
use resexp_core::Tensor;

fn config() -> impl Strategy<Value = AlignmentConfig> {
    (1usize..=16, 1usize..=64, 1usize..=64, 0.05f64..1.0, 0.1f64..4.0, 1u64..5000, any::<u64>())
        .prop_map(|(n, m, k, alpha, tau_sq, trials, seed)| {
            AlignmentConfig::uniformly_active(n, m, k, alpha, tau_sq, trials, seed)
        })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    #[test]
    fn bound_terms_are_positive(cfg in config(), ramp in 0.0f64..1.0) {
        let mut cfg = cfg;
        let tau = cfg.tau_sq;
        cfg.sigma = SigmaModel::Diagonal {
            variances: (0..cfg.n).map(|j| tau * (ramp + (1.0 - ramp) * j as f64 / cfg.n as f64)).collect(),
        };
        let b = alignment_bound(&cfg).unwrap();
        prop_assert!(b.train_term > 0.0 && b.test_term > 0.0 && b.mixed_term > 0.0);
        prop_assert_eq!(b.total, b.train_term + b.test_term + b.mixed_term);
    }

    #[test]
    fn same_seed_same_counts(cfg in config()) {
        let a = simulate_alignment(&cfg).unwrap();
        let b = simulate_alignment(&cfg).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn chunk_order_does_not_change_counts(cfg in config(), shuffle_seed in any::<u64>()) {
        let mut cfg = cfg;
        cfg.trials = cfg.trials * 3 + 2048;
        let s = AlignmentSampler::new(&cfg).unwrap();
        let mut order: Vec<u64> = (0..s.num_chunks()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));
        // Split the shuffled chunks over two "workers" and add their totals.
        let (left, right) = order.split_at(order.len() / 2);
        let total: u64 = left.iter().map(|&c| s.chunk_failures(c)).sum::<u64>()
            + right.iter().map(|&c| s.chunk_failures(c)).sum::<u64>();
        prop_assert_eq!(s.finish(total), simulate_alignment(&cfg).unwrap());
    }

    #[test]
    fn equicorrelated_noise_is_accepted_within_caps(n in 2usize..=8, rho in 0.0f64..0.9, tau_sq in 0.1f64..2.0) {
        let matrix = Tensor::from_fn(n, n, |i, j| if i == j { tau_sq } else { rho * tau_sq });
        let c_sigma = 1.0 + rho * (n as f64 - 1.0);
        let mut cfg = AlignmentConfig::uniformly_active(n, 8, 8, 0.5, tau_sq, 256, 3);
        cfg.sigma = SigmaModel::Full { matrix };
        cfg.c_sigma = c_sigma * (1.0 + 1e-9);
        prop_assert!(simulate_alignment(&cfg).is_ok());
        cfg.c_sigma = c_sigma * 0.9;
        prop_assert!(simulate_alignment(&cfg).is_err());
    }

    #[test]
    fn duplicated_samples_keep_covariance_up_to_denominator(
        m in 2usize..=12,
        n in 2usize..=6,
        raw in prop::collection::vec(-2.0f64..2.0, 72),
    ) {
        let q = Tensor::from_fn(m, n, |r, c| raw[r * 6 + c]);
        let doubled = Tensor::vstack(&[q.clone(), q.clone()]).unwrap();
        let a = covariance_diagnostics(&q, usize::MAX, 0, 1).unwrap();
        let b = covariance_diagnostics(&doubled, usize::MAX, 0, 1).unwrap();
        // Unbiased estimates: S' (2m - 1) = 2 S (m - 1).
        let adjust = 2.0 * (m as f64 - 1.0) / (2.0 * m as f64 - 1.0);
        for (x, y) in a.sigma_diag.iter().zip(&b.sigma_diag) {
            prop_assert!((y - x * adjust).abs() <= 1e-12 * (1.0 + x.abs()));
        }
        for (x, y) in a.offdiag.iter().zip(&b.offdiag) {
            prop_assert_eq!((x.j, x.k), (y.j, y.k));
            prop_assert!((y.value - x.value * adjust).abs() <= 1e-12 * (1.0 + x.value.abs()));
        }
    }
}
