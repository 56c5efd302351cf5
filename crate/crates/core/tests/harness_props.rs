use proptest::prelude::*;

use resexp_core::certify::Verdict;
use resexp_core::data::{Generator, SyntheticTask};
use resexp_core::harness::{
    aggregate_joint, expansion_pipeline, ExpansionConfig, FinetuneConfig, JointRow, SweepConfig,
};
use resexp_core::jumpboard::Choice;
use resexp_core::netmodel::evaluate_loss;
use resexp_core::train::{train_base, SgdConfig, TrainScope};

fn small_task(seed: u64, regression: bool) -> SyntheticTask {
    let generator = if regression {
        Generator::TeacherRegression { input_dim: 5, output_dim: 2, teacher_depth: 1, teacher_width: 5, noise_std: 0.1 }
    } else {
        Generator::GaussianMixture { classes: 3, input_dim: 5, separation: 2.0 }
    };
    SyntheticTask { generator, m_train: 128, k_test: 128, m_proxy: 256, m_estimation: 256, seed }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 12, ..ProptestConfig::default() })]

    #[test]
    fn pipeline_losses_match_reevaluation(
        seed in any::<u64>(),
        depth in 1usize..=3,
        width in 4usize..=8,
        regression in any::<bool>(),
        bias in any::<bool>(),
        ft_steps in 0usize..40,
    ) {
        let task = small_task(seed, regression);
        let splits = task.generate().unwrap();
        let spec = task.network_spec(depth, width).unwrap();
        let sgd = SgdConfig { learning_rate: 0.05, steps: 40, batch_size: 32, eval_every: 0 };
        let base = train_base(&spec, &splits.train, &sgd, seed).unwrap().state;
        let cfg = ExpansionConfig {
            bias_feature: bias,
            finetune: Some(FinetuneConfig {
                sgd: SgdConfig { steps: ft_steps, ..sgd },
                scope: TrainScope::BlockOnly,
            }),
            ..ExpansionConfig::default()
        };
        let out = expansion_pipeline(&spec, &splits, &base, &cfg, seed ^ 7).unwrap();
        let ev = |s, d| evaluate_loss(&spec, s, d).unwrap();
        let m = &out.margins;
        prop_assert_eq!(m.l_train_old, ev(&out.old, &splits.train));
        prop_assert_eq!(m.l_train_jump, ev(&out.jump, &splits.train));
        prop_assert_eq!(m.l_train_new, ev(&out.new, &splits.train));
        prop_assert_eq!(m.l_test_old, ev(&out.old, &splits.test));
        prop_assert_eq!(m.l_test_jump, ev(&out.jump, &splits.test));
        prop_assert_eq!(m.l_test_new, ev(&out.new, &splits.test));
        prop_assert!(m.delta_erm >= 0.0);
        prop_assert!(!out.degenerate_direction);
        prop_assert!(m.delta_train_s > 0.0);
        prop_assert!(m.l_train_new <= m.l_train_jump);
        if out.selection.choice == Choice::Jump {
            prop_assert_eq!(&out.new, &out.jump);
        }
        let c = &out.certificate;
        prop_assert_eq!(c.rederive(), [c.verdict_a, c.verdict_b, c.verdict_pop]);
        if c.verdict_b == Verdict::CertifiedStrict {
            prop_assert!(m.l_test_new < m.l_test_old);
        }
    }
}

#[test]
fn sweep_grid_is_factorial_and_deduplicated() {
    let cfg = SweepConfig {
        depths: vec![1, 2],
        widths: vec![4, 8, 16],
        seeds: vec![3, 1, 3],
        sgd: SgdConfig::default(),
        insertion: resexp_core::harness::InsertionPolicy::LastLayer,
    };
    let cells = cfg.cells();
    assert_eq!(cells.len(), 2 * 3 * 2);
    assert_eq!(cfg.unique_seeds(), vec![3, 1]);
    assert_eq!((cells[0].depth, cells[0].width, cells[0].seed), (1, 4, 3));
    assert_eq!((cells[1].depth, cells[1].width, cells[1].seed), (1, 4, 1));
}

#[test]
fn duplicated_rows_keep_mean_and_std() {
    let rows: Vec<JointRow> = [0.5, 0.7, 0.9]
        .iter()
        .enumerate()
        .map(|(i, &l)| JointRow { depth: 2, width: 8, seed: i as u64, train_loss: l, test_loss: l + 0.1 })
        .collect();
    let twice: Vec<JointRow> = rows.iter().chain(&rows).cloned().collect();
    let (a, b) = (aggregate_joint(&rows), aggregate_joint(&twice));
    assert!((a[0].train_mean - b[0].train_mean).abs() < 1e-15);
    assert!((a[0].test_std - b[0].test_std).abs() < 1e-15);
}
