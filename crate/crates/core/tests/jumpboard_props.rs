use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use resexp_core::data::{Generator, SyntheticTask, TaskSplits};
use resexp_core::jumpboard::{
    apply_step, block_direction, empirical_descent_direction, line_search_eta, select_by_loss,
    select_final_model, Choice, LineSearchConfig,
};
use resexp_core::netmodel::{evaluate_loss, NetworkSpec, NetworkState};
use resexp_core::train::{initial_state, sgd, SgdConfig, TrainScope};
use resexp_core::Tensor;

struct Instance {
    spec: NetworkSpec,
    splits: TaskSplits,
    block: NetworkState,
}

fn instance(seed: u64, depth: usize, width: usize, insertion: usize, regression: bool, bias: bool) -> Instance {
    let generator = if regression {
        Generator::TeacherRegression {
            input_dim: 6,
            output_dim: 3,
            teacher_depth: 1,
            teacher_width: 6,
            noise_std: 0.1,
        }
    } else {
        Generator::GaussianMixture { classes: 3, input_dim: 6, separation: 2.0 }
    };
    let task = SyntheticTask { generator, m_train: 96, k_test: 96, m_proxy: 96, m_estimation: 96, seed };
    let splits = task.generate().unwrap();
    let mut spec = task.network_spec(depth, width).unwrap();
    spec.insertion_layer = insertion.min(depth);
    let init = initial_state(&spec, seed).unwrap();
    let cfg = SgdConfig { learning_rate: 0.05, steps: 20, batch_size: 32, eval_every: 0 };
    let base = sgd(&spec, &init, &splits.train, &cfg, TrainScope::Base, seed).unwrap().state;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x55);
    let u = NetworkState::draw_block_features(&spec, &mut rng);
    let block = base.with_block(u, bias);
    Instance { spec, splits, block }
}

fn instance_strategy() -> impl Strategy<Value = Instance> {
    (any::<u64>(), 1usize..=3, 4usize..=10, 0usize..=3, any::<bool>(), any::<bool>())
        .prop_map(|(s, d, w, i, r, b)| instance(s, d, w, i, r, b))
}

impl std::fmt::Debug for Instance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Instance(depth {}, width {}, l* {})", self.spec.depth, self.spec.width, self.spec.insertion_layer)
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    #[test]
    fn block_direction_is_a_descent_direction(inst in instance_strategy()) {
        let Instance { spec, splits, block } = inst;
        let dir = block_direction(&spec, &block, &splits.train).unwrap();
        let h = 1e-6;
        let at = |eta: f64| evaluate_loss(&spec, &apply_step(&block, &dir.delta_v, eta).unwrap(), &splits.train).unwrap();
        let fd = (at(h) - at(-h)) / (2.0 * h);
        let expect = dir.directional_derivative();
        prop_assert!(fd < 0.0);
        prop_assert!((fd - expect).abs() <= 1e-3 * expect.abs(), "fd {} vs {}", fd, expect);
    }

    #[test]
    fn line_search_strictly_improves_train_loss(inst in instance_strategy()) {
        let Instance { spec, splits, block } = inst;
        let dir = block_direction(&spec, &block, &splits.train).unwrap();
        let ls = line_search_eta(&spec, &block, &dir, &splits.train, &LineSearchConfig::default()).unwrap();
        prop_assert!(!ls.degenerate);
        let old = evaluate_loss(&spec, &block, &splits.train).unwrap();
        let jump = evaluate_loss(&spec, &apply_step(&block, &dir.delta_v, ls.eta).unwrap(), &splits.train).unwrap();
        prop_assert_eq!(jump, ls.value);
        prop_assert!(old - jump > 0.0);
    }

    #[test]
    fn selected_model_is_never_worse_on_train(inst in instance_strategy(), ft_steps in 0usize..30) {
        let Instance { spec, splits, block } = inst;
        let dir = block_direction(&spec, &block, &splits.train).unwrap();
        let ls = line_search_eta(&spec, &block, &dir, &splits.train, &LineSearchConfig::default()).unwrap();
        let jump = apply_step(&block, &dir.delta_v, ls.eta).unwrap();
        let cfg = SgdConfig { learning_rate: 0.05, steps: ft_steps, batch_size: 16, eval_every: 0 };
        let alg = sgd(&spec, &block, &splits.train, &cfg, TrainScope::BlockOnly, 9).unwrap().state;
        let (new, sel) = select_final_model(&spec, Some(&alg), &jump, &splits.train).unwrap();
        let ev = |s: &NetworkState| evaluate_loss(&spec, s, &splits.train).unwrap();
        let (l_alg, l_jump, l_new) = (ev(&alg), ev(&jump), ev(&new));
        prop_assert!(l_new <= l_alg.min(l_jump));
        prop_assert!(sel.delta_erm >= 0.0);
        prop_assert_eq!(sel.delta_erm, l_jump - l_new);
    }
}

proptest! {
    #[test]
    fn selection_rule(a in -10.0f64..10.0, b in -10.0f64..10.0, tie in any::<bool>()) {
        let b = if tie { a } else { b };
        let s = select_by_loss(a, b);
        prop_assert!(s.delta_erm >= 0.0);
        let chosen = if s.choice == Choice::Alg { a } else { b };
        prop_assert_eq!(chosen, a.min(b));
        prop_assert_eq!(s.delta_erm, b - chosen);
        if a == b {
            prop_assert_eq!(s.choice, Choice::Alg);
        }
    }

    #[test]
    fn negating_gradients_negates_direction(
        n in 1usize..=12,
        width in 1usize..=6,
        feat in 1usize..=6,
        raw in prop::collection::vec(-2.0f64..2.0, 72),
        praw in prop::collection::vec(0.0f64..2.0, 72),
    ) {
        let q = Tensor::from_fn(n, width, |r, c| raw[(r * width + c) % 72]);
        let psi = Tensor::from_fn(n, feat, |r, c| praw[(r * feat + c) % 72]);
        let neg = q.scale(-1.0);
        match (empirical_descent_direction(&q, &psi), empirical_descent_direction(&neg, &psi)) {
            (Ok(a), Ok(b)) => {
                prop_assert_eq!(b.c, a.c.scale(-1.0));
                prop_assert_eq!(b.norm, a.norm);
            }
            (Err(_), Err(_)) => {}
            _ => prop_assert!(false, "sign flip changed degeneracy"),
        }
    }

    #[test]
    fn direction_matches_outer_product_average(
        n in 1usize..=8,
        width in 1usize..=5,
        feat in 1usize..=5,
        raw in prop::collection::vec(-2.0f64..2.0, 40),
        praw in prop::collection::vec(0.0f64..2.0, 40),
    ) {
        let q = Tensor::from_fn(n, width, |r, c| raw[(r * width + c) % 40]);
        let psi = Tensor::from_fn(n, feat, |r, c| praw[(r * feat + c) % 40]);
        let expect = Tensor::from_fn(width, feat, |a, b| {
            (0..n).map(|i| q.get(i, a) * psi.get(i, b)).sum::<f64>() / n as f64
        });
        match empirical_descent_direction(&q, &psi) {
            Ok(d) => {
                for (x, y) in d.c.data().iter().zip(expect.data()) {
                    prop_assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()));
                }
                prop_assert_eq!(d.delta_v, d.c.scale(-1.0));
            }
            Err(_) => prop_assert!(expect.frobenius_norm() <= 1e-10 * (1.0 + 1e-9)),
        }
    }
}
