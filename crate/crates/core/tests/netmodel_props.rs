use proptest::prelude::*;

use resexp_core::linalg::spectral_norm;
use resexp_core::netmodel::{
    compute_arch_constants, forward_decomposed, lipschitz_bound, project_matrix, project_norms,
    record_forward, NetworkSpec, NetworkState, NormKind,
};
use resexp_core::tape::RowNorm;
use resexp_core::tensor::norm;
use resexp_core::train::initial_state;
use resexp_core::{Tape, Tensor};

fn vector(n: usize, scale: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, n).prop_map(move |v| v.into_iter().map(|x| x * scale).collect())
}

fn row_norm() -> impl Strategy<Value = (RowNorm, usize)> {
    (1usize..=12, any::<bool>(), -8.0f64..0.0).prop_flat_map(|(n, layer, log_eps)| {
        prop::collection::vec(-3.0f64..3.0, n).prop_map(move |gamma| {
            let eps = 10f64.powf(log_eps);
            let rn = if layer { RowNorm::Layer { gamma, eps } } else { RowNorm::Rms { gamma, eps } };
            (rn, n)
        })
    })
}

fn gamma_max(rn: &RowNorm) -> f64 {
    match rn {
        RowNorm::Rms { gamma, .. } | RowNorm::Layer { gamma, .. } => {
            gamma.iter().map(|g| g.abs()).fold(0.0, f64::max)
        }
        RowNorm::Affine { .. } => unreachable!(),
    }
}

fn spec_strategy() -> impl Strategy<Value = (NetworkSpec, u64)> {
    (0usize..=3, 2usize..=8, 1usize..=6, 1usize..=4, 1usize..=8, any::<bool>(), any::<u64>())
        .prop_flat_map(|(depth, width, input_dim, output_dim, branch, layer, seed)| {
            (
                prop::collection::vec(0.2f64..2.0, width),
                0.3f64..2.0,
                0.5f64..6.0,
                -6.0f64..-1.0,
                0..=depth,
            )
                .prop_map(move |(gamma, s_cap, f_cap, log_eps, ins)| {
                    let mut spec = NetworkSpec::rms_default(depth, width, input_dim, output_dim);
                    spec.branch_width = branch;
                    spec.gamma = gamma;
                    spec.spectral_cap = s_cap;
                    spec.frobenius_cap = f_cap;
                    spec.eps_eng = 10f64.powf(log_eps);
                    spec.insertion_layer = ins;
                    spec.input_bound = 4.0;
                    if layer {
                        spec.norm_kind = NormKind::LayernormEps;
                    }
                    (spec, seed)
                })
        })
}

fn inputs(spec: &NetworkSpec, rows: usize, raw: &[f64]) -> Tensor {
    let d = spec.input_dim;
    let mut x = Tensor::from_fn(rows, d, |r, c| raw[(r * d + c) % raw.len()] * (1.0 + r as f64));
    for r in 0..rows {
        let n = norm(x.row(r));
        if n > spec.input_bound {
            let k = spec.input_bound / n;
            x.row_mut(r).iter_mut().for_each(|v| *v *= k);
        }
    }
    x
}

/// `N_l(z + W2 relu(W1 z))` for one row, computed without the tape.
fn layer_map(spec: &NetworkSpec, state: &NetworkState, l: usize, z: &[f64]) -> Vec<f64> {
    let layer = &state.layers[l];
    let zt = Tensor::matrix(1, z.len(), z.to_vec()).unwrap();
    let act = zt.matmul_t(&layer.w1).unwrap().map(|v| v.max(0.0));
    let branch = act.matmul_t(&layer.w2).unwrap();
    let sum: Vec<f64> = z.iter().zip(branch.data()).map(|(a, b)| a + b).collect();
    state.norm_map(spec, l).apply(&sum)
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn perturb(w: &Tensor, noise: &[f64], scale: f64) -> Tensor {
    let mut out = w.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v += scale * noise[i % noise.len()];
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 256, ..ProptestConfig::default() })]

    #[test]
    fn post_norm_output_is_bounded(
        (rn, n) in row_norm(),
        raw in prop::collection::vec(-1.0f64..1.0, 12),
        log_scale in -12.0f64..12.0,
    ) {
        let x: Vec<f64> = raw[..n].iter().map(|v| v * 10f64.powf(log_scale)).collect();
        let z = rn.apply(&x);
        prop_assert!(norm(&z) <= gamma_max(&rn) * (n as f64).sqrt() + 1e-9);
    }

    #[test]
    fn norm_difference_quotient_within_certified_constant(
        (rn, n) in row_norm(),
        a in vector(12, 1.0),
        dir in vector(12, 1.0),
        log_scale in -6.0f64..3.0,
        log_step in -9.0f64..1.0,
    ) {
        let s = 10f64.powf(log_scale);
        let a: Vec<f64> = a[..n].iter().map(|v| v * s).collect();
        let b: Vec<f64> = a.iter().zip(&dir[..n]).map(|(x, d)| x + d * 10f64.powf(log_step)).collect();
        let d_in = dist(&a, &b);
        prop_assume!(d_in > 0.0);
        let q = dist(&rn.apply(&a), &rn.apply(&b)) / d_in;
        prop_assert!(q <= lipschitz_bound(&rn) * (1.0 + 1e-9), "quotient {} bound {}", q, lipschitz_bound(&rn));
    }

    #[test]
    fn hidden_states_respect_norm_bound(
        (spec, seed) in spec_strategy(),
        raw in prop::collection::vec(-4.0f64..4.0, 24),
    ) {
        let state = initial_state(&spec, seed).unwrap();
        let x = inputs(&spec, 4, &raw);
        let mut tape = Tape::new();
        let g = record_forward(&mut tape, &spec, &state, &x).unwrap();
        let bound = spec.gamma_max() * (spec.width as f64).sqrt() + 1e-9;
        for &h in &g.hidden[1..] {
            let v = tape.value(h);
            for r in 0..v.rows() {
                prop_assert!(norm(v.row(r)) <= bound);
            }
        }
    }

    #[test]
    fn layer_map_is_lipschitz(
        (spec, seed) in spec_strategy(),
        u in vector(8, 3.0),
        dir in vector(8, 1.0),
        log_step in -6.0f64..1.0,
    ) {
        prop_assume!(spec.depth > 0);
        let state = initial_state(&spec, seed).unwrap();
        let consts = compute_arch_constants(&spec, &state);
        let n = spec.width;
        let u = &u[..n];
        let v: Vec<f64> = u.iter().zip(&dir[..n]).map(|(a, d)| a + d * 10f64.powf(log_step)).collect();
        let d_in = dist(u, &v);
        prop_assume!(d_in > 0.0);
        for l in 0..spec.depth {
            let c = &consts.layers[l];
            let q = dist(&layer_map(&spec, &state, l, u), &layer_map(&spec, &state, l, &v)) / d_in;
            prop_assert!(q <= c.c * (1.0 + c.s) * (1.0 + 1e-9), "layer {}: {} > {}", l, q, c.c * (1.0 + c.s));
        }
    }

    #[test]
    fn output_is_lipschitz_in_residual_parameters(
        (spec, seed) in spec_strategy(),
        raw in prop::collection::vec(-4.0f64..4.0, 6),
        noise in prop::collection::vec(-1.0f64..1.0, 17),
        log_size in -6.0f64..0.5,
    ) {
        prop_assume!(spec.depth > 0);
        let mut spec = spec;
        spec.insertion_layer = spec.depth;
        let state = initial_state(&spec, seed).unwrap();
        let mut other = state.clone();
        for (l, layer) in other.layers.iter_mut().enumerate() {
            let s = 10f64.powf(log_size) * (1.0 + l as f64);
            layer.w1 = perturb(&layer.w1, &noise, s);
            layer.w2 = perturb(&layer.w2, &noise[3..], -s);
        }
        let other = project_norms(&spec, &other);
        let consts = compute_arch_constants(&spec, &state);
        let x = inputs(&spec, 1, &raw);
        let (_, fa) = forward_decomposed(&spec, &state, &x).unwrap();
        let (_, fb) = forward_decomposed(&spec, &other, &x).unwrap();
        let lhs = dist(fa.data(), fb.data());
        let rhs: f64 = state
            .layers
            .iter()
            .zip(&other.layers)
            .zip(&consts.layers)
            .map(|((a, b), c)| {
                let d1 = a.w1.sub(&b.w1).unwrap().frobenius_norm_sq();
                let d2 = a.w2.sub(&b.w2).unwrap().frobenius_norm_sq();
                c.lambda * (d1 + d2).sqrt()
            })
            .sum();
        prop_assert!(lhs <= rhs * (1.0 + 1e-9) + 1e-12, "{} > {}", lhs, rhs);
    }

    #[test]
    fn projection_is_idempotent_and_never_grows(
        rows in 1usize..=6,
        cols in 1usize..=6,
        raw in prop::collection::vec(-5.0f64..5.0, 36),
        s in 0.1f64..4.0,
        b in 0.1f64..6.0,
    ) {
        let w = Tensor::from_fn(rows, cols, |r, c| raw[r * 6 + c]);
        let p = project_matrix(&w, s, b);
        prop_assert_eq!(project_matrix(&p, s, b), p.clone());
        prop_assert!(p.frobenius_norm() <= w.frobenius_norm());
        prop_assert!(spectral_norm(&p) <= spectral_norm(&w) * (1.0 + 1e-12));
        prop_assert!(spectral_norm(&p) <= s * (1.0 + 1e-9));
        prop_assert!(p.frobenius_norm() <= b * (1.0 + 1e-12));
    }

    #[test]
    fn projected_state_is_fixed_point(
        (spec, seed) in spec_strategy(),
        noise in prop::collection::vec(-1.0f64..1.0, 13),
        scale in 0.0f64..5.0,
    ) {
        let mut state = initial_state(&spec, seed).unwrap();
        for layer in &mut state.layers {
            layer.w1 = perturb(&layer.w1, &noise, scale);
            layer.w2 = perturb(&layer.w2, &noise[1..], scale);
        }
        let once = project_norms(&spec, &state);
        prop_assert_eq!(project_norms(&spec, &once), once);
    }

    #[test]
    fn zero_output_block_preserves_outputs_bit_for_bit(
        (spec, seed) in spec_strategy(),
        raw in prop::collection::vec(-4.0f64..4.0, 24),
        bias in any::<bool>(),
    ) {
        let state = initial_state(&spec, seed).unwrap();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed ^ 1);
        let u = NetworkState::draw_block_features(&spec, &mut rng);
        let expanded = state.with_block(u, bias);
        let x = inputs(&spec, 8, &raw);
        let (_, a) = forward_decomposed(&spec, &state, &x).unwrap();
        let (_, b) = forward_decomposed(&spec, &expanded, &x).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&a), bits(&b));
    }
}
