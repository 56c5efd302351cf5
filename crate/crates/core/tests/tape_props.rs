use proptest::prelude::*;

use resexp_core::tape::RowNorm;
use resexp_core::{NodeId, Tape, Tensor};

#[derive(Clone, Debug)]
enum Step {
    MatMulT(usize),
    MatMul(usize),
    AddX,
    SubX,
    MulX,
    AddBias,
    Scale(f64),
    Relu,
    Rms(f64),
    Layer(f64),
    AppendOnesProject,
}

#[derive(Clone, Debug)]
enum Head {
    Sum,
    SumSquares,
    CrossEntropy(Vec<usize>),
    Squared(Vec<f64>),
}

#[derive(Clone, Debug)]
struct Graph {
    b: usize,
    n: usize,
    /// x, w0, w1, bias, wa.
    leaves: Vec<Tensor>,
    /// Norm gain, held constant by the tape.
    gamma: Vec<f64>,
    steps: Vec<Step>,
    head: Head,
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-1.5f64..1.5, rows * cols)
        .prop_map(move |d| Tensor::matrix(rows, cols, d).unwrap())
}

fn step() -> impl Strategy<Value = Step> {
    prop_oneof![
        (0usize..2).prop_map(Step::MatMulT),
        (0usize..2).prop_map(Step::MatMul),
        Just(Step::AddX),
        Just(Step::SubX),
        Just(Step::MulX),
        Just(Step::AddBias),
        (-2.0f64..2.0).prop_map(Step::Scale),
        Just(Step::Relu),
        (0.1f64..1.0).prop_map(Step::Rms),
        (0.1f64..1.0).prop_map(Step::Layer),
        Just(Step::AppendOnesProject),
    ]
}

fn graph() -> impl Strategy<Value = Graph> {
    (1usize..=4, 2usize..=6).prop_flat_map(|(b, n)| {
        let leaves = (matrix(b, n), matrix(n, n), matrix(n, n), matrix(1, n), matrix(n, n + 1), prop::collection::vec(-1.5f64..1.5, n));
        let head = prop_oneof![
            Just(Head::Sum),
            Just(Head::SumSquares),
            prop::collection::vec(0..n, b).prop_map(Head::CrossEntropy),
            prop::collection::vec(-1.0f64..1.0, b * n).prop_map(Head::Squared),
        ];
        (leaves, prop::collection::vec(step(), 1..8), head).prop_map(move |(l, steps, head)| Graph {
            b,
            n,
            leaves: vec![l.0, l.1, l.2, l.3, l.4],
            gamma: l.5,
            steps,
            head,
        })
    })
}

struct Recorded {
    tape: Tape,
    leaves: Vec<NodeId>,
    hidden: NodeId,
    out: NodeId,
    /// Smallest |input| seen by any relu.
    kink: f64,
}

fn record(g: &Graph, leaves: &[Tensor]) -> Recorded {
    let mut t = Tape::new();
    let ids: Vec<NodeId> = leaves.iter().map(|v| t.leaf(v.clone()).unwrap()).collect();
    let gamma = &g.gamma;
    let mut h = ids[0];
    let mut kink = f64::INFINITY;
    for s in &g.steps {
        h = match *s {
            Step::MatMulT(k) => t.matmul_t(h, ids[1 + k]).unwrap(),
            Step::MatMul(k) => t.matmul(h, ids[1 + k]).unwrap(),
            Step::AddX => t.add(h, ids[0]).unwrap(),
            Step::SubX => t.sub(h, ids[0]).unwrap(),
            Step::MulX => t.mul(h, ids[0]).unwrap(),
            Step::AddBias => t.add_row(h, ids[3]).unwrap(),
            Step::Scale(c) => t.scale(h, c).unwrap(),
            Step::Relu => {
                kink = t.value(h).data().iter().fold(kink, |m, v| m.min(v.abs()));
                t.relu(h).unwrap()
            }
            Step::Rms(eps) => t.norm(h, RowNorm::Rms { gamma: gamma.clone(), eps }).unwrap(),
            Step::Layer(eps) => t.norm(h, RowNorm::Layer { gamma: gamma.clone(), eps }).unwrap(),
            Step::AppendOnesProject => {
                let a = t.append_ones(h).unwrap();
                t.matmul_t(a, ids[4]).unwrap()
            }
        };
    }
    let out = match &g.head {
        Head::Sum => t.sum(h).unwrap(),
        Head::SumSquares => {
            let sq = t.mul(h, h).unwrap();
            t.sum(sq).unwrap()
        }
        Head::CrossEntropy(labels) => t.softmax_cross_entropy(h, labels).unwrap(),
        Head::Squared(target) => {
            t.squared_error(h, &Tensor::matrix(g.b, g.n, target.clone()).unwrap()).unwrap()
        }
    };
    Recorded { tape: t, leaves: ids, hidden: h, out, kink }
}

fn value(g: &Graph, leaves: &[Tensor]) -> f64 {
    let r = record(g, leaves);
    r.tape.value(r.out).data()[0]
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 128, ..ProptestConfig::default() })]

    #[test]
    fn reverse_mode_matches_central_differences(g in graph()) {
        let Recorded { tape: mut t, leaves: ids, out, kink, .. } = record(&g, &g.leaves);
        prop_assume!(kink > 1e-4);
        t.backward(out, Tensor::scalar(1.0)).unwrap();
        let h = 1e-5;
        for (li, id) in ids.iter().enumerate() {
            let grad = t.grad_at(*id).unwrap();
            for e in 0..g.leaves[li].len() {
                let mut plus = g.leaves.clone();
                let mut minus = g.leaves.clone();
                plus[li].data_mut()[e] += h;
                minus[li].data_mut()[e] -= h;
                let fd = (value(&g, &plus) - value(&g, &minus)) / (2.0 * h);
                let err = rel_err(grad.data()[e], fd);
                prop_assert!(err <= 1e-5, "leaf {li} entry {e}: ad {} fd {fd} err {err}", grad.data()[e]);
            }
        }
    }

    #[test]
    fn backward_is_linear_in_the_seed(
        g in graph(),
        sa in prop::collection::vec(-1.0f64..1.0, 64),
        sb in prop::collection::vec(-1.0f64..1.0, 64),
    ) {
        let run = |seed: &[f64]| {
            let mut r = record(&g, &g.leaves);
            let v = r.tape.value(r.hidden);
            let s = Tensor::new(v.shape().to_vec(), seed[..v.len()].to_vec()).unwrap();
            r.tape.backward(r.hidden, s).unwrap();
            r.leaves.iter().map(|id| r.tape.grad_at(*id).unwrap()).collect::<Vec<_>>()
        };
        let sum: Vec<f64> = sa.iter().zip(&sb).map(|(a, b)| a + b).collect();
        let (ga, gb, gs) = (run(&sa), run(&sb), run(&sum));
        for ((a, b), s) in ga.iter().zip(&gb).zip(&gs) {
            for ((x, y), z) in a.data().iter().zip(b.data()).zip(s.data()) {
                prop_assert!((x + y - z).abs() <= 1e-12 * (1.0 + z.abs()), "{x} + {y} != {z}");
            }
        }
    }

    #[test]
    fn recording_is_deterministic(g in graph()) {
        let (mut a, mut b) = (record(&g, &g.leaves), record(&g, &g.leaves));
        prop_assert_eq!(a.tape.value(a.out).data()[0].to_bits(), b.tape.value(b.out).data()[0].to_bits());
        a.tape.backward(a.out, Tensor::scalar(1.0)).unwrap();
        b.tape.backward(b.out, Tensor::scalar(1.0)).unwrap();
        for (x, y) in a.leaves.iter().zip(&b.leaves) {
            prop_assert_eq!(a.tape.grad_at(*x).unwrap(), b.tape.grad_at(*y).unwrap());
        }
    }
}

#[test]
fn second_backward_is_rejected() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::scalar(2.0)).unwrap();
    let y = t.mul(x, x).unwrap();
    t.backward(y, Tensor::scalar(1.0)).unwrap();
    assert!(t.backward(y, Tensor::scalar(1.0)).is_err());
    assert!(t.leaf(Tensor::scalar(1.0)).is_err());
}

#[test]
fn relu_subgradient_at_zero_is_zero() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::vector(vec![0.0, 1.0, -1.0])).unwrap();
    let r = t.relu(x).unwrap();
    let s = t.sum(r).unwrap();
    t.backward(s, Tensor::scalar(1.0)).unwrap();
    assert_eq!(t.grad_at(x).unwrap().data(), &[0.0, 1.0, 0.0]);
}
