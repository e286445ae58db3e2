//! Differentiation and algebraic properties of the op set.

use dmf::gradcheck::ops;
use dmf::graph::Graph;
use dmf::rng::Rng;
use proptest::prelude::*;

/// Central differences vs backprop for every op fixture, 100 seeds each,
/// 64-bit, step 1e-5.
#[test]
fn every_op_matches_finite_differences_over_100_seeds() {
    let mut worst: (f64, String) = (0.0, String::new());
    for seed in 0..100u64 {
        for (name, report) in ops::run_all(seed).unwrap() {
            assert!(
                report.max_rel < 1e-4,
                "seed {seed}, op {name}: {report:?}"
            );
            if report.max_rel > worst.0 {
                worst = (report.max_rel, format!("{name} at seed {seed}"));
            }
        }
    }
    eprintln!("worst relative error {:.3e} ({})", worst.0, worst.1);
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one_f32(
        vals in proptest::collection::vec(-30.0f32..30.0, 1..24),
    ) {
        let n = vals.len();
        let mut g: Graph<f32> = Graph::new();
        let x = g.leaf_from(vec![1, n], vals).unwrap();
        let y = g.softmax_rows(x).unwrap();
        let sum: f32 = g.value(y).iter().sum();
        prop_assert!(g.value(y).iter().all(|&v| v > 0.0));
        prop_assert!((sum - 1.0).abs() < 1e-6, "sum {sum}");
    }

    #[test]
    fn softmax_is_permutation_equivariant(
        vals in proptest::collection::vec(-10.0f64..10.0, 2..10),
        rot in 0usize..9,
    ) {
        let n = vals.len();
        let rot = rot % n;
        let mut rotated = vals.clone();
        rotated.rotate_left(rot);

        let mut g: Graph<f64> = Graph::new();
        let a = g.leaf_from(vec![1, n], vals).unwrap();
        let b = g.leaf_from(vec![1, n], rotated).unwrap();
        let sa = g.softmax_rows(a).unwrap();
        let sb = g.softmax_rows(b).unwrap();
        let mut expect = g.value(sa).to_vec();
        expect.rotate_left(rot);
        for (&got, want) in g.value(sb).iter().zip(expect) {
            prop_assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn concat_then_slice_recovers_both_parts(
        left in proptest::collection::vec(-5.0f64..5.0, 1..9),
        cols_b in 1usize..4,
    ) {
        let ca = left.len();
        let right: Vec<f64> = (0..cols_b).map(|i| i as f64 - 1.5).collect();
        let mut g: Graph<f64> = Graph::new();
        let a = g.leaf_from(vec![1, ca], left.clone()).unwrap();
        let b = g.leaf_from(vec![1, cols_b], right.clone()).unwrap();
        let cat = g.concat_cols(a, b).unwrap();
        let la = g.slice_cols(cat, 0, ca).unwrap();
        let lb = g.slice_cols(cat, ca, cols_b).unwrap();
        prop_assert_eq!(g.value(la), left.as_slice());
        prop_assert_eq!(g.value(lb), right.as_slice());
    }

    #[test]
    fn forward_chain_stays_finite(seed in 0u64..5000) {
        // A deep-ish mixed chain on bounded random inputs never produces
        // NaN or infinity.
        let mut rng = Rng::derive(seed, 7);
        let n = 3 + rng.below(4);
        let mut g: Graph<f64> = Graph::new();
        let data: Vec<f64> = (0..n * n).map(|_| rng.uniform(-3.0, 3.0)).collect();
        let mut x = g.leaf_from(vec![n, n], data).unwrap();
        for _ in 0..6 {
            let w: Vec<f64> = (0..n * n).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let wn = g.leaf_from(vec![n, n], w).unwrap();
            let y = g.matmul(x, wn).unwrap();
            let t = g.tanh(y);
            let r = g.relu(t);
            x = g.softmax_rows(r).unwrap();
        }
        prop_assert!(g.value(x).iter().all(|v| v.is_finite()));
    }
}
