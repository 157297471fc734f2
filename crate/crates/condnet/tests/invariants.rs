//! Property tests for the engine-wide invariants: softmax normalization,
//! grouped-convolution locality, routing-policy consistency, and the fc
//! kernel against a naive oracle.

use condnet::forward::apply_policy;
use condnet::graph::RoutingPolicy;
use condnet::tensor::{sigmoid, ActivationKind, Tensor};
use condnet::{ParamStore, Tape};
use proptest::prelude::*;

fn finite_logit() -> impl Strategy<Value = f64> {
    -30.0f64..30.0
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_probability_vectors(
        rows in 1usize..5,
        cols in 1usize..9,
        seed in any::<u64>(),
    ) {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let logits: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-30.0..30.0)).collect();
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Tensor::new(vec![rows, cols], logits).unwrap());
        let y = tape.softmax(x).unwrap();
        for r in 0..rows {
            let row = &tape.value(y).data()[r * cols..(r + 1) * cols];
            let sum: f64 = row.iter().sum();
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((sum - 1.0).abs() < 1e-6, "row sums to {sum}");
        }
    }

    #[test]
    fn grouped_conv_locality_is_bitwise(
        seed in any::<u64>(),
        groups in prop::sample::select(vec![2usize, 4]),
        cg in 1usize..3,
        touched in 0usize..4,
    ) {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let g = groups;
        let c_in = g * cg;
        let c_out = g * cg;
        let perturb_group = touched % g;
        let (h, w) = (5usize, 5usize);
        let x: Vec<f64> = (0..c_in * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        let wt: Vec<f64> = (0..c_out * cg * 9).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut store = ParamStore::new();
        let wid = store
            .add("w", Tensor::new(vec![c_out, cg, 3, 3], wt).unwrap())
            .unwrap();
        let run = |xs: Vec<f64>, store: &ParamStore<f64>| {
            let mut tape = Tape::new();
            let xi = tape.input(Tensor::new(vec![1, c_in, h, w], xs).unwrap());
            let wl = tape.leaf(store, wid);
            let y = tape
                .conv2d(xi, wl, g, (1, 1), (1, 1), ActivationKind::ReLU)
                .unwrap();
            tape.value(y).clone()
        };
        let base = run(x.clone(), &store);
        // perturb every channel of one group
        let mut x2 = x.clone();
        for c in perturb_group * cg..(perturb_group + 1) * cg {
            for v in &mut x2[c * h * w..(c + 1) * h * w] {
                *v += 0.37;
            }
        }
        let out = run(x2, &store);
        let hw_out = h * w;
        for gi in 0..g {
            if gi == perturb_group {
                continue;
            }
            for c in gi * cg..(gi + 1) * cg {
                let a = &base.data()[c * hw_out..(c + 1) * hw_out];
                let b = &out.data()[c * hw_out..(c + 1) * hw_out];
                prop_assert_eq!(a, b, "group {} changed", gi);
            }
        }
    }

    #[test]
    fn top_tau_full_is_soft_and_truncation_renormalizes(
        logits in prop::collection::vec(finite_logit(), 2..6),
        tau_pick in any::<usize>(),
    ) {
        let r = logits.len();
        let mut weights = logits.clone();
        condnet::tensor::softmax_rows(&mut weights, r);
        let w = Tensor::<f64>::new(vec![1, r], weights).unwrap();
        let soft = apply_policy(&w, &RoutingPolicy::soft()).unwrap();
        let full = apply_policy(&w, &RoutingPolicy::top_tau(r)).unwrap();
        prop_assert_eq!(&soft.weights, &full.weights);
        prop_assert_eq!(&soft.route_visited, &full.route_visited);
        // any truncation keeps a probability vector over survivors
        let tau = 1 + tau_pick % r;
        let cut = apply_policy(&w, &RoutingPolicy::top_tau(tau)).unwrap();
        let sum: f64 = cut.weights.data().iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-9, "renormalized sum {sum}");
        prop_assert_eq!(cut.route_visited.iter().filter(|&&v| v).count(), tau);
    }

    #[test]
    fn fc_matches_naive_scalar_oracle(
        seed in any::<u64>(),
        batch in 1usize..4,
        m in 1usize..6,
        n in 1usize..6,
        homogeneous in any::<bool>(),
    ) {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..batch * m).map(|_| rng.random_range(-2.0..2.0)).collect();
        let cols = if homogeneous { m + 1 } else { m };
        let wt: Vec<f64> = (0..n * cols).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut store = ParamStore::new();
        let wid = store
            .add("w", Tensor::new(vec![n, cols], wt.clone()).unwrap())
            .unwrap();
        let mut tape = Tape::new();
        let xi = tape.input(Tensor::new(vec![batch, m], x.clone()).unwrap());
        let wl = tape.leaf(&store, wid);
        let y = tape.fc(xi, wl, ActivationKind::Sigmoid).unwrap();
        for b in 0..batch {
            for o in 0..n {
                let mut z = if homogeneous { wt[o * cols + m] } else { 0.0 };
                for i in 0..m {
                    z += wt[o * cols + i] * x[b * m + i];
                }
                let want = sigmoid(z);
                let got = tape.value(y).data()[b * n + o];
                prop_assert!((got - want).abs() <= 1e-6);
            }
        }
    }
}
