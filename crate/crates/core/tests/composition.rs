use accept_core::factorization::{
    codeword_capacity, compose, compose_backward, init_random, param_count, solve_rank, validate_partition, BudgetSpec,
    Codebook, PromptDims, ScaleSpec, WeightSet,
};
use accept_core::gradcheck::relative_error;
use accept_core::tensor::Tensor;
use num_bigint::BigUint;
use proptest::prelude::*;

fn divisors(d: usize) -> Vec<usize> {
    (1..=d).filter(|k| d.is_multiple_of(*k)).collect()
}

/// (positions, d, K, r, codebook entries, weight entries)
fn instance() -> impl Strategy<Value = (usize, usize, usize, usize, Vec<f64>, Vec<f64>)> {
    (1usize..=6, 4usize..=64, 1usize..=8)
        .prop_flat_map(|(p, d, r)| (Just(p), Just(d), proptest::sample::select(divisors(d)), Just(r)))
        .prop_flat_map(|(p, d, k, r)| {
            (
                Just(p),
                Just(d),
                Just(k),
                Just(r),
                proptest::collection::vec(-2.0f64..2.0, r * d),
                proptest::collection::vec(-2.0f64..2.0, p * k * r),
            )
        })
}

/// Direct per-element evaluation, independent of the library's layout helpers.
fn naive(p: usize, d: usize, k: usize, r: usize, c: &[f64], w: &[f64]) -> Vec<f64> {
    let t = d / k;
    let mut out = vec![0.0; p * d];
    for i in 0..p {
        for sub in 0..k {
            for e in 0..t {
                let mut acc = 0.0;
                for j in 0..r {
                    acc += w[(i * k + sub) * r + j] * c[(sub * r + j) * t + e];
                }
                out[i * d + sub * t + e] = acc;
            }
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn compose_matches_triple_loop((p, d, k, r, c, w) in instance()) {
        let t = d / k;
        let cb = Codebook::new(k, r, t, c.clone()).unwrap();
        let ws = WeightSet::new(p, k, r, w.clone()).unwrap();
        let got = compose(&cb, &ws).unwrap();
        let want = naive(p, d, k, r, &c, &w);
        for (a, b) in got.values().iter().zip(&want) {
            prop_assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn budget_is_tight(budget in 0u64..2_000_000, d in 1u64..1024, positions in 1u64..300, k in 1u64..64) {
        let spec = BudgetSpec::new(budget, d, positions, k).unwrap();
        let r = solve_rank(&spec);
        prop_assert!(param_count(r, d, positions, k) <= budget);
        prop_assert!(param_count(r + 1, d, positions, k) > budget);
        let more = BudgetSpec::new(budget + 1 + budget / 3, d, positions, k).unwrap();
        prop_assert!(solve_rank(&more) >= r);
    }

    #[test]
    fn codebook_term_ignores_positions(r in 0u64..100, d in 1u64..1024, p1 in 1u64..300, p2 in 1u64..300, k in 1u64..64) {
        let diff = param_count(r, d, p1, k) as i128 - param_count(r, d, p2, k) as i128;
        prop_assert_eq!(diff, (r * k) as i128 * (p1 as i128 - p2 as i128));
        prop_assert_eq!(param_count(r, d, p1, k) - r * p1 * k, r * d);
    }

    #[test]
    fn one_hot_single_subspace_returns_codewords(m in 1usize..12, d in 1usize..40, seed in 0u64..1000) {
        let dims = PromptDims { positions: m, d, k: 1, r: m };
        let (cb, _) = init_random::<f64>(&dims, seed, &ScaleSpec::default()).unwrap();
        let composed = compose(&cb, &WeightSet::one_hot(m, 1)).unwrap();
        prop_assert_eq!(composed.values(), cb.entries());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn compose_backward_matches_central_differences((p, d, k, r, c, w) in instance(), seed in 0u64..1000) {
        let t = d / k;
        let cb = Codebook::new(k, r, t, c).unwrap();
        let ws = WeightSet::new(p, k, r, w).unwrap();
        // loss = <P, G> for a fixed random G, so dP = G
        let (g_cb, _) = init_random::<f64>(&PromptDims { positions: p, d, k: 1, r: p }, seed, &ScaleSpec::default()).unwrap();
        let g = g_cb.entries().to_vec();
        let dp = Tensor::new(&[p, d], g.clone()).unwrap();
        let (dc, dw) = compose_backward(&cb, &ws, &dp).unwrap();
        let loss = |cb: &Codebook<f64>, ws: &WeightSet<f64>| -> f64 {
            compose(cb, ws).unwrap().values().iter().zip(&g).map(|(a, b)| a * b).sum()
        };
        let h = 1e-6;
        for i in 0..cb.entries().len() {
            let mut plus = cb.entries().to_vec();
            let mut minus = plus.clone();
            plus[i] += h;
            minus[i] -= h;
            let numeric = (loss(&Codebook::new(k, r, t, plus).unwrap(), &ws)
                - loss(&Codebook::new(k, r, t, minus).unwrap(), &ws)) / (2.0 * h);
            prop_assert!(relative_error(dc.data()[i], numeric) < 1e-4, "dC[{i}] {} vs {numeric}", dc.data()[i]);
        }
        for i in 0..ws.entries().len() {
            let mut plus = ws.entries().to_vec();
            let mut minus = plus.clone();
            plus[i] += h;
            minus[i] -= h;
            let numeric = (loss(&cb, &WeightSet::new(p, k, r, plus).unwrap())
                - loss(&cb, &WeightSet::new(p, k, r, minus).unwrap())) / (2.0 * h);
            prop_assert!(relative_error(dw.data()[i], numeric) < 1e-4, "dW[{i}] {} vs {numeric}", dw.data()[i]);
        }
    }
}

#[test]
fn uneven_partitions_are_rejected() {
    assert!(validate_partition(768, 5).is_err());
    assert!(validate_partition(768, 0).is_err());
    assert_eq!(validate_partition(768, 24).unwrap(), 32);
}

#[test]
fn capacity_is_exact() {
    assert_eq!(codeword_capacity(20, 24), BigUint::from(20u32).pow(24));
    assert_eq!(codeword_capacity(24, 2), BigUint::from(576u32));
    assert_eq!(codeword_capacity(0, 3), BigUint::from(0u32));
}
