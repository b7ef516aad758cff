mod common;

use attn_surgery::attention::{
    apply_feature_map, hybrid_attention, linear_attention, partition_tokens, softmax_attention, HybridMode, Qkv,
};
use attn_surgery::numerics::Tensor;
use common::{attention_oracle, feature_oracle, implied_weights, max_relative, random_fixture, with_constant_values, OracleKernel};
use proptest::prelude::*;

#[test]
fn feature_map_matches_slice_oracle() {
    for seed in 0..30 {
        let f = random_fixture(seed, 8, 6, 2, 3);
        for h in 0..f.qkv.heads() {
            let phi = apply_feature_map(&f.features.query[h], &f.qkv.q[h]).unwrap();
            for i in 0..f.qkv.tokens() {
                let want = feature_oracle(&f.features.query[h], f.qkv.q[h].row(i));
                for (a, b) in phi.row(i).iter().zip(&want) {
                    assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "seed {seed}");
                }
            }
        }
    }
}

#[test]
fn kernels_match_double_loop_oracles() {
    for seed in 0..40 {
        let f = random_fixture(100 + seed, 12, 6, 3, 3);
        let y = softmax_attention(&f.qkv).unwrap();
        assert!(max_relative(&y, &attention_oracle(&OracleKernel::Softmax, &f.qkv), 1e-12) < 1e-9);
        let y = linear_attention(&f.qkv, &f.features).unwrap();
        assert!(max_relative(&y, &attention_oracle(&OracleKernel::Linear(&f.features), &f.qkv), 1e-12) < 1e-9);
        for rate in [1, 2, 3, 5] {
            let part = partition_tokens(f.qkv.tokens(), rate).unwrap();
            for mode in [HybridMode::Literal, HybridMode::Consistent] {
                let y = hybrid_attention(&f.qkv, &f.features, &part, mode).unwrap();
                let o = attention_oracle(&OracleKernel::Hybrid(&f.features, &part, mode), &f.qkv);
                assert!(max_relative(&y, &o, 1e-12) < 1e-9, "seed {seed} rate {rate} {mode:?}");
            }
        }
    }
}

#[test]
fn softmax_examples() {
    let f = random_fixture(7, 1, 4, 1, 2);
    let single = Qkv::new(
        vec![f.qkv.q[0].select_rows(&[0])],
        vec![f.qkv.k[0].select_rows(&[0])],
        vec![f.qkv.v[0].select_rows(&[0])],
    )
    .unwrap();
    let y = softmax_attention(&single).unwrap();
    assert!(y.max_abs_diff(&single.v[0]).unwrap() < 1e-15);

    let f = random_fixture(8, 9, 4, 1, 2);
    let zero_q = Qkv::new(vec![f.qkv.q[0].map(|_| 0.0)], f.qkv.k.clone(), f.qkv.v.clone()).unwrap();
    let y = softmax_attention(&zero_q).unwrap();
    let n = f.qkv.tokens() as f64;
    let mean: Vec<f64> = f.qkv.v[0].column_sums().iter().map(|s| s / n).collect();
    for i in 0..y.rows() {
        for (a, b) in y.row(i).iter().zip(&mean) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn identical_keys_give_column_mean_for_linear() {
    let f = random_fixture(21, 10, 4, 2, 2);
    let k: Vec<Tensor> = f.qkv.k.iter().map(|k| Tensor::from_fn(k.rows(), k.cols(), |_, c| k.get(0, c))).collect();
    let qkv = Qkv::new(f.qkv.q.clone(), k, f.qkv.v.clone()).unwrap();
    let y = linear_attention(&qkv, &f.features).unwrap();
    let n = qkv.tokens() as f64;
    let m = qkv.value_dim();
    for h in 0..qkv.heads() {
        let mean: Vec<f64> = qkv.v[h].column_sums().iter().map(|s| s / n).collect();
        for i in 0..n as usize {
            for c in 0..m {
                assert!((y.get(i, h * m + c) - mean[c]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn large_logits_stay_finite() {
    let f = random_fixture(31, 8, 4, 2, 2);
    let big = |t: &Tensor| {
        let s = 500.0 * (t.cols() as f64).sqrt() / t.max_abs().max(1e-12);
        t.scale(s.sqrt())
    };
    let qkv = Qkv::new(
        f.qkv.q.iter().map(big).collect(),
        f.qkv.k.iter().map(big).collect(),
        f.qkv.v.clone(),
    )
    .unwrap();
    assert!(softmax_attention(&qkv).unwrap().all_finite());
    let part = partition_tokens(qkv.tokens(), 2).unwrap();
    for mode in [HybridMode::Literal, HybridMode::Consistent] {
        assert!(hybrid_attention(&qkv, &f.features, &part, mode).unwrap().all_finite());
    }
}

fn permute(qkv: &Qkv, perm: &[usize]) -> Qkv {
    Qkv::new(
        qkv.q.iter().map(|t| t.select_rows(perm)).collect(),
        qkv.k.iter().map(|t| t.select_rows(perm)).collect(),
        qkv.v.iter().map(|t| t.select_rows(perm)).collect(),
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn exact_reduction_at_rate_one(seed in 0u64..1_000_000) {
        let f = random_fixture(seed, 16, 6, 3, 3);
        let part = partition_tokens(f.qkv.tokens(), 1).unwrap();
        let y = hybrid_attention(&f.qkv, &f.features, &part, HybridMode::Literal).unwrap();
        prop_assert!(y.max_abs_diff(&softmax_attention(&f.qkv).unwrap()).unwrap() <= 1e-10);
    }

    #[test]
    fn constant_values_are_fixed(seed in 0u64..1_000_000, c in -5.0f64..5.0, rate in 1usize..6) {
        let f = random_fixture(seed, 16, 6, 3, 3);
        let qkv = with_constant_values(&f.qkv, c);
        let part = partition_tokens(qkv.tokens(), rate).unwrap();
        let outs = [
            softmax_attention(&qkv).unwrap(),
            linear_attention(&qkv, &f.features).unwrap(),
            hybrid_attention(&qkv, &f.features, &part, HybridMode::Literal).unwrap(),
            hybrid_attention(&qkv, &f.features, &part, HybridMode::Consistent).unwrap(),
        ];
        for y in outs {
            prop_assert!(y.data().iter().all(|x| (x - c).abs() <= 1e-12 * c.abs().max(1.0)));
        }
    }

    #[test]
    fn implied_weights_are_a_distribution(seed in 0u64..1_000_000, rate in 1usize..6) {
        let f = random_fixture(seed, 12, 5, 2, 3);
        let part = partition_tokens(f.qkv.tokens(), rate).unwrap();
        let kernels = [
            OracleKernel::Softmax,
            OracleKernel::Linear(&f.features),
            OracleKernel::Hybrid(&f.features, &part, HybridMode::Literal),
            OracleKernel::Hybrid(&f.features, &part, HybridMode::Consistent),
        ];
        for k in &kernels {
            for h in 0..f.qkv.heads() {
                for row in implied_weights(k, &f.qkv, h) {
                    prop_assert!(row.iter().all(|&w| w >= 0.0));
                    prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
                }
            }
        }
    }

    #[test]
    fn linear_is_permutation_equivariant(seed in 0u64..1_000_000, shift in 1usize..16) {
        let f = random_fixture(seed, 16, 5, 2, 2);
        let n = f.qkv.tokens();
        let perm: Vec<usize> = (0..n).map(|i| (i * 7 + shift) % n).collect();
        let mut seen = perm.clone();
        seen.sort_unstable();
        seen.dedup();
        prop_assume!(seen.len() == n);
        let y = linear_attention(&f.qkv, &f.features).unwrap();
        let yp = linear_attention(&permute(&f.qkv, &perm), &f.features).unwrap();
        prop_assert!(yp.max_abs_diff(&y.select_rows(&perm)).unwrap() < 1e-12);
    }

    #[test]
    fn hybrid_is_equivariant_within_partition(seed in 0u64..1_000_000, rate in 2usize..5) {
        let f = random_fixture(seed, 16, 5, 2, 2);
        let n = f.qkv.tokens();
        let part = partition_tokens(n, rate).unwrap();
        // reverse each class separately
        let mut perm: Vec<usize> = (0..n).collect();
        for class in [part.softmax_indices(), part.linear_indices()] {
            let rev: Vec<usize> = class.iter().rev().copied().collect();
            for (&slot, &src) in class.iter().zip(&rev) {
                perm[slot] = src;
            }
        }
        for mode in [HybridMode::Literal, HybridMode::Consistent] {
            let y = hybrid_attention(&f.qkv, &f.features, &part, mode).unwrap();
            let yp = hybrid_attention(&permute(&f.qkv, &perm), &f.features, &part, mode).unwrap();
            prop_assert!(yp.max_abs_diff(&y.select_rows(&perm)).unwrap() < 1e-12);
        }
    }

    #[test]
    fn features_are_non_negative(seed in 0u64..1_000_000, scale in 0.1f64..50.0) {
        let f = random_fixture(seed, 8, 6, 2, 3);
        let phi = apply_feature_map(&f.features.key[0], &f.qkv.k[0].scale(scale)).unwrap();
        prop_assert!(phi.data().iter().all(|&x| x >= 0.0));
    }
}
