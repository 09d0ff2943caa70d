//! Property tests spanning several modules.

use nalgebra::DMatrix;
use num_complex::Complex64;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::baselines::protonet_predict;
use crate::harness::{decode_dataset, encode_dataset, fold_partition, RunConfig};
use crate::meta::{
    cosine_distance, cross_entropy, loss_hessian, metric_logits, min_eigenvalue, sample_episode, softmax_vec,
};
use crate::numerics::{dft, naive_dft, Tensor};
use crate::signal::{build_dataset, default_class_specs, RadioConfig};

fn vec_pair(n: std::ops::Range<usize>) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    n.prop_flat_map(|n| {
        (
            prop::collection::vec(-5.0..5.0f64, n),
            prop::collection::vec(-5.0..5.0f64, n),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn negative_cosine_bounded_symmetric_scale_free((a, b) in vec_pair(1..12), s in 0.1..10.0f64) {
        prop_assume!(a.iter().any(|v| v.abs() > 1e-3) && b.iter().any(|v| v.abs() > 1e-3));
        let d = cosine_distance(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&d));
        prop_assert!((d - cosine_distance(&b, &a).unwrap()).abs() < 1e-12);
        let scaled: Vec<f64> = a.iter().map(|v| v * s).collect();
        prop_assert!((d - cosine_distance(&scaled, &b).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn softmax_is_a_distribution(v in prop::collection::vec(-50.0..50.0f64, 1..10)) {
        let p = softmax_vec(&v);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&x| x >= 0.0));
        for t in 0..v.len() {
            prop_assert!((cross_entropy(&v, t) + p[t].ln()).abs() < 1e-9 || p[t] == 0.0);
        }
    }

    #[test]
    fn loss_hessians_are_psd(nc in 2usize..8, m in 1usize..5, seed in any::<u64>()) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lambda = DMatrix::from_fn(nc, m, |_, _| rng.random_range(-1.0..=1.0));
        let beta: Vec<f64> = (0..m).map(|_| rng.random_range(-3.0..=3.0)).collect();
        let h = loss_hessian(&lambda, &beta).unwrap();
        prop_assert!(min_eigenvalue(&h.h_u) >= -1e-9);
        prop_assert!(min_eigenvalue(&h.h_beta) >= -1e-9);
    }

    #[test]
    fn metric_logits_are_linear_in_eta(
        lam in prop::collection::vec(0.0..2.0f64, 12),
        eta in prop::collection::vec(-2.0..2.0f64, 12),
        s in -3.0..3.0f64,
    ) {
        let lambda = Tensor::new(vec![4, 3], lam).unwrap();
        let e = Tensor::new(vec![3, 4], eta.clone()).unwrap();
        let es = Tensor::new(vec![3, 4], eta.iter().map(|v| v * s).collect()).unwrap();
        let z = metric_logits(&lambda, &e).unwrap();
        let zs = metric_logits(&lambda, &es).unwrap();
        for (a, b) in z.iter().zip(&zs) {
            prop_assert!((a * s - b).abs() < 1e-9);
        }
    }

    #[test]
    fn prototype_logits_follow_class_order(
        feats in prop::collection::vec(prop::collection::vec(-3.0..3.0f64, 4), 4),
        q in prop::collection::vec(-3.0..3.0f64, 4),
    ) {
        let sup: Vec<Vec<&[f64]>> = feats.iter().map(|f| vec![&f[..]]).collect();
        let rev: Vec<Vec<&[f64]>> = sup.iter().rev().cloned().collect();
        let a = protonet_predict(&sup, &q).unwrap();
        let mut b = protonet_predict(&rev, &q).unwrap();
        b.reverse();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn fft_matches_naive_dft(x in prop::collection::vec((-1.0..1.0f64, -1.0..1.0f64), 1..40)) {
        let x: Vec<Complex64> = x.into_iter().map(|(r, i)| Complex64::new(r, i)).collect();
        let fast = dft(&x);
        let slow = naive_dft(&x);
        let scale = slow.iter().map(|v| v.norm()).fold(1.0, f64::max);
        for (a, b) in fast.iter().zip(&slow) {
            prop_assert!((a - b).norm() / scale < 1e-9);
        }
    }

    #[test]
    fn folds_partition_the_environments(n in 2u32..30, folds in 1usize..6, seed in any::<u64>()) {
        prop_assume!(folds == 1 || folds <= n as usize);
        let ids: Vec<u32> = (100..100 + n).collect();
        let splits = fold_partition(&ids, folds, 0.8, seed).unwrap();
        for (train, test) in &splits {
            prop_assert!(!test.is_empty() && !train.is_empty());
            prop_assert!(train.iter().all(|t| !test.contains(t)));
            prop_assert_eq!(train.len() + test.len(), ids.len());
        }
        if folds > 1 {
            let mut all: Vec<u32> = splits.iter().flat_map(|(_, t)| t.iter().copied()).collect();
            all.sort_unstable();
            prop_assert_eq!(all, ids);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn episodes_are_disjoint_and_complete(shots in 1usize..4, n_query in 1usize..8, seed in any::<u64>()) {
        let data = build_dataset(&RadioConfig::wifi(8, 4, 1), 2, &default_class_specs(4), 5, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let env = data.environments[0].env_id;
        let ep = sample_episode(&data, env, shots, n_query, &mut rng).unwrap();
        prop_assert!(ep.is_disjoint());
        prop_assert!(ep.support.iter().all(|s| s.len() == shots));
        prop_assert_eq!(ep.query.len(), n_query);
        let obs = &data.environments[0].observations;
        for (c, s) in ep.support.iter().enumerate() {
            prop_assert!(s.iter().all(|&o| obs[o].label == c));
        }
        prop_assert!(ep.query.iter().all(|&(o, c)| obs[o].label == c));
    }

    #[test]
    fn dataset_files_round_trip(envs in 2usize..4, classes in 2usize..4, obs in 1usize..3, seed in any::<u64>()) {
        let data = build_dataset(&RadioConfig::fmcw(4, 8, 1), envs, &default_class_specs(classes), obs, seed).unwrap();
        let bytes = encode_dataset(&data).unwrap();
        prop_assert_eq!(&decode_dataset(&bytes).unwrap(), &data);
        prop_assert!(decode_dataset(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn config_text_round_trips(
        epochs in 0usize..50,
        lr in 1e-5..1.0f64,
        seeds in prop::collection::vec(0u64..1000, 1..4),
        folds in 1usize..12,
        f64_mode in any::<bool>(),
    ) {
        let mut cfg = RunConfig::default();
        cfg.train.epochs = epochs;
        cfg.train.lr_meta = lr;
        cfg.seeds = seeds;
        cfg.folds = folds;
        cfg.set("precision", if f64_mode { "f64" } else { "f32" }).unwrap();
        prop_assert_eq!(RunConfig::parse_text(&cfg.to_text()).unwrap(), cfg);
    }
}
