use ctvr::eval::{self, RecallMatrix};
use ctvr::featuredb::{FeatureStore, VideoFeatureRecord};
use ctvr::losses::{self, SimilarityBatch};
use ctvr::numerics::Tensor;
use ctvr::tame::TameAdapter;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn randn(shape: &[usize], std: f64, seed: u64) -> Tensor {
    Tensor::randn(shape, std, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn adapter(o: usize, r: usize, experts: usize, k: usize, seed: u64) -> TameAdapter {
    TameAdapter {
        a: randn(&[r, o], 0.5, seed),
        b: (0..experts).map(|i| randn(&[o, r], 0.5, seed + 1 + i as u64)).collect(),
        router: randn(&[experts, o], 1.0, seed + 100),
        lambda: 0.7,
        k,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gates_have_k_support_and_unit_mass(seed in 0u64..10_000, experts in 1usize..9, k_raw in 1usize..9, o in 2usize..9) {
        let k = 1 + (k_raw - 1) % experts;
        let ad = adapter(o, 2, experts, k, seed);
        let eos = randn(&[o], 1.0, seed ^ 7);
        let proto = randn(&[o], 0.2, seed ^ 9);
        let gates = ad.route(&eos, &proto).unwrap();
        prop_assert_eq!(gates.len(), experts);
        prop_assert_eq!(gates.iter().filter(|&&w| w != 0.0).count(), k);
        prop_assert!(gates.iter().all(|&w| (0.0..=1.0).contains(&w)));
        prop_assert!((gates.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn expert_permutation_is_invisible(seed in 0u64..10_000, experts in 2usize..7, shift in 1usize..6) {
        let o = 5;
        let ad = adapter(o, 3, experts, 2.min(experts), seed);
        let x = randn(&[4, o], 1.0, seed ^ 3);
        let w = randn(&[o, o], 0.5, seed ^ 4);
        let eos = randn(&[o], 1.0, seed ^ 5);
        let proto = randn(&[o], 0.3, seed ^ 6);
        let perm: Vec<usize> = (0..experts).map(|i| (i + shift) % experts).collect();
        let mut permuted = ad.clone();
        permuted.b = perm.iter().map(|&i| ad.b[i].clone()).collect();
        let rows: Vec<Vec<f64>> = perm.iter().map(|&i| ad.router.row(i).to_vec()).collect();
        permuted.router = Tensor::from_rows(&rows).unwrap();

        let gates = ad.route(&eos, &proto).unwrap();
        let pgates = permuted.route(&eos, &proto).unwrap();
        for (j, &i) in perm.iter().enumerate() {
            prop_assert_eq!(pgates[j].to_bits(), gates[i].to_bits());
        }
        let y = ad.adapted_linear(&w, &x, &gates).unwrap();
        let py = permuted.adapted_linear(&w, &x, &pgates).unwrap();
        // two selected experts: their sum is order independent in floating point
        prop_assert_eq!(y.data(), py.data());
    }

    #[test]
    fn ranking_ignores_positive_scaling(seed in 0u64..10_000, n in 1usize..20, scale in 0.1f64..50.0) {
        let pool = randn(&[n, 6], 1.0, seed);
        let q = randn(&[6], 1.0, seed ^ 1);
        let scaled: Vec<f64> = q.data().iter().map(|v| v * scale).collect();
        prop_assert_eq!(eval::rank_videos(q.data(), &pool).unwrap(), eval::rank_videos(&scaled, &pool).unwrap());
    }

    #[test]
    fn recall_is_monotone_in_k(ranks in prop::collection::vec(1usize..60, 1..50)) {
        let mut last = 0.0;
        for k in 1..=60 {
            let r = eval::recall_at_k(&ranks, k);
            prop_assert!(r >= last && r <= 100.0);
            last = r;
        }
        prop_assert_eq!(last, 100.0);
        let mut shuffled = ranks.clone();
        shuffled.reverse();
        prop_assert_eq!(eval::median_mean_rank(&ranks).unwrap(), eval::median_mean_rank(&shuffled).unwrap());
    }

    #[test]
    fn bwf_is_zero_without_change(diag in prop::collection::vec(0.0f64..100.0, 1..8)) {
        let rows: Vec<Vec<f64>> = (1..=diag.len()).map(|t| diag[..t].to_vec()).collect();
        let r = RecallMatrix::from_rows(rows).unwrap();
        for t in 1..=diag.len() {
            prop_assert_eq!(eval::backward_forgetting(&r, t).unwrap(), 0.0);
        }
    }

    #[test]
    fn references_never_lower_ct(seed in 0u64..10_000, n in 1usize..6, m in 1usize..8) {
        let q = randn(&[n, 4], 1.0, seed);
        let v = randn(&[n, 4], 1.0, seed ^ 1);
        let refs = randn(&[m, 4], 1.0, seed ^ 2);
        let base = losses::ct_loss(&SimilarityBatch { q: q.clone(), v: v.clone(), refs: None, tau: 0.1 }).unwrap();
        let mut last = base;
        for take in 1..=m {
            let sub = Tensor::from_rows(&(0..take).map(|i| refs.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
            let with = losses::ct_loss(&SimilarityBatch { q: q.clone(), v: v.clone(), refs: Some(sub), tau: 0.1 }).unwrap();
            prop_assert!(with >= last);
            last = with;
        }
    }

    #[test]
    fn feature_store_roundtrip(seed in 0u64..10_000, width in 1usize..6, counts in prop::collection::vec(0usize..5, 1..5)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = FeatureStore::new(width).unwrap();
        let mut id = 0u64;
        let mut prefix = store.encode();
        for (t, &c) in counts.iter().enumerate() {
            let records = (0..c)
                .map(|_| {
                    id += 1;
                    VideoFeatureRecord {
                        task: t as u32 + 1,
                        video_id: id,
                        category: (id % 7) as u32,
                        feature: Tensor::randn(&[width], 1.0, &mut rng).to_f32_values(),
                    }
                })
                .collect();
            store.append_task_features(t as u32 + 1, records).unwrap();
            let bytes = store.encode();
            // the header count aside, earlier bytes are never rewritten
            prop_assert_eq!(&bytes[..16], &prefix[..16]);
            prop_assert_eq!(&bytes[24..prefix.len()], &prefix[24..]);
            prefix = bytes;
        }
        let back = FeatureStore::decode(&prefix).unwrap();
        prop_assert_eq!(back.encode(), prefix);
        prop_assert_eq!(back, store);
    }
}
