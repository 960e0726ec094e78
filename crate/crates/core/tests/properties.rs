mod common;

use common::{brute_force_auroc, naive_top_k, random_record, tied_instance};
use gad_core::discriminator::{decode_checkpoint, encode_checkpoint, DiscriminatorHyper};
use gad_core::evaluation::compute_auroc;
use gad_core::feature_store::{decode_record, encode_record, Label};
use gad_core::optim::cosine_lr;
use gad_core::sag::{attention_shuffle, distort, DistortionConfig, Strategy};
use gad_core::scoring::{anomaly_map, top_k_mean};
use gad_core::{Discriminator64, PatchScores, PortableRng};
use ndarray::{Array1, Array2};
use proptest::prelude::*;

fn rows_sorted(a: &Array2<f64>) -> Vec<Vec<u64>> {
    let mut rows: Vec<Vec<u64>> = a
        .outer_iter()
        .map(|r| r.iter().map(|v| v.to_bits()).collect())
        .collect();
    rows.sort();
    rows
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn auroc_matches_pairwise_count(seed in any::<u64>()) {
        let (s, l) = tied_instance(&mut PortableRng::new(seed));
        let a = compute_auroc(&s, &l).unwrap();
        prop_assert!((a - brute_force_auroc(&s, &l)).abs() <= 1e-12);
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn auroc_invariant_under_increasing_transform(seed in any::<u64>()) {
        let (s, l) = tied_instance(&mut PortableRng::new(seed));
        let t: Vec<f64> = s.iter().map(|v| (3.0 * v).exp() + 2.0).collect();
        prop_assert_eq!(compute_auroc(&s, &l).unwrap(), compute_auroc(&t, &l).unwrap());
    }

    #[test]
    fn auroc_complement_sums_to_one(seed in any::<u64>()) {
        let (s, l) = tied_instance(&mut PortableRng::new(seed));
        let flipped: Vec<bool> = l.iter().map(|v| !v).collect();
        let sum = compute_auroc(&s, &l).unwrap() + compute_auroc(&s, &flipped).unwrap();
        prop_assert_eq!(sum, 1.0);
    }

    #[test]
    fn gadf_roundtrip(seed in any::<u64>(), anomalous in any::<bool>()) {
        let r = random_record(&mut PortableRng::new(seed), anomalous);
        let bytes = encode_record(&r).unwrap();
        prop_assert_eq!(decode_record(&bytes).unwrap(), r);
    }

    #[test]
    fn gadf_mutations_never_panic(seed in any::<u64>(), flips in 1usize..8) {
        let mut rng = PortableRng::new(seed);
        let anomalous = rng.below(2) == 1;
        let r = random_record(&mut rng, anomalous);
        let mut bytes = encode_record(&r).unwrap();
        for _ in 0..flips {
            let i = rng.below_usize(bytes.len());
            bytes[i] = rng.below(256) as u8;
        }
        if rng.below(4) == 0 {
            bytes.truncate(rng.below_usize(bytes.len()));
        }
        if let Ok(rec) = decode_record(&bytes) {
            prop_assert!(rec.validate().is_ok());
        }
    }

    #[test]
    fn top_k_identities(values in prop::collection::vec(0.0f64..1.0, 1..200), k_frac in 0.0f64..1.0) {
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        prop_assert_eq!(top_k_mean(&values, n).unwrap().score, mean);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert_eq!(top_k_mean(&values, 1).unwrap().score, max);
        let k = 1 + ((n - 1) as f64 * k_frac) as usize;
        let s = top_k_mean(&values, k).unwrap().score;
        prop_assert!((s - naive_top_k(&values, k)).abs() < 1e-12);
        if k < n {
            // Adding a lower-ranked patch can only lower the mean.
            prop_assert!(top_k_mean(&values, k + 1).unwrap().score <= s + 1e-12);
        }
        prop_assert!(top_k_mean(&values, 0).is_err());
        prop_assert!(top_k_mean(&values, n + 1).is_err());
    }

    #[test]
    fn image_score_is_monotone_in_patch_scores(
        values in prop::collection::vec(0.0f64..0.9, 1..100),
        idx in any::<prop::sample::Index>(),
        bump in 0.0f64..0.1,
        k in 1usize..20,
    ) {
        let k = k.min(values.len());
        let mut raised = values.clone();
        raised[idx.index(values.len())] += bump;
        prop_assert!(top_k_mean(&raised, k).unwrap().score >= top_k_mean(&values, k).unwrap().score);
    }

    #[test]
    fn distortion_mask_marks_exactly_the_changed_rows(seed in any::<u64>()) {
        let mut rng = PortableRng::new(seed);
        let n = 1 + rng.below_usize(20);
        let d = 1 + rng.below_usize(6);
        // Duplicate rows exercise the equal-row swap case.
        let base = Array2::from_shape_fn((n, d), |(i, j)| ((i % 3) * d + j) as f64 * 0.5);
        let att = Array2::from_shape_fn((2, n), |(h, i)| ((h + 1) * (i + 1)) as f32 / (h + 1) as f32);
        let cfg = DistortionConfig::with_strategies(vec![
            Strategy::NoiseAll,
            Strategy::NoiseRandom,
            Strategy::AttnShuffle,
        ]);
        let out = distort(base.view(), att.view(), &cfg, &mut rng).unwrap();
        for i in 0..n {
            prop_assert_eq!(out.mask[i], out.features.row(i) != base.row(i));
        }
        if out.strategy_used == Strategy::AttnShuffle {
            prop_assert_eq!(rows_sorted(&out.features), rows_sorted(&base));
        }
    }

    #[test]
    fn attention_shuffle_permutes_rows(seed in any::<u64>()) {
        let mut rng = PortableRng::new(seed);
        let n = 1 + rng.below_usize(30);
        let base = Array2::from_shape_simple_fn((n, 4), || rng.gaussian());
        let att = Array2::from_shape_simple_fn((3, n), || rng.uniform() as f32);
        let out = attention_shuffle(base.view(), att.view(), &mut rng).unwrap();
        prop_assert_eq!(rows_sorted(&out.features), rows_sorted(&base));
    }

    #[test]
    fn schedule_is_monotone_and_bounded(total in 1usize..5000, floor in 0.0f64..1.0) {
        let lr0 = 5e-4;
        let mut prev = f64::INFINITY;
        for step in (0..=total).step_by(1 + total / 50) {
            let lr = cosine_lr(step, total, lr0, floor).unwrap();
            prop_assert!(lr <= prev + 1e-18);
            prop_assert!(lr >= floor * lr0 - 1e-18 && lr <= lr0 + 1e-18);
            prev = lr;
        }
        prop_assert!(cosine_lr(total + 1, total, lr0, floor).is_err());
    }

    #[test]
    fn anomaly_maps_stay_in_unit_range(seed in any::<u64>(), sigma in 0.0f64..6.0) {
        let mut rng = PortableRng::new(seed);
        let (gh, gw) = (1 + rng.below_usize(5), 1 + rng.below_usize(5));
        let probs = Array1::from_shape_simple_fn(gh * gw, || rng.uniform());
        let scores = PatchScores::from_probabilities(probs, gh, gw);
        let (h, w) = (1 + rng.below_usize(40), 1 + rng.below_usize(40));
        let map = anomaly_map(&scores, h, w, sigma).unwrap();
        prop_assert_eq!(map.values.dim(), (h, w));
        prop_assert!(map.values.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn checkpoint_roundtrip(seed in any::<u64>(), residual in any::<bool>()) {
        let mut rng = PortableRng::new(seed);
        let hyper = DiscriminatorHyper { n_heads: 2, hidden: 1 + rng.below_usize(8), residual, ..Default::default() };
        let model = Discriminator64::init(4, 1 + rng.below_usize(3), 2, hyper, &mut rng).unwrap();
        let bytes = encode_checkpoint(&model);
        let back: Discriminator64 = decode_checkpoint(&bytes, Some(model.shape())).unwrap();
        prop_assert_eq!(encode_checkpoint(&back), bytes);
    }
}

#[test]
fn constant_patch_scores_give_a_constant_map() {
    let probs = Array1::from_elem(12, 0.3f64);
    let scores = PatchScores::from_probabilities(probs, 3, 4);
    let map = anomaly_map(&scores, 42, 56, 4.0).unwrap();
    assert!(map.values.iter().all(|&v| (v - 0.3).abs() < 1e-12));
}

/// Every single-byte substitution in the header of a masked record is
/// rejected, except relabelling anomalous as unknown, which is valid.
#[test]
fn header_substitutions_are_rejected() {
    let mut rng = PortableRng::new(11);
    let mut r = random_record(&mut rng, true);
    r.label = Label::Anomalous;
    let bytes = encode_record(&r).unwrap();
    for i in 0..28 {
        for v in 0..=255u8 {
            if v == bytes[i] {
                continue;
            }
            let mut m = bytes.clone();
            m[i] = v;
            let res = decode_record(&m);
            if i == 18 && v == 255 {
                assert_eq!(res.unwrap().label, Label::Unknown);
            } else {
                assert!(res.is_err(), "byte {i} = {v} accepted");
            }
        }
    }
}
