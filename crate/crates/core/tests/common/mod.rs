#![allow(dead_code)]

use gad_core::feature_store::{FeatureRecord, Label};
use gad_core::PortableRng;
use ndarray::Array2;

/// Random valid record; anomalous records carry a random mask.
pub fn random_record(rng: &mut PortableRng, anomalous: bool) -> FeatureRecord {
    let grid_h = 1 + rng.below_usize(4);
    let grid_w = 1 + rng.below_usize(4);
    let n = grid_h * grid_w;
    let dim = 1 + rng.below_usize(6);
    let heads = 1 + rng.below_usize(3);
    let features = Array2::from_shape_simple_fn((n, dim), || rng.gaussian() as f32);
    let mut attention = Array2::from_shape_simple_fn((heads, n), || (0.01 + rng.uniform()) as f32);
    for mut row in attention.outer_iter_mut() {
        let s: f32 = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    let image_h = 1 + rng.below_usize(8);
    let image_w = 1 + rng.below_usize(8);
    let pixel_mask =
        anomalous.then(|| Array2::from_shape_simple_fn((image_h, image_w), || rng.below(2) as u8));
    FeatureRecord {
        grid_h,
        grid_w,
        features,
        attention,
        label: if anomalous {
            Label::Anomalous
        } else {
            Label::Normal
        },
        image_h,
        image_w,
        pixel_mask,
    }
}

/// O(n^2) pairwise AUROC, ties counted half.
pub fn brute_force_auroc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &li) in labels.iter().enumerate() {
        if !li {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj {
                continue;
            }
            pairs += 1.0;
            if scores[i] > scores[j] {
                wins += 1.0;
            } else if scores[i] == scores[j] {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

/// Random scores with many ties and both labels present.
pub fn tied_instance(rng: &mut PortableRng) -> (Vec<f64>, Vec<bool>) {
    let n = 2 + rng.below_usize(60);
    let levels = 1 + rng.below_usize(8);
    let mut labels: Vec<bool> = (0..n).map(|_| rng.below(2) == 1).collect();
    labels[0] = true;
    labels[1] = false;
    let scores = (0..n)
        .map(|_| {
            if rng.below(2) == 0 {
                rng.below_usize(levels) as f64 / levels as f64
            } else {
                rng.gaussian()
            }
        })
        .collect();
    (scores, labels)
}

/// Reference top-k mean: sort descending and average the first k.
pub fn naive_top_k(values: &[f64], k: usize) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| b.total_cmp(a));
    v[..k].iter().sum::<f64>() / k as f64
}
