//! Threshold-free detection metrics.

use ndarray::Array2;
use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("AUROC needs both classes (positives: {positives}, negatives: {negatives})")]
    SingleClass { positives: usize, negatives: usize },
    #[error("{scores} scores but {labels} labels")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("non-finite score at index {0}")]
    NonFinite(usize),
    #[error("map/mask pair {index}: map is {map:?}, mask is {mask:?}")]
    DimensionMismatch {
        index: usize,
        map: (usize, usize),
        mask: (usize, usize),
    },
    #[error("{maps} maps but {masks} masks")]
    CountMismatch { maps: usize, masks: usize },
}

/// Area under the ROC curve as the Mann–Whitney statistic
/// `P(s_pos > s_neg) + P(s_pos = s_neg) / 2`, computed from midranks.
///
/// Twice every midrank is an integer, so the rank sum is accumulated
/// exactly and the only rounding is the final division.
pub fn compute_auroc<T: Scalar>(scores: &[T], labels: &[bool]) -> Result<f64, MetricError> {
    if scores.len() != labels.len() {
        return Err(MetricError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(MetricError::NonFinite(i));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(MetricError::SingleClass {
            positives,
            negatives,
        });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite"));

    // twice the positive rank sum
    let mut rank_sum_x2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // positions i..j (0-based) share the midrank (i + 1 + j) / 2
        let pos_in_group = order[i..j].iter().filter(|&&k| labels[k]).count() as u128;
        rank_sum_x2 += pos_in_group * (i as u128 + 1 + j as u128);
        i = j;
    }
    let p = positives as u128;
    let u_x2 = rank_sum_x2 - p * (p + 1);
    Ok(u_x2 as f64 / (2 * p * negatives as u128) as f64)
}

/// One image's pixel-level inputs: the predicted map and its ground-truth
/// mask (`None` means every pixel is normal).
pub struct PixelPair<'a, T> {
    pub map: &'a Array2<T>,
    pub mask: Option<&'a Array2<u8>>,
}

fn check_pairs<T>(pairs: &[PixelPair<'_, T>]) -> Result<(), MetricError> {
    for (index, p) in pairs.iter().enumerate() {
        if let Some(m) = p.mask {
            if m.dim() != p.map.dim() {
                return Err(MetricError::DimensionMismatch {
                    index,
                    map: p.map.dim(),
                    mask: m.dim(),
                });
            }
        }
    }
    Ok(())
}

/// Pixel AUROC over the pooled pixels of all images.
pub fn pixel_auroc<T: Scalar>(pairs: &[PixelPair<'_, T>]) -> Result<f64, MetricError> {
    check_pairs(pairs)?;
    let total: usize = pairs.iter().map(|p| p.map.len()).sum();
    let mut scores = Vec::with_capacity(total);
    let mut labels = Vec::with_capacity(total);
    for p in pairs {
        scores.extend(p.map.iter().copied());
        match p.mask {
            Some(m) => labels.extend(m.iter().map(|&v| v != 0)),
            None => labels.extend(std::iter::repeat_n(false, p.map.len())),
        }
    }
    compute_auroc(&scores, &labels)
}

/// Mean of per-image pixel AUROCs over images that contain both classes.
pub fn pixel_auroc_per_image<T: Scalar>(pairs: &[PixelPair<'_, T>]) -> Result<f64, MetricError> {
    check_pairs(pairs)?;
    let mut values = Vec::new();
    for p in pairs {
        if let Some(m) = p.mask {
            let labels: Vec<bool> = m.iter().map(|&v| v != 0).collect();
            let scores: Vec<T> = p.map.iter().copied().collect();
            match compute_auroc(&scores, &labels) {
                Ok(a) => values.push(a),
                Err(MetricError::SingleClass { .. }) => {}
                Err(e) => return Err(e),
            }
        }
    }
    if values.is_empty() {
        return Err(MetricError::SingleClass {
            positives: 0,
            negatives: 0,
        });
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// Convenience pairing helper for owned data.
pub fn pixel_pairs<'a, T>(
    maps: &'a [Array2<T>],
    masks: &'a [Option<Array2<u8>>],
) -> Result<Vec<PixelPair<'a, T>>, MetricError> {
    if maps.len() != masks.len() {
        return Err(MetricError::CountMismatch {
            maps: maps.len(),
            masks: masks.len(),
        });
    }
    Ok(maps
        .iter()
        .zip(masks)
        .map(|(map, mask)| PixelPair {
            map,
            mask: mask.as_ref(),
        })
        .collect())
}
