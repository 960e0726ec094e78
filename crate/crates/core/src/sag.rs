//! Self-supervised pseudo-anomaly generation in feature space.
//!
//! Three distortions turn a clean patch-feature grid into a distorted one
//! plus a per-patch mask marking the rows that were changed:
//!
//! * [`noise_all`]: Gaussian noise on every patch.
//! * [`noise_random`]: Gaussian noise on a random subset of patches.
//! * [`attention_shuffle`]: the most-attended patches of one CLS-attention
//!   head are permuted among themselves without fixed points.
//!
//! The mask is exact: `mask[i]` is true iff row `i` differs from the input.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::feature_store::FeatureRecord;
use crate::rng::PortableRng;
use crate::scalar::Scalar;

/// Attempts to draw noise that actually changes a row before giving up.
const MAX_NOISE_ATTEMPTS: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Strategy {
    NoiseAll,
    NoiseRandom,
    AttnShuffle,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::NoiseAll => "NoiseAll",
            Strategy::NoiseRandom => "NoiseRandom",
            Strategy::AttnShuffle => "AttnShuffle",
        })
    }
}

impl FromStr for Strategy {
    type Err = DistortionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        match key.as_str() {
            "noiseall" | "noiseallpatches" => Ok(Strategy::NoiseAll),
            "noiserandom" | "noiserandompatches" => Ok(Strategy::NoiseRandom),
            "attnshuffle" | "attentionshuffle" => Ok(Strategy::AttnShuffle),
            _ => Err(DistortionError::InvalidConfig(format!(
                "unknown distortion strategy {s:?}"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistortionConfig {
    /// Standard deviation of the additive Gaussian noise.
    pub epsilon: f64,
    pub fraction_low: f64,
    pub fraction_high: f64,
    pub strategies: Vec<Strategy>,
}

impl Default for DistortionConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.25,
            fraction_low: 0.05,
            fraction_high: 0.5,
            strategies: vec![Strategy::NoiseRandom],
        }
    }
}

impl DistortionConfig {
    pub fn with_strategies(strategies: Vec<Strategy>) -> Self {
        Self {
            strategies,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), DistortionError> {
        if self.strategies.is_empty() {
            return Err(DistortionError::InvalidConfig(
                "at least one distortion strategy is required".into(),
            ));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(DistortionError::InvalidConfig(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if !(0.0 < self.fraction_low
            && self.fraction_low <= self.fraction_high
            && self.fraction_high <= 1.0)
        {
            return Err(DistortionError::InvalidConfig(format!(
                "need 0 < fraction_low <= fraction_high <= 1, got [{}, {}]",
                self.fraction_low, self.fraction_high
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DistortionError {
    #[error("invalid distortion config: {0}")]
    InvalidConfig(String),
    #[error("non-finite input feature at row {row}, column {col}")]
    NonFiniteInput { row: usize, col: usize },
    #[error("attention row has length {actual}, expected {expected}")]
    AttentionLength { expected: usize, actual: usize },
    #[error("attention shuffle needs at least one attention head")]
    NoAttentionHeads,
    #[error("noise of scale {epsilon} left row {row} unchanged")]
    NoiseVanished { row: usize, epsilon: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistortionOutcome<T> {
    pub features: Array2<T>,
    pub mask: Vec<bool>,
    pub strategy_used: Strategy,
}

impl<T> DistortionOutcome<T> {
    pub fn n_distorted(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

fn check_finite<T: Scalar>(features: &ArrayView2<T>) -> Result<(), DistortionError> {
    match features.indexed_iter().find(|(_, v)| !v.is_finite()) {
        Some(((row, col), _)) => Err(DistortionError::NonFiniteInput { row, col }),
        None => Ok(()),
    }
}

/// Adds fresh noise to row `row` of `out` until at least one component
/// changes.
fn noise_row<T: Scalar>(
    out: &mut Array2<T>,
    input: &ArrayView2<T>,
    row: usize,
    epsilon: f64,
    rng: &mut PortableRng,
) -> Result<(), DistortionError> {
    let src = input.row(row);
    let mut dst = out.row_mut(row);
    for _ in 0..MAX_NOISE_ATTEMPTS {
        let mut changed = false;
        for (d, &s) in dst.iter_mut().zip(src.iter()) {
            *d = s + T::c(rng.gaussian() * epsilon);
            changed |= *d != s;
        }
        if changed {
            return Ok(());
        }
    }
    Err(DistortionError::NoiseVanished { row, epsilon })
}

/// Gaussian noise with standard deviation `epsilon` on every patch.
pub fn noise_all<T: Scalar>(
    features: ArrayView2<T>,
    epsilon: f64,
    rng: &mut PortableRng,
) -> Result<DistortionOutcome<T>, DistortionError> {
    check_finite(&features)?;
    let n = features.nrows();
    let mut out = features.to_owned();
    for row in 0..n {
        noise_row(&mut out, &features, row, epsilon, rng)?;
    }
    Ok(DistortionOutcome {
        features: out,
        mask: vec![true; n],
        strategy_used: Strategy::NoiseAll,
    })
}

/// Number of patches to noise for a fraction `f` of `n`.
pub fn noised_patch_count(f: f64, n: usize) -> usize {
    ((f * n as f64).round() as usize).clamp(1, n)
}

/// Gaussian noise on `max(1, round(f * N))` distinct patches, with `f`
/// drawn uniformly from the configured fraction range.
pub fn noise_random<T: Scalar>(
    features: ArrayView2<T>,
    config: &DistortionConfig,
    rng: &mut PortableRng,
) -> Result<DistortionOutcome<T>, DistortionError> {
    check_finite(&features)?;
    let n = features.nrows();
    let f = rng.uniform_range(config.fraction_low, config.fraction_high);
    let m = noised_patch_count(f, n);
    let mut chosen = rng.sample_indices(n, m);
    chosen.sort_unstable();
    let mut out = features.to_owned();
    let mut mask = vec![false; n];
    for &row in &chosen {
        noise_row(&mut out, &features, row, config.epsilon, rng)?;
        mask[row] = true;
    }
    Ok(DistortionOutcome {
        features: out,
        mask,
        strategy_used: Strategy::NoiseRandom,
    })
}

/// Indices of the `n` largest entries, ties broken by lower index.
pub fn top_attention_indices(attention: ArrayView1<f32>, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..attention.len()).collect();
    idx.sort_by(|&a, &b| attention[b].total_cmp(&attention[a]).then(a.cmp(&b)));
    idx.truncate(n);
    idx
}

/// Permutes the `n` most-attended patches of `attention_row` with a
/// fixed-point-free permutation. `n <= 1` is a no-op.
pub fn shuffle_top_patches<T: Scalar>(
    features: ArrayView2<T>,
    attention_row: ArrayView1<f32>,
    n: usize,
    rng: &mut PortableRng,
) -> Result<DistortionOutcome<T>, DistortionError> {
    let total = features.nrows();
    if attention_row.len() != total {
        return Err(DistortionError::AttentionLength {
            expected: total,
            actual: attention_row.len(),
        });
    }
    let mut out = features.to_owned();
    let mut mask = vec![false; total];
    if n >= 2 {
        let selected = top_attention_indices(attention_row, n.min(total));
        let perm = rng.derangement(selected.len());
        for (slot, &src) in selected.iter().zip(perm.iter()) {
            out.row_mut(*slot).assign(&features.row(selected[src]));
        }
        for &i in &selected {
            // Equal rows swapped onto each other are not a distortion.
            mask[i] = out.row(i) != features.row(i);
        }
    }
    Ok(DistortionOutcome {
        features: out,
        mask,
        strategy_used: Strategy::AttnShuffle,
    })
}

/// Samples a head and a count `n` in `1..=N`, then shuffles the `n`
/// most-attended patches of that head.
pub fn attention_shuffle<T: Scalar>(
    features: ArrayView2<T>,
    attention: ArrayView2<f32>,
    rng: &mut PortableRng,
) -> Result<DistortionOutcome<T>, DistortionError> {
    let total = features.nrows();
    if attention.nrows() == 0 {
        return Err(DistortionError::NoAttentionHeads);
    }
    if attention.ncols() != total {
        return Err(DistortionError::AttentionLength {
            expected: total,
            actual: attention.ncols(),
        });
    }
    let head = rng.below_usize(attention.nrows());
    let n = 1 + rng.below_usize(total);
    shuffle_top_patches(features, attention.index_axis(Axis(0), head), n, rng)
}

/// Applies one strategy drawn uniformly from `config.strategies`.
pub fn distort<T: Scalar>(
    features: ArrayView2<T>,
    attention: ArrayView2<f32>,
    config: &DistortionConfig,
    rng: &mut PortableRng,
) -> Result<DistortionOutcome<T>, DistortionError> {
    config.validate()?;
    let strategy = config.strategies[rng.below_usize(config.strategies.len())];
    match strategy {
        Strategy::NoiseAll => noise_all(features, config.epsilon, rng),
        Strategy::NoiseRandom => noise_random(features, config, rng),
        Strategy::AttnShuffle => attention_shuffle(features, attention, rng),
    }
}

/// [`distort`] on a stored record's own features and attention.
pub fn distort_record(
    record: &FeatureRecord,
    config: &DistortionConfig,
    rng: &mut PortableRng,
) -> Result<DistortionOutcome<f32>, DistortionError> {
    distort(record.features.view(), record.attention.view(), config, rng)
}
