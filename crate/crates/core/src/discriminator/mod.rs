//! Cross-patch attention discriminator.
//!
//! ```text
//! x0     = features + pos_embed
//! fused  = MHA(x0)                 (optional residual: x0 + MHA(x0))
//! logits = MLP(LN(fused))          D -> hidden -> hidden -> 1, GELU, last layer bias-free
//! ```
//!
//! Forward and backward run over a batch of examples at once: attention is
//! evaluated per example, every token-wise layer on the stacked
//! `[examples * patches, dim]` matrix.

mod backward;
pub mod checkpoint;
mod forward;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::PortableRng;
use crate::scalar::{sigmoid, Scalar};

pub use backward::{backward, Gradients};
pub use checkpoint::{
    checkpoint_id, checkpoint_scalar_width, decode_checkpoint, encode_checkpoint, load_checkpoint,
    save_checkpoint, CheckpointError, ModelShape,
};
pub use forward::{forward, forward_batch, ForwardCache};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DropoutPlacement {
    /// After the attention output projection and after each hidden MLP
    /// activation.
    AttentionAndHidden,
    /// After the attention output projection only.
    AttentionOnly,
}

impl DropoutPlacement {
    pub(crate) fn code(self) -> u8 {
        match self {
            DropoutPlacement::AttentionAndHidden => 0,
            DropoutPlacement::AttentionOnly => 1,
        }
    }

    pub(crate) fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(DropoutPlacement::AttentionAndHidden),
            1 => Some(DropoutPlacement::AttentionOnly),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorHyper {
    pub n_heads: usize,
    pub hidden: usize,
    pub dropout: f64,
    pub dropout_placement: DropoutPlacement,
    /// Adds the attention input back onto its output before the layer norm.
    pub residual: bool,
}

impl Default for DiscriminatorHyper {
    fn default() -> Self {
        Self {
            n_heads: 4,
            hidden: 2048,
            dropout: 0.1,
            dropout_placement: DropoutPlacement::AttentionAndHidden,
            residual: false,
        }
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("dim {dim} is not divisible by {n_heads} heads")]
    HeadSplit { dim: usize, n_heads: usize },
    #[error("invalid hyperparameter: {0}")]
    InvalidHyper(String),
    #[error("input shape {actual:?} does not match model ({expected:?})")]
    Shape {
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("non-finite activation in layer {0}")]
    NonFinite(&'static str),
    #[error("batch is empty")]
    EmptyBatch,
    #[error("mask length {actual} does not match {expected} patches")]
    MaskLength { expected: usize, actual: usize },
    #[error("forward cache does not match this model")]
    CacheMismatch,
}

/// All trainable tensors. Also used to hold gradients and optimizer moments.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorParams<T> {
    pub pos_embed: Array2<T>,
    pub wq: Array2<T>,
    pub bq: Array1<T>,
    pub wk: Array2<T>,
    pub bk: Array1<T>,
    pub wv: Array2<T>,
    pub bv: Array1<T>,
    pub wo: Array2<T>,
    pub bo: Array1<T>,
    pub ln_gamma: Array1<T>,
    pub ln_beta: Array1<T>,
    pub w1: Array2<T>,
    pub b1: Array1<T>,
    pub w2: Array2<T>,
    pub b2: Array1<T>,
    /// Final `hidden -> 1` layer; it has no bias.
    pub w3: Array1<T>,
}

/// Name, contents and whether weight decay applies.
pub type TensorRef<'a, T> = (&'static str, &'a [T], bool);
pub type TensorMut<'a, T> = (&'static str, &'a mut [T], bool);

impl<T: Scalar> DiscriminatorParams<T> {
    pub fn zeros(n_patches: usize, dim: usize, hidden: usize) -> Self {
        Self {
            pos_embed: Array2::zeros((n_patches, dim)),
            wq: Array2::zeros((dim, dim)),
            bq: Array1::zeros(dim),
            wk: Array2::zeros((dim, dim)),
            bk: Array1::zeros(dim),
            wv: Array2::zeros((dim, dim)),
            bv: Array1::zeros(dim),
            wo: Array2::zeros((dim, dim)),
            bo: Array1::zeros(dim),
            ln_gamma: Array1::zeros(dim),
            ln_beta: Array1::zeros(dim),
            w1: Array2::zeros((dim, hidden)),
            b1: Array1::zeros(hidden),
            w2: Array2::zeros((hidden, hidden)),
            b2: Array1::zeros(hidden),
            w3: Array1::zeros(hidden),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(
            self.pos_embed.nrows(),
            self.pos_embed.ncols(),
            self.w3.len(),
        )
    }

    /// Tensors in checkpoint order. Layer-norm parameters and positional
    /// embeddings are excluded from weight decay.
    pub fn tensors(&self) -> Vec<TensorRef<'_, T>> {
        vec![
            ("pos_embed", self.pos_embed.as_slice().unwrap(), false),
            ("wq", self.wq.as_slice().unwrap(), true),
            ("bq", self.bq.as_slice().unwrap(), true),
            ("wk", self.wk.as_slice().unwrap(), true),
            ("bk", self.bk.as_slice().unwrap(), true),
            ("wv", self.wv.as_slice().unwrap(), true),
            ("bv", self.bv.as_slice().unwrap(), true),
            ("wo", self.wo.as_slice().unwrap(), true),
            ("bo", self.bo.as_slice().unwrap(), true),
            ("ln_gamma", self.ln_gamma.as_slice().unwrap(), false),
            ("ln_beta", self.ln_beta.as_slice().unwrap(), false),
            ("w1", self.w1.as_slice().unwrap(), true),
            ("b1", self.b1.as_slice().unwrap(), true),
            ("w2", self.w2.as_slice().unwrap(), true),
            ("b2", self.b2.as_slice().unwrap(), true),
            ("w3", self.w3.as_slice().unwrap(), true),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<TensorMut<'_, T>> {
        vec![
            ("pos_embed", self.pos_embed.as_slice_mut().unwrap(), false),
            ("wq", self.wq.as_slice_mut().unwrap(), true),
            ("bq", self.bq.as_slice_mut().unwrap(), true),
            ("wk", self.wk.as_slice_mut().unwrap(), true),
            ("bk", self.bk.as_slice_mut().unwrap(), true),
            ("wv", self.wv.as_slice_mut().unwrap(), true),
            ("bv", self.bv.as_slice_mut().unwrap(), true),
            ("wo", self.wo.as_slice_mut().unwrap(), true),
            ("bo", self.bo.as_slice_mut().unwrap(), true),
            ("ln_gamma", self.ln_gamma.as_slice_mut().unwrap(), false),
            ("ln_beta", self.ln_beta.as_slice_mut().unwrap(), false),
            ("w1", self.w1.as_slice_mut().unwrap(), true),
            ("b1", self.b1.as_slice_mut().unwrap(), true),
            ("w2", self.w2.as_slice_mut().unwrap(), true),
            ("b2", self.b2.as_slice_mut().unwrap(), true),
            ("w3", self.w3.as_slice_mut().unwrap(), true),
        ]
    }

    pub fn n_values(&self) -> usize {
        self.tensors().iter().map(|t| t.1.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, v, _)| v.iter().all(|x| x.is_finite()))
    }

    /// First tensor holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.tensors()
            .into_iter()
            .find(|(_, v, _)| v.iter().any(|x| !x.is_finite()))
            .map(|t| t.0)
    }

    pub fn scale(&mut self, factor: T) {
        for (_, v, _) in self.tensors_mut() {
            v.iter_mut().for_each(|x| *x *= factor);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorModel<T> {
    pub hyper: DiscriminatorHyper,
    pub dim: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub params: DiscriminatorParams<T>,
}

pub(crate) fn validate_hyper(dim: usize, hyper: &DiscriminatorHyper) -> Result<(), ModelError> {
    if hyper.n_heads == 0 || !dim.is_multiple_of(hyper.n_heads) {
        return Err(ModelError::HeadSplit {
            dim,
            n_heads: hyper.n_heads,
        });
    }
    if hyper.hidden == 0 {
        return Err(ModelError::InvalidHyper(
            "hidden width must be positive".into(),
        ));
    }
    if !(0.0..1.0).contains(&hyper.dropout) {
        return Err(ModelError::InvalidHyper(format!(
            "dropout must be in [0, 1), got {}",
            hyper.dropout
        )));
    }
    Ok(())
}

fn gaussian_matrix<T: Scalar>(
    rows: usize,
    cols: usize,
    std: f64,
    rng: &mut PortableRng,
) -> Array2<T> {
    Array2::from_shape_simple_fn((rows, cols), || T::c(rng.gaussian() * std))
}

fn xavier_std(fan_in: usize, fan_out: usize) -> f64 {
    (2.0 / (fan_in + fan_out) as f64).sqrt()
}

impl<T: Scalar> DiscriminatorModel<T> {
    /// Xavier-normal projections, zero biases, unit layer-norm scale and
    /// `N(0, 0.02)` positional embeddings.
    pub fn init(
        dim: usize,
        grid_h: usize,
        grid_w: usize,
        hyper: DiscriminatorHyper,
        rng: &mut PortableRng,
    ) -> Result<Self, ModelError> {
        validate_hyper(dim, &hyper)?;
        let n = grid_h * grid_w;
        if n == 0 || dim == 0 {
            return Err(ModelError::InvalidHyper("empty geometry".into()));
        }
        let h = hyper.hidden;
        let mut p = DiscriminatorParams::zeros(n, dim, h);
        p.pos_embed = gaussian_matrix(n, dim, 0.02, rng);
        let sd = xavier_std(dim, dim);
        p.wq = gaussian_matrix(dim, dim, sd, rng);
        p.wk = gaussian_matrix(dim, dim, sd, rng);
        p.wv = gaussian_matrix(dim, dim, sd, rng);
        p.wo = gaussian_matrix(dim, dim, sd, rng);
        p.ln_gamma.fill(T::one());
        p.w1 = gaussian_matrix(dim, h, xavier_std(dim, h), rng);
        p.w2 = gaussian_matrix(h, h, xavier_std(h, h), rng);
        let sd3 = xavier_std(h, 1);
        p.w3 = Array1::from_shape_simple_fn(h, || T::c(rng.gaussian() * sd3));
        Ok(Self {
            hyper,
            dim,
            grid_h,
            grid_w,
            params: p,
        })
    }

    pub fn n_patches(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn head_width(&self) -> usize {
        self.dim / self.hyper.n_heads
    }

    /// Converts every parameter to another scalar type.
    pub fn cast<U: Scalar>(&self) -> DiscriminatorModel<U> {
        let c1 = |a: &Array1<T>| a.mapv(|v| U::c(v.to_f64_lossless()));
        let c2 = |a: &Array2<T>| a.mapv(|v| U::c(v.to_f64_lossless()));
        let p = &self.params;
        DiscriminatorModel {
            hyper: self.hyper,
            dim: self.dim,
            grid_h: self.grid_h,
            grid_w: self.grid_w,
            params: DiscriminatorParams {
                pos_embed: c2(&p.pos_embed),
                wq: c2(&p.wq),
                bq: c1(&p.bq),
                wk: c2(&p.wk),
                bk: c1(&p.bk),
                wv: c2(&p.wv),
                bv: c1(&p.bv),
                wo: c2(&p.wo),
                bo: c1(&p.bo),
                ln_gamma: c1(&p.ln_gamma),
                ln_beta: c1(&p.ln_beta),
                w1: c2(&p.w1),
                b1: c1(&p.b1),
                w2: c2(&p.w2),
                b2: c1(&p.b2),
                w3: c1(&p.w3),
            },
        }
    }

    /// Inference-mode patch scores for one record's features.
    pub fn score(&self, features: ndarray::ArrayView2<T>) -> Result<PatchScores<T>, ModelError> {
        let (logits, _) = forward(self, features, false, None)?;
        Ok(PatchScores::from_logits(logits, self.grid_h, self.grid_w))
    }
}

/// Per-patch anomaly logits and probabilities on the patch grid.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchScores<T> {
    pub logits: Array1<T>,
    pub probabilities: Array1<T>,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl<T: Scalar> PatchScores<T> {
    pub fn from_logits(logits: Array1<T>, grid_h: usize, grid_w: usize) -> Self {
        let probabilities = logits.mapv(sigmoid);
        Self {
            logits,
            probabilities,
            grid_h,
            grid_w,
        }
    }

    /// Scores given directly as probabilities (logits recovered by logit).
    pub fn from_probabilities(probabilities: Array1<T>, grid_h: usize, grid_w: usize) -> Self {
        let logits = probabilities.mapv(|p| (p / (T::one() - p)).ln());
        Self {
            logits,
            probabilities,
            grid_h,
            grid_w,
        }
    }

    pub fn len(&self) -> usize {
        self.probabilities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probabilities.is_empty()
    }
}

/// Mean binary cross-entropy between `sigmoid(logits)` and the 0/1 mask,
/// in the overflow-free logit form `max(l,0) - l*y + ln(1 + e^-|l|)`.
pub fn bce_loss<T: Scalar>(logits: &[T], mask: &[bool]) -> Result<T, ModelError> {
    if logits.len() != mask.len() {
        return Err(ModelError::MaskLength {
            expected: logits.len(),
            actual: mask.len(),
        });
    }
    if logits.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let total = logits
        .iter()
        .zip(mask)
        .fold(T::zero(), |acc, (&l, &m)| acc + bce_term(l, m));
    Ok(total / T::c(logits.len() as f64))
}

#[inline]
pub(crate) fn bce_term<T: Scalar>(l: T, target: bool) -> T {
    let y = if target { T::one() } else { T::zero() };
    l.max(T::zero()) - l * y + (T::one() + (-l.abs()).exp()).ln()
}
