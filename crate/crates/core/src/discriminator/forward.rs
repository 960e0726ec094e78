use ndarray::{s, Array1, Array2, ArrayView2, Axis};

use super::{validate_hyper, DiscriminatorModel, DropoutPlacement, ModelError, LAYER_NORM_EPS};
use crate::rng::PortableRng;
use crate::scalar::Scalar;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// GELU, tanh approximation.
#[inline]
pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let u = T::c(GELU_C) * (x + T::c(GELU_A) * x * x * x);
    T::c(0.5) * x * (T::one() + u.tanh())
}

#[inline]
pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let u = T::c(GELU_C) * (x + T::c(GELU_A) * x * x * x);
    let t = u.tanh();
    let du = T::c(GELU_C) * (T::one() + T::c(3.0 * GELU_A) * x * x);
    T::c(0.5) * (T::one() + t) + T::c(0.5) * x * (T::one() - t * t) * du
}

/// Activations kept for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache<T> {
    pub(crate) n_examples: usize,
    pub(crate) n_patches: usize,
    pub(crate) x0: Array2<T>,
    pub(crate) q: Array2<T>,
    pub(crate) k: Array2<T>,
    pub(crate) v: Array2<T>,
    /// Attention probabilities, indexed `example * n_heads + head`.
    pub(crate) probs: Vec<Array2<T>>,
    pub(crate) o: Array2<T>,
    pub(crate) drop_attn: Option<Array2<T>>,
    pub(crate) xhat: Array2<T>,
    pub(crate) inv_std: Array1<T>,
    pub(crate) y: Array2<T>,
    pub(crate) a1: Array2<T>,
    pub(crate) drop1: Option<Array2<T>>,
    pub(crate) h1d: Array2<T>,
    pub(crate) a2: Array2<T>,
    pub(crate) drop2: Option<Array2<T>>,
    pub(crate) h2d: Array2<T>,
    /// `[examples * patches]`.
    pub logits: Array1<T>,
}

fn dropout_mask<T: Scalar>(shape: (usize, usize), rate: f64, rng: &mut PortableRng) -> Array2<T> {
    let keep = T::c(1.0 / (1.0 - rate));
    Array2::from_shape_simple_fn(shape, || {
        if rng.uniform() < rate {
            T::zero()
        } else {
            keep
        }
    })
}

fn finite<T: Scalar>(a: &Array2<T>) -> bool {
    a.iter().all(|v| v.is_finite())
}

/// Row-wise softmax in place.
pub(crate) fn softmax_rows<T: Scalar>(m: &mut Array2<T>) {
    for mut row in m.outer_iter_mut() {
        let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

/// Forward pass over a batch of examples, each `[n_patches, dim]`.
///
/// Dropout is active only with `train_mode`, which then requires `rng`.
/// Returns logits as `[examples, patches]`.
pub fn forward_batch<T: Scalar>(
    model: &DiscriminatorModel<T>,
    inputs: &[ArrayView2<T>],
    train_mode: bool,
    rng: Option<&mut PortableRng>,
) -> Result<(Array2<T>, ForwardCache<T>), ModelError> {
    validate_hyper(model.dim, &model.hyper)?;
    if inputs.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let n = model.n_patches();
    let d = model.dim;
    for x in inputs {
        if x.dim() != (n, d) {
            return Err(ModelError::Shape {
                expected: (n, d),
                actual: x.dim(),
            });
        }
    }
    let e = inputs.len();
    let m = e * n;
    let p = &model.params;
    let heads = model.hyper.n_heads;
    let dh = model.head_width();
    let rate = model.hyper.dropout;
    let mut rng = match (train_mode && rate > 0.0, rng) {
        (false, _) => None,
        (true, Some(r)) => Some(r),
        (true, None) => {
            return Err(ModelError::InvalidHyper(
                "train mode with dropout needs an rng".into(),
            ))
        }
    };

    let mut x0 = Array2::<T>::zeros((m, d));
    for (i, x) in inputs.iter().enumerate() {
        let mut block = x0.slice_mut(s![i * n..(i + 1) * n, ..]);
        block.assign(x);
        block += &p.pos_embed;
    }
    if !finite(&x0) {
        return Err(ModelError::NonFinite("input"));
    }

    let q = x0.dot(&p.wq) + &p.bq;
    let k = x0.dot(&p.wk) + &p.bk;
    let v = x0.dot(&p.wv) + &p.bv;
    let scale = T::one() / T::c(dh as f64).sqrt();
    let mut o = Array2::<T>::zeros((m, d));
    let mut probs = Vec::with_capacity(e * heads);
    for ex in 0..e {
        let rows = ex * n..(ex + 1) * n;
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            let qh = q.slice(s![rows.clone(), cols.clone()]);
            let kh = k.slice(s![rows.clone(), cols.clone()]);
            let vh = v.slice(s![rows.clone(), cols.clone()]);
            let mut att = qh.dot(&kh.t()) * scale;
            softmax_rows(&mut att);
            o.slice_mut(s![rows.clone(), cols]).assign(&att.dot(&vh));
            probs.push(att);
        }
    }
    if !finite(&o) {
        return Err(ModelError::NonFinite("attention"));
    }

    let mut z = o.dot(&p.wo) + &p.bo;
    let drop_attn = rng
        .as_deref_mut()
        .map(|r| dropout_mask::<T>((m, d), rate, r));
    if let Some(mask) = &drop_attn {
        z *= mask;
    }
    if model.hyper.residual {
        z += &x0;
    }

    // Layer norm over the feature dimension.
    let eps = T::c(LAYER_NORM_EPS);
    let inv_d = T::one() / T::c(d as f64);
    let mut xhat = z;
    let mut inv_std = Array1::<T>::zeros(m);
    for (mut row, is) in xhat.outer_iter_mut().zip(inv_std.iter_mut()) {
        let mean = row.sum() * inv_d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().fold(T::zero(), |a, &v| a + v * v) * inv_d;
        *is = T::one() / (var + eps).sqrt();
        let s = *is;
        row.mapv_inplace(|v| v * s);
    }
    let y = &xhat * &p.ln_gamma + &p.ln_beta;
    if !finite(&y) {
        return Err(ModelError::NonFinite("layer_norm"));
    }

    let hidden_dropout = model.hyper.dropout_placement == DropoutPlacement::AttentionAndHidden;
    let hsize = model.hyper.hidden;

    let a1 = y.dot(&p.w1) + &p.b1;
    let mut h1d = a1.mapv(gelu);
    let drop1 = if hidden_dropout {
        rng.as_deref_mut()
            .map(|r| dropout_mask::<T>((m, hsize), rate, r))
    } else {
        None
    };
    if let Some(mask) = &drop1 {
        h1d *= mask;
    }
    if !finite(&h1d) {
        return Err(ModelError::NonFinite("mlp_hidden_1"));
    }

    let a2 = h1d.dot(&p.w2) + &p.b2;
    let mut h2d = a2.mapv(gelu);
    let drop2 = if hidden_dropout {
        rng.map(|r| dropout_mask::<T>((m, hsize), rate, r))
    } else {
        None
    };
    if let Some(mask) = &drop2 {
        h2d *= mask;
    }
    if !finite(&h2d) {
        return Err(ModelError::NonFinite("mlp_hidden_2"));
    }

    let logits = h2d.dot(&p.w3);
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(ModelError::NonFinite("mlp_output"));
    }
    let out = logits
        .clone()
        .into_shape_with_order((e, n))
        .expect("logit count is examples * patches");

    Ok((
        out,
        ForwardCache {
            n_examples: e,
            n_patches: n,
            x0,
            q,
            k,
            v,
            probs,
            o,
            drop_attn,
            xhat,
            inv_std,
            y,
            a1,
            drop1,
            h1d,
            a2,
            drop2,
            h2d,
            logits,
        },
    ))
}

/// Forward pass for a single example; logits per patch.
pub fn forward<T: Scalar>(
    model: &DiscriminatorModel<T>,
    features: ArrayView2<T>,
    train_mode: bool,
    rng: Option<&mut PortableRng>,
) -> Result<(Array1<T>, ForwardCache<T>), ModelError> {
    let (logits, cache) = forward_batch(model, &[features], train_mode, rng)?;
    Ok((logits.index_axis_move(Axis(0), 0), cache))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discriminator::{DiscriminatorHyper, DiscriminatorParams};

    fn tiny(residual: bool, seed: u64) -> DiscriminatorModel<f64> {
        let hyper = DiscriminatorHyper {
            n_heads: 2,
            hidden: 16,
            dropout: 0.1,
            residual,
            ..Default::default()
        };
        DiscriminatorModel::init(8, 3, 3, hyper, &mut PortableRng::new(seed)).unwrap()
    }

    fn features(n: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut r = PortableRng::new(seed);
        Array2::from_shape_fn((n, d), |_| r.gaussian())
    }

    #[test]
    fn gelu_derivative_matches_difference() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.4, 2.2] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn single_token_closed_form() {
        let hyper = DiscriminatorHyper {
            n_heads: 2,
            hidden: 16,
            dropout: 0.0,
            ..Default::default()
        };
        let mut model =
            DiscriminatorModel::<f64>::init(8, 1, 1, hyper, &mut PortableRng::new(3)).unwrap();
        model.params.bv.fill(0.05);
        model.params.bo.fill(-0.02);
        let x = features(1, 8, 4);
        let (logits, _) = forward(&model, x.view(), false, None).unwrap();

        let p = &model.params;
        let x0 = &x.row(0) + &p.pos_embed.row(0);
        let fused = x0.dot(&p.wv) + &p.bv;
        let fused = fused.dot(&p.wo) + &p.bo;
        let mean = fused.sum() / 8.0;
        let var = fused.mapv(|v| (v - mean).powi(2)).sum() / 8.0;
        let ln =
            fused.mapv(|v| (v - mean) / (var + LAYER_NORM_EPS).sqrt()) * &p.ln_gamma + &p.ln_beta;
        let h1 = (ln.dot(&p.w1) + &p.b1).mapv(gelu);
        let h2 = (h1.dot(&p.w2) + &p.b2).mapv(gelu);
        let expected = h2.dot(&p.w3);
        assert!((logits[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn inference_is_deterministic_and_train_mode_reproducible() {
        let model = tiny(false, 1);
        let x = features(9, 8, 2);
        let (a, _) = forward(&model, x.view(), false, None).unwrap();
        let (b, _) = forward(&model, x.view(), false, None).unwrap();
        assert_eq!(a, b);
        let (c, _) = forward(&model, x.view(), true, Some(&mut PortableRng::new(9))).unwrap();
        let (d, _) = forward(&model, x.view(), true, Some(&mut PortableRng::new(9))).unwrap();
        assert_eq!(c, d);
        assert_ne!(a, c);
        assert!(forward(&model, x.view(), true, None).is_err());
    }

    #[test]
    fn zero_model_gives_identical_logits() {
        let mut model = tiny(false, 1);
        model.params = DiscriminatorParams::zeros(9, 8, 16);
        model.params.ln_gamma.fill(1.0);
        model.params.w3.fill(0.3);
        model.params.b1.fill(0.2);
        let x = Array2::<f64>::zeros((9, 8));
        let (l, _) = forward(&model, x.view(), false, None).unwrap();
        assert!(l.iter().all(|&v| v == l[0]));
    }

    #[test]
    fn permutation_equivariance_without_positions() {
        for residual in [false, true] {
            let mut model = tiny(residual, 7);
            model.params.pos_embed.fill(0.0);
            let x = features(9, 8, 8);
            let perm = [4usize, 0, 8, 2, 7, 1, 3, 6, 5];
            let xp = Array2::from_shape_fn((9, 8), |(i, j)| x[[perm[i], j]]);
            let (l, _) = forward(&model, x.view(), false, None).unwrap();
            let (lp, _) = forward(&model, xp.view(), false, None).unwrap();
            for i in 0..9 {
                assert!((lp[i] - l[perm[i]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let model = tiny(false, 1);
        let x = features(8, 8, 1);
        assert_eq!(
            forward(&model, x.view(), false, None).unwrap_err(),
            ModelError::Shape {
                expected: (9, 8),
                actual: (8, 8)
            }
        );
    }

    #[test]
    fn non_finite_activation_names_layer() {
        let mut model = tiny(false, 1);
        model.params.w2[[0, 0]] = f64::INFINITY;
        let x = features(9, 8, 1);
        assert!(matches!(
            forward(&model, x.view(), false, None),
            Err(ModelError::NonFinite(_))
        ));
    }
}
