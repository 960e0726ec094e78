use ndarray::{s, Array1, Array2, Axis, Zip};

use super::forward::{gelu_grad, ForwardCache};
use super::{bce_term, DiscriminatorModel, DiscriminatorParams, ModelError};
use crate::scalar::{sigmoid, Scalar};

fn standard<T: Scalar>(a: Array2<T>) -> Array2<T> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

/// Parameter gradients plus, on request, the gradient w.r.t. the input
/// features (`[examples * patches, dim]`).
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    pub params: DiscriminatorParams<T>,
    pub input: Option<Array2<T>>,
}

/// Loss and exact gradients for the batch cached in `cache`.
///
/// The loss is `loss_scale` times the mean binary cross-entropy over every
/// patch of every example; `masks[e]` is the per-patch target of example `e`.
pub fn backward<T: Scalar>(
    model: &DiscriminatorModel<T>,
    cache: &ForwardCache<T>,
    masks: &[&[bool]],
    loss_scale: T,
    input_grad: bool,
) -> Result<(T, Gradients<T>), ModelError> {
    let n = cache.n_patches;
    let e = cache.n_examples;
    let d = model.dim;
    if n != model.n_patches() || cache.x0.ncols() != d || cache.a1.ncols() != model.hyper.hidden {
        return Err(ModelError::CacheMismatch);
    }
    if masks.len() != e {
        return Err(ModelError::MaskLength {
            expected: e,
            actual: masks.len(),
        });
    }
    for m in masks {
        if m.len() != n {
            return Err(ModelError::MaskLength {
                expected: n,
                actual: m.len(),
            });
        }
    }
    let m_total = e * n;
    let p = &model.params;
    let heads = model.hyper.n_heads;
    let dh = model.head_width();
    let norm = loss_scale / T::c(m_total as f64);
    let mut g = p.zeros_like();

    let targets: Vec<bool> = masks.iter().flat_map(|m| m.iter().copied()).collect();
    let mut loss = T::zero();
    let mut dlogit = Array1::<T>::zeros(m_total);
    for ((dl, &l), &t) in dlogit
        .iter_mut()
        .zip(cache.logits.iter())
        .zip(targets.iter())
    {
        loss += bce_term(l, t);
        let y = if t { T::one() } else { T::zero() };
        *dl = (sigmoid(l) - y) * norm;
    }
    let loss = loss * norm;

    // MLP output layer (no bias).
    g.w3 = cache.h2d.t().dot(&dlogit);
    let dl_col = dlogit.view().insert_axis(Axis(1));
    let w3_row = p.w3.view().insert_axis(Axis(0));
    let mut da2 = dl_col.dot(&w3_row);
    if let Some(mask) = &cache.drop2 {
        da2 *= mask;
    }
    Zip::from(&mut da2)
        .and(&cache.a2)
        .for_each(|g, &a| *g *= gelu_grad(a));

    g.w2 = standard(cache.h1d.t().dot(&da2));
    g.b2 = da2.sum_axis(Axis(0));
    let mut da1 = da2.dot(&p.w2.t());
    if let Some(mask) = &cache.drop1 {
        da1 *= mask;
    }
    Zip::from(&mut da1)
        .and(&cache.a1)
        .for_each(|g, &a| *g *= gelu_grad(a));

    g.w1 = standard(cache.y.t().dot(&da1));
    g.b1 = da1.sum_axis(Axis(0));
    let dy = da1.dot(&p.w1.t());

    // Layer norm.
    g.ln_gamma = (&dy * &cache.xhat).sum_axis(Axis(0));
    g.ln_beta = dy.sum_axis(Axis(0));
    let mut dz = &dy * &p.ln_gamma;
    let inv_d = T::one() / T::c(d as f64);
    for ((mut row, xh), &is) in dz
        .outer_iter_mut()
        .zip(cache.xhat.outer_iter())
        .zip(cache.inv_std.iter())
    {
        let mean_g = row.sum() * inv_d;
        let mean_gx = row
            .iter()
            .zip(xh.iter())
            .fold(T::zero(), |a, (&gv, &x)| a + gv * x)
            * inv_d;
        Zip::from(&mut row)
            .and(&xh)
            .for_each(|gv, &x| *gv = (*gv - mean_g - x * mean_gx) * is);
    }

    let mut dx0 = if model.hyper.residual {
        dz.clone()
    } else {
        Array2::zeros((m_total, d))
    };
    if let Some(mask) = &cache.drop_attn {
        dz *= mask;
    }

    // Attention output projection.
    g.wo = standard(cache.o.t().dot(&dz));
    g.bo = dz.sum_axis(Axis(0));
    let d_o = dz.dot(&p.wo.t());

    // Scaled dot-product attention, per example and head.
    let scale = T::one() / T::c(dh as f64).sqrt();
    let mut dq = Array2::<T>::zeros((m_total, d));
    let mut dk = Array2::<T>::zeros((m_total, d));
    let mut dv = Array2::<T>::zeros((m_total, d));
    for ex in 0..e {
        let rows = ex * n..(ex + 1) * n;
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            let att = &cache.probs[ex * heads + h];
            let doh = d_o.slice(s![rows.clone(), cols.clone()]);
            let qh = cache.q.slice(s![rows.clone(), cols.clone()]);
            let kh = cache.k.slice(s![rows.clone(), cols.clone()]);
            let vh = cache.v.slice(s![rows.clone(), cols.clone()]);

            dv.slice_mut(s![rows.clone(), cols.clone()])
                .assign(&att.t().dot(&doh));
            let mut ds = doh.dot(&vh.t());
            for (mut srow, prow) in ds.outer_iter_mut().zip(att.outer_iter()) {
                let dot = srow
                    .iter()
                    .zip(prow.iter())
                    .fold(T::zero(), |a, (&x, &y)| a + x * y);
                Zip::from(&mut srow)
                    .and(&prow)
                    .for_each(|s, &pv| *s = pv * (*s - dot) * scale);
            }
            dq.slice_mut(s![rows.clone(), cols.clone()])
                .assign(&ds.dot(&kh));
            dk.slice_mut(s![rows.clone(), cols])
                .assign(&ds.t().dot(&qh));
        }
    }

    g.wq = standard(cache.x0.t().dot(&dq));
    g.bq = dq.sum_axis(Axis(0));
    g.wk = standard(cache.x0.t().dot(&dk));
    g.bk = dk.sum_axis(Axis(0));
    g.wv = standard(cache.x0.t().dot(&dv));
    g.bv = dv.sum_axis(Axis(0));
    dx0 = dx0 + dq.dot(&p.wq.t()) + dk.dot(&p.wk.t()) + dv.dot(&p.wv.t());

    for ex in 0..e {
        g.pos_embed += &dx0.slice(s![ex * n..(ex + 1) * n, ..]);
    }

    Ok((
        loss,
        Gradients {
            params: g,
            input: input_grad.then_some(dx0),
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discriminator::{forward_batch, DiscriminatorHyper};
    use crate::rng::PortableRng;
    use ndarray::ArrayView2;

    fn setup(
        residual: bool,
        seed: u64,
    ) -> (DiscriminatorModel<f64>, Vec<Array2<f64>>, Vec<Vec<bool>>) {
        let hyper = DiscriminatorHyper {
            n_heads: 2,
            hidden: 16,
            dropout: 0.0,
            residual,
            ..Default::default()
        };
        let mut rng = PortableRng::new(seed);
        let mut model = DiscriminatorModel::init(8, 3, 3, hyper, &mut rng).unwrap();
        for (_, t, _) in model.params.tensors_mut() {
            t.iter_mut().for_each(|v| *v += 0.1 * rng.gaussian());
        }
        let xs: Vec<Array2<f64>> = (0..2)
            .map(|_| Array2::from_shape_simple_fn((9, 8), || rng.gaussian()))
            .collect();
        let masks = (0..2)
            .map(|_| (0..9).map(|_| rng.uniform() < 0.4).collect())
            .collect();
        (model, xs, masks)
    }

    fn loss_of(model: &DiscriminatorModel<f64>, xs: &[Array2<f64>], masks: &[Vec<bool>]) -> f64 {
        let views: Vec<ArrayView2<f64>> = xs.iter().map(|x| x.view()).collect();
        let (logits, _) = forward_batch(model, &views, false, None).unwrap();
        let flat: Vec<f64> = logits.iter().copied().collect();
        let targets: Vec<bool> = masks.iter().flatten().copied().collect();
        crate::discriminator::bce_loss(&flat, &targets).unwrap()
    }

    fn check(residual: bool, seed: u64) {
        let (model, xs, masks) = setup(residual, seed);
        let views: Vec<ArrayView2<f64>> = xs.iter().map(|x| x.view()).collect();
        let (_, cache) = forward_batch(&model, &views, false, None).unwrap();
        let mrefs: Vec<&[bool]> = masks.iter().map(|m| m.as_slice()).collect();
        let (loss, grads) = backward(&model, &cache, &mrefs, 1.0, true).unwrap();
        assert!((loss - loss_of(&model, &xs, &masks)).abs() < 1e-14);

        let h = 1e-5;
        for (ti, (name, values, _)) in grads.params.tensors().iter().enumerate() {
            for (i, &a) in values.iter().enumerate() {
                let mut plus = model.clone();
                plus.params.tensors_mut()[ti].1[i] += h;
                let mut minus = model.clone();
                minus.params.tensors_mut()[ti].1[i] -= h;
                let fd = (loss_of(&plus, &xs, &masks) - loss_of(&minus, &xs, &masks)) / (2.0 * h);
                let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-7);
                assert!(err < 1e-4, "{name} [{i}]: analytic {a} fd {fd}");
            }
        }

        let dinput = grads.input.unwrap();
        for ex in 0..2 {
            for i in [0usize, 13, 40, 71] {
                let (r, c) = (i / 8, i % 8);
                let mut xp = xs.clone();
                xp[ex][[r, c]] += h;
                let mut xm = xs.clone();
                xm[ex][[r, c]] -= h;
                let fd = (loss_of(&model, &xp, &masks) - loss_of(&model, &xm, &masks)) / (2.0 * h);
                let a = dinput[[ex * 9 + r, c]];
                assert!((a - fd).abs() < 1e-4 * a.abs().max(fd.abs()).max(1e-7));
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        check(false, 1);
        check(true, 2);
    }

    #[test]
    fn scaling_the_loss_scales_gradients_exactly() {
        let (model, xs, masks) = setup(false, 3);
        let views: Vec<ArrayView2<f64>> = xs.iter().map(|x| x.view()).collect();
        let (_, cache) = forward_batch(&model, &views, false, None).unwrap();
        let mrefs: Vec<&[bool]> = masks.iter().map(|m| m.as_slice()).collect();
        let (l1, g1) = backward(&model, &cache, &mrefs, 1.0, false).unwrap();
        let (l2, g2) = backward(&model, &cache, &mrefs, 2.0, false).unwrap();
        assert_eq!(l2, 2.0 * l1);
        for ((_, a, _), (_, b, _)) in g1.params.tensors().into_iter().zip(g2.params.tensors()) {
            for (x, y) in a.iter().zip(b) {
                assert_eq!(*y, 2.0 * x);
            }
        }
    }

    #[test]
    fn mask_count_mismatch() {
        let (model, xs, _) = setup(false, 4);
        let (_, cache) = forward_batch(&model, &[xs[0].view()], false, None).unwrap();
        assert!(backward(&model, &cache, &[], 1.0, false).is_err());
    }
}
