use crate::error::{shape_err, Result};
use crate::nn::{Graph, Tensor, Var};
use crate::rtdm::BinaryMask;
use crate::scalar::Scalar;

/// Stacks latent masks into a `[N, 1, h, w]` tensor of zeros and ones.
/// A single mask is shared by the whole batch.
pub fn mask_tensor<T: Scalar>(masks: &[BinaryMask], batch: usize) -> Result<Tensor<T>> {
    let first = masks.first().ok_or_else(|| shape_err!("no masks given"))?;
    if masks.len() != 1 && masks.len() != batch {
        return Err(shape_err!("{} masks for a batch of {batch}", masks.len()));
    }
    let (h, w) = first.dims();
    let mut data = Vec::with_capacity(batch * h * w);
    for i in 0..batch {
        let m = &masks[if masks.len() == 1 { 0 } else { i }];
        if m.dims() != (h, w) {
            return Err(shape_err!("mask dims {:?} vs {:?}", m.dims(), (h, w)));
        }
        data.extend(m.data().iter().map(|&v| if v == 1 { T::one() } else { T::zero() }));
    }
    Tensor::new(&[batch, 1, h, w], data)
}

/// Per-element weights `1 + alpha * M` broadcast to `[N, 1, h, w]`.
pub fn loss_weights<T: Scalar>(mask: &Tensor<T>, alpha_w: f64) -> Tensor<T> {
    let a = T::lit(alpha_w);
    mask.map(|m| T::one() + a * m)
}

fn check<T: Scalar>(eps: &Tensor<T>, eps_pred: &Tensor<T>, mask: &Tensor<T>) -> Result<()> {
    let (s, m) = (eps.shape(), mask.shape());
    if s != eps_pred.shape() {
        return Err(shape_err!("eps {:?} vs prediction {:?}", s, eps_pred.shape()));
    }
    if m[1] != 1 || m[2] != s[2] || m[3] != s[3] || (m[0] != 1 && m[0] != s[0]) {
        return Err(shape_err!("mask {:?} does not cover latent {:?}", m, s));
    }
    Ok(())
}

/// Texture-aware loss: `mean((1 + alpha_w * M) * (eps - eps_pred)^2)`, the
/// mask broadcast over channels. Accumulated in `f64`.
pub fn tadl_loss<T: Scalar>(eps: &Tensor<T>, eps_pred: &Tensor<T>, mask: &Tensor<T>, alpha_w: f64) -> Result<f64> {
    check(eps, eps_pred, mask)?;
    let [n, c, h, w] = eps.shape();
    let (e, p, m) = (eps.data(), eps_pred.data(), mask.data());
    let mut acc = 0.0;
    for i in 0..n {
        let mi = if mask.shape()[0] == 1 { 0 } else { i };
        for ch in 0..c {
            for j in 0..h * w {
                let k = (i * c + ch) * h * w + j;
                let r = e[k].to_f64_lossy() - p[k].to_f64_lossy();
                acc += (1.0 + alpha_w * m[mi * h * w + j].to_f64_lossy()) * (r * r);
            }
        }
    }
    Ok(acc / eps.numel() as f64)
}

/// Plain mean squared residual.
pub fn mse<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(shape_err!("{:?} vs {:?}", a.shape(), b.shape()));
    }
    let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x.to_f64_lossy() - y.to_f64_lossy()).powi(2)).sum();
    Ok(s / a.numel() as f64)
}

/// Unweighted mean squared residual inside and outside the mask; `NaN` for an empty side.
pub fn split_mse<T: Scalar>(eps: &Tensor<T>, eps_pred: &Tensor<T>, mask: &Tensor<T>) -> Result<(f64, f64)> {
    check(eps, eps_pred, mask)?;
    let [n, c, h, w] = eps.shape();
    let (mut s_in, mut n_in, mut s_out, mut n_out) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..n {
        let mi = if mask.shape()[0] == 1 { 0 } else { i };
        for ch in 0..c {
            for j in 0..h * w {
                let k = (i * c + ch) * h * w + j;
                let r = (eps.data()[k].to_f64_lossy() - eps_pred.data()[k].to_f64_lossy()).powi(2);
                if mask.data()[mi * h * w + j] > T::zero() {
                    s_in += r;
                    n_in += 1;
                } else {
                    s_out += r;
                    n_out += 1;
                }
            }
        }
    }
    let avg = |s: f64, k: usize| if k == 0 { f64::NAN } else { s / k as f64 };
    Ok((avg(s_in, n_in), avg(s_out, n_out)))
}

/// Differentiable form of [`tadl_loss`] on a graph.
pub fn tadl_loss_graph<T: Scalar>(g: &mut Graph<T>, eps: Var, eps_pred: Var, mask: &Tensor<T>, alpha_w: f64) -> Result<Var> {
    check(g.value(eps), g.value(eps_pred), mask)?;
    let w = g.constant(loss_weights(mask, alpha_w));
    let d = g.sub(eps, eps_pred)?;
    let sq = g.square(d);
    let wsq = g.mul(sq, w)?;
    Ok(g.mean(wsq))
}
