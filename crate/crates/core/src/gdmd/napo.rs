//! Negative-aware preference loss around an old-policy snapshot.
//!
//! With `v+ = (1 - beta) v_old + beta v_theta` and
//! `v- = (1 + beta) v_old - beta v_theta`, the per-sample loss is
//! `r ||v+ - v||^2 + (1 - r) ||v- - v||^2`, averaged over the batch.

use crate::error::{Error, Result};
use crate::flow::{target_velocity, NoisyState};
use crate::nn::{Mlp, MlpGrads};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Batch-mean loss and the *per-sample* gradient with respect to `v_theta`
/// (not divided by the batch size).
///
/// The gradient is `2 beta [r (v+ - v) - (1 - r)(v- - v)]`, which at
/// `v_theta == v_old` reduces to `2 beta (2r - 1)(v_old - v)`.
pub fn napo_output_grad<T: Scalar>(
    v_theta: &Tensor<T>,
    v_old: &Tensor<T>,
    v_target: &Tensor<T>,
    r: &[T],
    beta: T,
) -> Result<(T, Tensor<T>)> {
    v_theta.ensure_shape("napo v_old", v_old.shape())?;
    v_theta.ensure_shape("napo target", v_target.shape())?;
    if r.len() != v_theta.rows() {
        return Err(Error::InvalidArgument("one preference value per sample required".into()));
    }
    let two = T::lit(2.0);
    let dim = v_theta.cols();
    let mut grad = Tensor::zeros(v_theta.shape());
    let mut loss = T::zero();
    for (b, &rb) in r.iter().enumerate() {
        let (vt, vo, v) = (v_theta.row(b), v_old.row(b), v_target.row(b));
        let g = &mut grad.data_mut()[b * dim..(b + 1) * dim];
        for d in 0..dim {
            // Offset form: exactly `vo - v` for both when `vt == vo`.
            let base = vo[d] - v[d];
            let shift = beta * (vt[d] - vo[d]);
            let pos = base + shift;
            let neg = base - shift;
            loss = loss + rb * pos * pos + (T::one() - rb) * neg * neg;
            g[d] = two * beta * (rb * pos - (T::one() - rb) * neg);
        }
    }
    let batch = T::lit(r.len().max(1) as f64);
    Ok((loss / batch, grad))
}

/// Loss and generator parameter gradients, with the regression velocity
/// derived from the implicit target: `v = (x_t - x_tar) / t`.
pub fn napo_loss_and_grads<T: Scalar>(
    gen: &Mlp<T>,
    v_old_model: &Mlp<T>,
    noisy: &NoisyState<T>,
    x_tar: &Tensor<T>,
    r: &[T],
    beta: T,
) -> Result<(T, MlpGrads<T>)> {
    let v = target_velocity(x_tar, &noisy.x_t, noisy.t)?;
    let cond = gen.condition(&noisy.labels)?;
    let (v_theta, cache) = gen.forward_cached(&noisy.x_t, noisy.t, &cond)?;
    let v_old = v_old_model.forward(&noisy.x_t, noisy.t, &cond)?;
    let (loss, g) = napo_output_grad(&v_theta, &v_old, &v, r, beta)?;
    let up = g.scale(T::one() / T::lit(r.len().max(1) as f64));
    let (grads, _) = gen.backward_cached(&cache, &up)?;
    Ok((loss, grads))
}
