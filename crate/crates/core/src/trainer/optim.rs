use crate::error::{Error, Result};
use crate::scalar::Real;

/// Heavy-ball SGD: `v <- momentum * v + g`, `theta <- theta - lr * v`.
pub fn sgd_step<T: Real>(params: &mut [T], grads: &[T], velocity: &mut [T], lr: T, momentum: T) {
    assert_eq!(
        params.len(),
        grads.len(),
        "parameter/gradient length mismatch"
    );
    assert_eq!(
        params.len(),
        velocity.len(),
        "parameter/velocity length mismatch"
    );
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v + g;
        *p = *p - lr * *v;
    }
}

/// Cosine annealing from `lr_init` towards zero over `total_epochs`.
pub fn cosine_lr(epoch: usize, total_epochs: usize, lr_init: f64) -> Result<f64> {
    if epoch >= total_epochs {
        return Err(Error::InvalidParameter(format!(
            "epoch {epoch} outside 0..{total_epochs}"
        )));
    }
    Ok(cosine_value(epoch as f64, total_epochs as f64, lr_init))
}

pub(crate) fn cosine_value(epoch: f64, total: f64, lr_init: f64) -> f64 {
    lr_init * (1.0 + (std::f64::consts::PI * epoch / total).cos()) / 2.0
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`. Returns
/// the norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut [T], max_norm: T) -> T {
    let norm = grads.iter().map(|&g| g * g).sum::<T>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            *g = *g * s;
        }
    }
    norm
}
