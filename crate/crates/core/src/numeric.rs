//! Small numerical helpers: tempered softmax and central differences.

use crate::error::{Error, Result};
use crate::scalar::Real;

/// `softmax(v / tau)`, computed after subtracting the maximum.
pub fn softmax<T: Real>(v: &[T], tau: T) -> Result<Vec<T>> {
    if v.is_empty() {
        return Err(Error::EmptyInput("softmax of an empty sequence"));
    }
    if !(tau > T::zero()) {
        return Err(Error::InvalidParameter(format!(
            "softmax temperature must be positive, got {tau}"
        )));
    }
    let max = v.iter().copied().fold(T::neg_infinity(), T::max);
    if !max.is_finite() {
        return Err(Error::NonFinite("softmax input".into()));
    }
    let exps: Vec<T> = v.iter().map(|&x| ((x - max) / tau).exp()).collect();
    let total: T = exps.iter().copied().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Central-difference gradient `(f(θ + εe_i) - f(θ - εe_i)) / 2ε`.
pub fn finite_difference_gradient<T: Real>(
    mut f: impl FnMut(&[T]) -> T,
    theta: &[T],
    epsilon: T,
) -> Result<Vec<T>> {
    if !(epsilon > T::zero()) {
        return Err(Error::InvalidParameter(format!(
            "finite difference step must be positive, got {epsilon}"
        )));
    }
    let mut probe = theta.to_vec();
    let two_eps = epsilon + epsilon;
    let mut grad = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        probe[i] = theta[i] + epsilon;
        let up = f(&probe);
        probe[i] = theta[i] - epsilon;
        let down = f(&probe);
        probe[i] = theta[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!("objective at coordinate {i}")));
        }
        grad.push((up - down) / two_eps);
    }
    Ok(grad)
}
