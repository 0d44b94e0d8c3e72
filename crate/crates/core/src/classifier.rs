//! Exemplar-free analytic classifier.
//!
//! Keeps the ridge solution `W` and the inverse regularized autocorrelation
//! `R = (sum_i Z_i^T Z_i + lambda I)^{-1}` and folds in one chunk of data at a
//! time:
//!
//! ```text
//! B = (I + Z R Z^T)^{-1}
//! R' = R - R Z^T B Z R
//! W' = W - R' Z^T Z W + R' Z^T Y
//! ```
//!
//! After any sequence of updates `W` equals the batch ridge solution on all
//! rows seen so far, while only the current chunk, `W` and `R` are touched.

use crate::error::{Error, Result};
use crate::linalg::{solve_spd, Lu};
use crate::matrix::Matrix;
use crate::scalar::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct AnalyticClassifier<T> {
    weights: Matrix<T>,
    autocorr_inv: Matrix<T>,
    lambda: T,
    classes: Vec<usize>,
}

impl<T: Real> AnalyticClassifier<T> {
    /// Empty classifier over `dim`-wide features with `R = I / lambda`.
    pub fn new(dim: usize, lambda: T) -> Result<Self> {
        if !(lambda > T::zero()) || !lambda.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "classifier lambda must be positive, got {lambda}"
            )));
        }
        let autocorr_inv = Matrix::identity(dim).scale(T::one() / lambda);
        Ok(Self {
            weights: Matrix::zeros(dim, 0),
            autocorr_inv,
            lambda,
            classes: Vec::new(),
        })
    }

    /// Rebuilds a classifier from stored parts, checking its invariants.
    pub fn from_parts(
        weights: Matrix<T>,
        autocorr_inv: Matrix<T>,
        lambda: T,
        classes: Vec<usize>,
    ) -> Result<Self> {
        let d = autocorr_inv.rows();
        if autocorr_inv.cols() != d || weights.rows() != d || weights.cols() != classes.len() {
            return Err(Error::DimensionMismatch(format!(
                "W {:?}, R {:?}, {} classes",
                weights.shape(),
                autocorr_inv.shape(),
                classes.len()
            )));
        }
        if !(lambda > T::zero()) {
            return Err(Error::InvalidParameter(
                "classifier lambda must be positive".into(),
            ));
        }
        let asym = autocorr_inv.sub(&autocorr_inv.transpose()).max_abs();
        if asym > T::of(1e-9) {
            return Err(Error::InvalidParameter(format!(
                "R is not symmetric (max gap {asym})"
            )));
        }
        Ok(Self {
            weights,
            autocorr_inv,
            lambda,
            classes,
        })
    }

    pub fn dim(&self) -> usize {
        self.autocorr_inv.rows()
    }

    pub fn lambda(&self) -> T {
        self.lambda
    }

    pub fn weights(&self) -> &Matrix<T> {
        &self.weights
    }

    pub fn autocorr_inv(&self) -> &Matrix<T> {
        &self.autocorr_inv
    }

    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Column of `class` in `W`, if seen.
    pub fn column_of(&self, class: usize) -> Option<usize> {
        self.classes.iter().position(|&c| c == class)
    }

    /// Registers unseen classes as zero columns of `W`, in order.
    pub fn add_classes(&mut self, classes: &[usize]) {
        let fresh: Vec<usize> = classes
            .iter()
            .copied()
            .filter(|c| !self.classes.contains(c))
            .collect();
        let mut unique = Vec::with_capacity(fresh.len());
        for c in fresh {
            if !unique.contains(&c) {
                unique.push(c);
            }
        }
        self.weights.append_zero_columns(unique.len());
        self.classes.extend(unique);
    }

    /// One-hot targets over the classes seen so far.
    pub fn one_hot(&self, labels: &[usize]) -> Result<Matrix<T>> {
        let mut y = Matrix::zeros(labels.len(), self.classes.len());
        for (i, &l) in labels.iter().enumerate() {
            let j = self.column_of(l).ok_or_else(|| {
                Error::InvalidParameter(format!("label {l} is not a registered class"))
            })?;
            y[(i, j)] = T::one();
        }
        Ok(y)
    }

    /// Folds `(z, y)` into the solution. `y` must have one column per
    /// registered class.
    pub fn update(&mut self, z: &Matrix<T>, y: &Matrix<T>) -> Result<()> {
        let d = self.dim();
        if z.cols() != d {
            return Err(Error::DimensionMismatch(format!(
                "features of width {} for a {d}-wide classifier",
                z.cols()
            )));
        }
        if z.rows() != y.rows() {
            return Err(Error::DimensionMismatch(format!(
                "{} feature rows but {} label rows",
                z.rows(),
                y.rows()
            )));
        }
        if y.cols() != self.classes.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} target columns for {} registered classes",
                y.cols(),
                self.classes.len()
            )));
        }
        if z.rows() == 0 {
            return Ok(());
        }
        let r = &self.autocorr_inv;
        let n = z.rows();
        let mut next = if n <= d {
            // Sample side: B = (I_n + Z R Z^T)^{-1}, solved rather than inverted.
            let rzt = r.matmul_t(z);
            let mut gram = z.matmul(&rzt);
            for i in 0..n {
                gram[(i, i)] = gram[(i, i)] + T::one();
            }
            let b_zr = solve_spd(&gram, &rzt.transpose()).map_err(|e| {
                Error::NotPositiveDefinite(format!("I + Z R Z^T during update: {e}"))
            })?;
            let mut next = r.clone();
            next.axpy(-T::one(), &rzt.matmul(&b_zr));
            next
        } else {
            // Feature side: R' = (I_d + R Z^T Z)^{-1} R.
            let mut lhs = r.matmul(&z.t_matmul(z));
            for i in 0..d {
                lhs[(i, i)] = lhs[(i, i)] + T::one();
            }
            Lu::factor(&lhs).and_then(|lu| lu.solve(r)).map_err(|e| {
                Error::NotPositiveDefinite(format!("I + R Z^T Z during update: {e}"))
            })?
        };
        next.symmetrize();
        if !next.is_finite() {
            return Err(Error::NonFinite(
                "autocorrelation inverse after update".into(),
            ));
        }
        for i in 0..d {
            if !(next[(i, i)] > T::zero()) {
                return Err(Error::NotPositiveDefinite(format!(
                    "R has diagonal {} at {i}",
                    next[(i, i)]
                )));
            }
        }
        // W' = W + R' Z^T (Y - Z W)
        let residual = y.sub(&z.matmul(&self.weights));
        let mut weights = self.weights.clone();
        weights.add_assign(&next.matmul(&z.t_matmul(&residual)));
        if !weights.is_finite() {
            return Err(Error::NonFinite("classifier weights after update".into()));
        }
        self.autocorr_inv = next;
        self.weights = weights;
        Ok(())
    }

    /// Registers the labels' classes and folds in one labelled chunk.
    pub fn update_with_labels(&mut self, z: &Matrix<T>, labels: &[usize]) -> Result<()> {
        self.add_classes(labels);
        let y = self.one_hot(labels)?;
        self.update(z, &y)
    }

    /// `Z W`, one column per registered class.
    pub fn predict(&self, z: &Matrix<T>) -> Result<Matrix<T>> {
        if self.classes.is_empty() {
            return Err(Error::InvalidParameter(
                "classifier has not seen any class".into(),
            ));
        }
        if z.cols() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "features of width {} for a {}-wide classifier",
                z.cols(),
                self.dim()
            )));
        }
        Ok(z.matmul(&self.weights))
    }

    /// Predicted class id per row; ties go to the lowest column.
    pub fn predict_classes(&self, z: &Matrix<T>) -> Result<Vec<usize>> {
        let logits = self.predict(z)?;
        Ok((0..logits.rows())
            .map(|i| self.classes[argmax(logits.row(i))])
            .collect())
    }
}

/// Index of the largest value; first index wins ties.
pub fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{regularized_gram_inverse, ridge_solve};
    use crate::rng::{sample_standard_normal, SeededRng};

    #[test]
    fn init_cases() {
        let c = AnalyticClassifier::<f64>::new(1, 2.0).unwrap();
        assert_eq!(c.autocorr_inv().as_slice(), &[0.5]);
        let c = AnalyticClassifier::<f64>::new(3, 1.0).unwrap();
        assert_eq!(c.autocorr_inv(), &Matrix::identity(3));
        assert_eq!(c.weights().cols(), 0);
        assert!(c.predict(&Matrix::zeros(1, 3)).is_err());
        assert!(AnalyticClassifier::<f64>::new(3, 0.0).is_err());
        assert!(AnalyticClassifier::<f64>::new(3, -1.0).is_err());
    }

    #[test]
    fn scalar_update() {
        let mut c = AnalyticClassifier::<f64>::new(1, 1.0).unwrap();
        let z = Matrix::from_vec(1, 1, vec![1.0]).unwrap();
        c.update_with_labels(&z, &[0]).unwrap();
        assert!((c.autocorr_inv()[(0, 0)] - 0.5).abs() < 1e-15);
        assert!((c.weights()[(0, 0)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn sequential_equals_concatenated() {
        let mut rng = SeededRng::new(4);
        let z1: Matrix<f64> = sample_standard_normal(&mut rng, 10, 6);
        let z2: Matrix<f64> = sample_standard_normal(&mut rng, 7, 6);
        let l1: Vec<usize> = (0..10).map(|i| i % 2).collect();
        let l2: Vec<usize> = (0..7).map(|i| 2 + i % 2).collect();
        let mut seq = AnalyticClassifier::new(6, 0.5).unwrap();
        seq.update_with_labels(&z1, &l1).unwrap();
        seq.update_with_labels(&z2, &l2).unwrap();
        let mut once = AnalyticClassifier::new(6, 0.5).unwrap();
        once.add_classes(&[0, 1, 2, 3]);
        let all = Matrix::vstack(&[&z1, &z2]);
        let labels: Vec<usize> = l1.iter().chain(&l2).copied().collect();
        let y = once.one_hot(&labels).unwrap();
        once.update(&all, &y).unwrap();
        assert!(seq.weights().relative_error(once.weights()) < 1e-8);
        assert!(seq.autocorr_inv().relative_error(once.autocorr_inv()) < 1e-8);
    }

    #[test]
    fn matches_batch_ridge_across_tasks() {
        let mut rng = SeededRng::new(5);
        let mut c = AnalyticClassifier::new(8, 2.0).unwrap();
        let mut parts = Vec::new();
        let mut labels = Vec::new();
        for t in 0..3 {
            let z: Matrix<f64> = sample_standard_normal(&mut rng, 12, 8);
            let l: Vec<usize> = (0..12).map(|i| 2 * t + i % 2).collect();
            c.update_with_labels(&z, &l).unwrap();
            parts.push(z);
            labels.extend(l);
        }
        let refs: Vec<&Matrix<f64>> = parts.iter().collect();
        let all = Matrix::vstack(&refs);
        let y = c.one_hot(&labels).unwrap();
        let batch = ridge_solve(&all, &y, 2.0).unwrap();
        assert!(c.weights().relative_error(&batch) < 1e-8);
        let r = regularized_gram_inverse(&all, 2.0).unwrap();
        assert!(c.autocorr_inv().relative_error(&r) < 1e-8);
        let asym = c
            .autocorr_inv()
            .sub(&c.autocorr_inv().transpose())
            .max_abs();
        assert!(asym < 1e-9);
    }

    #[test]
    fn feature_side_form_when_rows_exceed_width() {
        let mut rng = SeededRng::new(6);
        let z: Matrix<f64> = sample_standard_normal(&mut rng, 40, 5);
        let labels: Vec<usize> = (0..40).map(|i| i % 3).collect();
        let mut c = AnalyticClassifier::new(5, 1.0).unwrap();
        c.update_with_labels(&z, &labels).unwrap();
        let batch = ridge_solve(&z, &c.one_hot(&labels).unwrap(), 1.0).unwrap();
        assert!(c.weights().relative_error(&batch) < 1e-10);
    }

    #[test]
    fn zero_features_tie_to_first_class() {
        let mut c = AnalyticClassifier::<f64>::new(3, 1.0).unwrap();
        c.add_classes(&[7, 4]);
        assert_eq!(c.predict_classes(&Matrix::zeros(2, 3)).unwrap(), vec![7, 7]);
    }

    #[test]
    fn single_class_always_predicted() {
        let mut rng = SeededRng::new(7);
        let z: Matrix<f64> = sample_standard_normal(&mut rng, 5, 4);
        let mut c = AnalyticClassifier::new(4, 1.0).unwrap();
        c.update_with_labels(&z, &[3; 5]).unwrap();
        let test: Matrix<f64> = sample_standard_normal(&mut rng, 9, 4);
        assert!(c.predict_classes(&test).unwrap().iter().all(|&p| p == 3));
    }

    #[test]
    fn separable_scalar_data() {
        let z = Matrix::from_fn(20, 2, |i, j| {
            if j == 1 {
                1.0
            } else if i < 10 {
                -1.0 - i as f64 * 0.1
            } else {
                1.0 + i as f64 * 0.1
            }
        });
        let labels: Vec<usize> = (0..20).map(|i| usize::from(i >= 10)).collect();
        let mut c = AnalyticClassifier::new(2, 0.01).unwrap();
        c.update_with_labels(&z, &labels).unwrap();
        assert_eq!(c.predict_classes(&z).unwrap(), labels);
    }

    #[test]
    fn update_errors() {
        let mut c = AnalyticClassifier::<f64>::new(3, 1.0).unwrap();
        c.add_classes(&[0]);
        assert!(c
            .update(&Matrix::zeros(2, 3), &Matrix::zeros(3, 1))
            .is_err());
        assert!(c
            .update(&Matrix::zeros(2, 4), &Matrix::zeros(2, 1))
            .is_err());
        assert!(c
            .update(&Matrix::zeros(2, 3), &Matrix::zeros(2, 2))
            .is_err());
    }

    #[test]
    fn argmax_ties() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }
}
