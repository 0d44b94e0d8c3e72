//! Seeded, portable random streams.
//!
//! Every random draw in the crate goes through [`SeededRng`]: a ChaCha20
//! keystream seeded from a `u64`, with normals produced by the basic
//! Box–Muller transform. Both pieces are fully specified, so a given seed
//! yields the same stream on every platform. The position in the stream can
//! be captured as an [`RngCursor`] and restored later, which is what lets a
//! checkpointed run resume bit-identically.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::matrix::Matrix;
use crate::scalar::Real;

pub const RNG_ALGORITHM: &str = "chacha20+box-muller";

#[derive(Clone, Debug)]
pub struct SeededRng {
    seed: u64,
    stream: u64,
    inner: ChaCha20Rng,
    spare_normal: Option<f64>,
}

/// Serializable position inside a [`SeededRng`] stream.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngCursor {
    pub seed: u64,
    pub stream: u64,
    pub word_pos: u128,
    pub spare_normal: Option<f64>,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    /// Independent sub-stream of the same seed. Used to give each consumer
    /// (backbone weights, noise draws, evaluation) its own sequence.
    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha20Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self {
            seed,
            stream,
            inner,
            spare_normal: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn algorithm(&self) -> &'static str {
        RNG_ALGORITHM
    }

    pub fn cursor(&self) -> RngCursor {
        RngCursor {
            seed: self.seed,
            stream: self.stream,
            word_pos: self.inner.get_word_pos(),
            spare_normal: self.spare_normal,
        }
    }

    pub fn from_cursor(cursor: RngCursor) -> Self {
        let mut rng = Self::with_stream(cursor.seed, cursor.stream);
        rng.inner.set_word_pos(cursor.word_pos);
        rng.spare_normal = cursor.spare_normal;
        rng
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)`. Drawn through `u64` so the result does
    /// not depend on the platform's pointer width.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        self.inner.gen_range(0..n as u64) as usize
    }

    /// One N(0, 1) draw. Box–Muller produces pairs; the second value is
    /// cached and returned by the next call.
    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        // 1 - U lies in (0, 1], keeping ln finite.
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let radius = (-2.0 * u1.ln()).sqrt();
        let angle = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(radius * angle.sin());
        radius * angle.cos()
    }

    /// In-place Fisher–Yates shuffle.
    pub fn shuffle<X>(&mut self, items: &mut [X]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// `rows x cols` matrix of i.i.d. N(0, 1) entries, filled row-major.
pub fn sample_standard_normal<T: Real>(rng: &mut SeededRng, rows: usize, cols: usize) -> Matrix<T> {
    Matrix::from_fn(rows, cols, |_, _| T::of(rng.standard_normal()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_matrix() {
        let a: Matrix<f64> = sample_standard_normal(&mut SeededRng::new(5), 2, 2);
        let b: Matrix<f64> = sample_standard_normal(&mut SeededRng::new(5), 2, 2);
        assert_eq!(a, b);
    }

    #[test]
    fn different_seeds_differ() {
        let a: Matrix<f64> = sample_standard_normal(&mut SeededRng::new(5), 2, 2);
        let b: Matrix<f64> = sample_standard_normal(&mut SeededRng::new(6), 2, 2);
        assert!(a.as_slice().iter().zip(b.as_slice()).any(|(x, y)| x != y));
    }

    #[test]
    fn moments_of_ten_thousand_draws() {
        let m: Matrix<f64> = sample_standard_normal(&mut SeededRng::new(1993), 100, 100);
        let n = m.as_slice().len() as f64;
        let mean = m.sum() / n;
        let var = m.as_slice().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "variance {var}");
    }

    #[test]
    fn cursor_resumes_stream() {
        let mut a = SeededRng::new(11);
        for _ in 0..7 {
            a.standard_normal();
        }
        let mut b = SeededRng::from_cursor(a.cursor());
        for _ in 0..20 {
            assert_eq!(a.standard_normal().to_bits(), b.standard_normal().to_bits());
            assert_eq!(a.below(13), b.below(13));
        }
    }

    #[test]
    fn streams_are_independent() {
        let mut a = SeededRng::with_stream(3, 0);
        let mut b = SeededRng::with_stream(3, 1);
        assert_ne!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn pinned_first_draws() {
        // Frozen once; guards against silent changes to the stream definition.
        let mut rng = SeededRng::new(1993);
        let first = rng.next_u64();
        let normal = rng.standard_normal();
        assert_eq!(first, PINNED_U64);
        assert!((normal - PINNED_NORMAL).abs() < 1e-14);
        assert_eq!(rng.algorithm(), "chacha20+box-muller");
    }

    const PINNED_U64: u64 = 1179126553928816;
    const PINNED_NORMAL: f64 = -0.3305517300637304;
}
