//! Frozen feature extractor and the random-feature buffer in front of the
//! analytic classifier.
//!
//! The extractor is a fixed random input adapter followed by `L` residual
//! blocks `f(r) = r + gain * tanh(r A)`. None of its parameters change after
//! construction. Pi-Noise layers, when present, are applied after every
//! block; see [`crate::pinoise`].

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::pinoise::{LayerPlan, LayerTrace, PiNoiseLayer};
use crate::rng::{sample_standard_normal, SeededRng};
use crate::scalar::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct FrozenBlock<T> {
    weight: Matrix<T>,
    gain: T,
}

impl<T: Real> FrozenBlock<T> {
    pub fn new(weight: Matrix<T>, gain: T) -> Self {
        Self { weight, gain }
    }

    pub fn weight(&self) -> &Matrix<T> {
        &self.weight
    }

    pub fn gain(&self) -> T {
        self.gain
    }

    /// Returns the block output and the `tanh` activations needed for the
    /// backward pass.
    pub fn apply(&self, r: &Matrix<T>) -> (Matrix<T>, Matrix<T>) {
        let act = r.matmul(&self.weight).map(T::tanh);
        let mut out = r.clone();
        out.axpy(self.gain, &act);
        (out, act)
    }

    /// Gradient w.r.t. the block input given the output gradient.
    pub fn backward(&self, act: &Matrix<T>, grad_out: &Matrix<T>) -> Matrix<T> {
        let gain = self.gain;
        let pre = Matrix::from_fn(act.rows(), act.cols(), |i, j| {
            let a = act[(i, j)];
            grad_out[(i, j)] * gain * (T::one() - a * a)
        });
        let mut g = grad_out.clone();
        g.add_assign(&pre.matmul_t(&self.weight));
        g
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Backbone<T> {
    input_adapter: Matrix<T>,
    blocks: Vec<FrozenBlock<T>>,
    d1: usize,
}

/// Intermediate values of one forward pass, enough to backpropagate.
#[derive(Clone, Debug)]
pub struct ForwardTrace<T> {
    /// `x * adapter`, the input to block 1.
    pub embedded: Matrix<T>,
    /// Per block: `tanh(r A)` activations.
    pub activations: Vec<Matrix<T>>,
    /// Per block: output `f_l(r_{l-1})`, i.e. the input to Pi-Noise layer `l`.
    pub block_outputs: Vec<Matrix<T>>,
    /// Per block: Pi-Noise internals, `None` when no layers were supplied.
    pub noise: Vec<Option<LayerTrace<T>>>,
    /// Final feature `r_L` (after the last Pi-Noise layer, if any).
    pub output: Matrix<T>,
}

impl<T: Real> ForwardTrace<T> {
    /// Layer outputs `r_1..r_L` (noise-adjusted where layers were applied).
    pub fn layer_outputs(&self) -> Vec<&Matrix<T>> {
        self.noise
            .iter()
            .zip(&self.block_outputs)
            .map(|(n, b)| n.as_ref().map_or(b, |t| &t.output))
            .collect()
    }
}

impl<T: Real> Backbone<T> {
    /// Adapter entries are N(0, 1/d_raw) and block weights N(0, 1/d1).
    pub fn random(
        d_raw: usize,
        d1: usize,
        num_blocks: usize,
        gain: T,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if d_raw == 0 || d1 == 0 || num_blocks == 0 {
            return Err(Error::InvalidParameter(format!(
                "backbone needs positive sizes, got d_raw={d_raw} d1={d1} L={num_blocks}"
            )));
        }
        let adapter =
            sample_standard_normal::<T>(rng, d_raw, d1).scale(T::of(1.0 / (d_raw as f64).sqrt()));
        let blocks = (0..num_blocks)
            .map(|_| {
                let w =
                    sample_standard_normal::<T>(rng, d1, d1).scale(T::of(1.0 / (d1 as f64).sqrt()));
                FrozenBlock::new(w, gain)
            })
            .collect();
        Ok(Self {
            input_adapter: adapter,
            blocks,
            d1,
        })
    }

    pub fn from_parts(input_adapter: Matrix<T>, blocks: Vec<FrozenBlock<T>>) -> Result<Self> {
        let d1 = input_adapter.cols();
        if blocks.iter().any(|b| b.weight.shape() != (d1, d1)) {
            return Err(Error::DimensionMismatch(format!(
                "block weights must be {d1}x{d1}"
            )));
        }
        Ok(Self {
            input_adapter,
            blocks,
            d1,
        })
    }

    pub fn d1(&self) -> usize {
        self.d1
    }

    pub fn d_raw(&self) -> usize {
        self.input_adapter.rows()
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn blocks(&self) -> &[FrozenBlock<T>] {
        &self.blocks
    }

    pub fn input_adapter(&self) -> &Matrix<T> {
        &self.input_adapter
    }

    /// Runs the batch through every block, applying `layers[l]` with
    /// `plans[l]` after block `l` when layers are supplied.
    pub fn forward(
        &self,
        layers: Option<(&[PiNoiseLayer<T>], &[LayerPlan<T>])>,
        batch: &Matrix<T>,
    ) -> Result<ForwardTrace<T>> {
        if batch.cols() != self.d_raw() {
            return Err(Error::DimensionMismatch(format!(
                "batch width {} but backbone expects {}",
                batch.cols(),
                self.d_raw()
            )));
        }
        if let Some((ls, ps)) = layers {
            if ls.len() != self.blocks.len() || ps.len() != ls.len() {
                return Err(Error::DimensionMismatch(format!(
                    "{} blocks, {} Pi-Noise layers, {} plans",
                    self.blocks.len(),
                    ls.len(),
                    ps.len()
                )));
            }
        }
        let embedded = batch.matmul(&self.input_adapter);
        let mut r = embedded.clone();
        let mut activations = Vec::with_capacity(self.blocks.len());
        let mut block_outputs = Vec::with_capacity(self.blocks.len());
        let mut noise = Vec::with_capacity(self.blocks.len());
        for (l, block) in self.blocks.iter().enumerate() {
            let (u, act) = block.apply(&r);
            let next = match layers {
                Some((ls, ps)) => {
                    let t = ls[l].forward(&u, &ps[l])?;
                    let out = t.output.clone();
                    noise.push(Some(t));
                    out
                }
                None => {
                    noise.push(None);
                    u.clone()
                }
            };
            if !next.is_finite() {
                return Err(Error::NonFinite(format!("output of layer {}", l + 1)));
            }
            activations.push(act);
            block_outputs.push(u);
            r = next;
        }
        Ok(ForwardTrace {
            embedded,
            activations,
            block_outputs,
            noise,
            output: r,
        })
    }

    /// SHA-256 over the frozen parameters.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        hash_matrix(&mut h, &self.input_adapter);
        for b in &self.blocks {
            hash_matrix(&mut h, &b.weight);
            h.update(b.gain.as_f64().to_le_bytes());
        }
        crate::data::hex(&h.finalize())
    }
}

pub(crate) fn hash_matrix<T: Real>(h: &mut Sha256, m: &Matrix<T>) {
    h.update((m.rows() as u64).to_le_bytes());
    h.update((m.cols() as u64).to_le_bytes());
    for v in m.as_slice() {
        h.update(v.as_f64().to_le_bytes());
    }
}

/// Frozen random projection followed by a rectifier.
#[derive(Clone, Debug, PartialEq)]
pub struct BufferExpansion<T> {
    projection: Matrix<T>,
}

impl<T: Real> BufferExpansion<T> {
    pub fn random(d1: usize, buffer_size: usize, rng: &mut SeededRng) -> Result<Self> {
        if buffer_size < d1 {
            return Err(Error::InvalidParameter(format!(
                "buffer size {buffer_size} is below feature width {d1}"
            )));
        }
        Ok(Self {
            projection: sample_standard_normal(rng, d1, buffer_size),
        })
    }

    pub fn from_projection(projection: Matrix<T>) -> Result<Self> {
        if projection.cols() < projection.rows() {
            return Err(Error::InvalidParameter(
                "buffer narrower than its input".into(),
            ));
        }
        Ok(Self { projection })
    }

    pub fn projection(&self) -> &Matrix<T> {
        &self.projection
    }

    pub fn buffer_size(&self) -> usize {
        self.projection.cols()
    }

    pub fn input_width(&self) -> usize {
        self.projection.rows()
    }

    /// `max(0, r * projection)`
    pub fn expand(&self, r: &Matrix<T>) -> Result<Matrix<T>> {
        if r.cols() != self.projection.rows() {
            return Err(Error::DimensionMismatch(format!(
                "feature width {} but buffer expects {}",
                r.cols(),
                self.projection.rows()
            )));
        }
        Ok(r.matmul(&self.projection).map(|v| v.max(T::zero())))
    }

    /// Gradient w.r.t. `r` given the gradient w.r.t. the expanded features.
    pub fn backward(&self, expanded: &Matrix<T>, grad_out: &Matrix<T>) -> Matrix<T> {
        let masked = Matrix::from_fn(grad_out.rows(), grad_out.cols(), |i, j| {
            if expanded[(i, j)] > T::zero() {
                grad_out[(i, j)]
            } else {
                T::zero()
            }
        });
        masked.matmul_t(&self.projection)
    }

    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        hash_matrix(&mut h, &self.projection);
        crate::data::hex(&h.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn backbone() -> Backbone<f64> {
        Backbone::random(6, 8, 3, 0.5, &mut SeededRng::new(42)).unwrap()
    }

    #[test]
    fn rows_are_independent() {
        let b = backbone();
        let x: Matrix<f64> = sample_standard_normal(&mut SeededRng::new(1), 8, 6);
        let all = b.forward(None, &x).unwrap().output;
        let one = b.forward(None, &x.select_rows(&[5])).unwrap().output;
        assert_eq!(one.row(0), all.row(5));
    }

    #[test]
    fn golden_output_hash() {
        let b = backbone();
        let x: Matrix<f64> = sample_standard_normal(&mut SeededRng::new(2), 4, 6);
        let out = b.forward(None, &x).unwrap().output;
        // Rounded so the pin survives FMA / kernel differences between CPUs.
        let text: String = out.as_slice().iter().map(|v| format!("{v:.9};")).collect();
        let digest = crate::data::hex(&Sha256::digest(text.as_bytes()));
        assert_eq!(digest, GOLDEN_FORWARD);
    }

    const GOLDEN_FORWARD: &str = "8ce952e8b0c50aa54f33210cd2740efcc0f9eeff14281b18850315656f938f33";

    #[test]
    fn width_mismatch() {
        let b = backbone();
        assert!(matches!(
            b.forward(None, &Matrix::zeros(2, 5)),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn residual_branch_is_bounded() {
        let b = backbone();
        let x: Matrix<f64> = sample_standard_normal(&mut SeededRng::new(3), 5, 6).scale(100.0);
        let t = b.forward(None, &x).unwrap();
        for act in &t.activations {
            for i in 0..act.rows() {
                let norm = act.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!(0.5 * norm <= 0.5 * (8.0f64).sqrt() + 1e-12);
            }
        }
    }

    #[test]
    fn expand_zero_is_zero() {
        let e = BufferExpansion::<f64>::random(4, 16, &mut SeededRng::new(0)).unwrap();
        assert_eq!(
            e.expand(&Matrix::zeros(3, 4)).unwrap(),
            Matrix::zeros(3, 16)
        );
    }

    #[test]
    fn expand_identity_padded_passthrough() {
        let proj = Matrix::from_fn(3, 5, |i, j| if i == j { 1.0 } else { 0.0 });
        let e = BufferExpansion::from_projection(proj).unwrap();
        let r = Matrix::from_fn(2, 3, |i, j| (i + j) as f64 * 0.5);
        let z = e.expand(&r).unwrap();
        for i in 0..2 {
            assert_eq!(&z.row(i)[..3], r.row(i));
            assert_eq!(&z.row(i)[3..], &[0.0, 0.0]);
        }
    }

    #[test]
    fn expand_rectifies_about_half() {
        let mut rng = SeededRng::new(9);
        let e = BufferExpansion::<f64>::random(16, 256, &mut rng).unwrap();
        let r: Matrix<f64> = sample_standard_normal(&mut rng, 64, 16);
        let z = e.expand(&r).unwrap();
        let zeros =
            z.as_slice().iter().filter(|v| **v == 0.0).count() as f64 / z.as_slice().len() as f64;
        assert!((0.4..=0.6).contains(&zeros), "zero fraction {zeros}");
    }

    #[test]
    fn expand_width_mismatch() {
        let e = BufferExpansion::<f64>::random(4, 8, &mut SeededRng::new(0)).unwrap();
        assert!(e.expand(&Matrix::zeros(1, 3)).is_err());
        assert!(BufferExpansion::<f64>::random(8, 4, &mut SeededRng::new(0)).is_err());
    }
}
