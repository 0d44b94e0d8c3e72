//! Task-specific noise generators and the layer that mixes their output
//! into intermediate features.
//!
//! A layer down-projects its input `u` to `h = u W_down`, lets every task's
//! generator produce `eps_i = e * sigma_i(h) + mu_i(h)` from a shared
//! standard normal draw `e`, mixes the `eps_i` and adds the mixture back
//! through `W_up`. `W_down` and `W_up` are frozen N(0, 1) matrices shared by
//! all tasks; each generator is trained during its own session and frozen
//! afterwards.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::numeric::softmax;
use crate::rng::{sample_standard_normal, SeededRng};
use crate::scalar::Real;

/// How the per-task noises of a layer are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MixtureStrategy {
    /// `sum_i omega_i eps_i` with trainable `omega`.
    LearnedOmega,
    /// Mean of all task noises.
    Average,
    /// Mean of the generator means only (scale path switched off).
    MuOnly,
    /// Mean of the scaled draws only (mean path switched off).
    SigmaOnly,
    /// Newest task's noise alone.
    LastTask,
    /// One uniformly chosen task's noise per batch.
    RandomTask,
}

impl MixtureStrategy {
    pub const ALL: [MixtureStrategy; 6] = [
        MixtureStrategy::LearnedOmega,
        MixtureStrategy::Average,
        MixtureStrategy::MuOnly,
        MixtureStrategy::SigmaOnly,
        MixtureStrategy::LastTask,
        MixtureStrategy::RandomTask,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MixtureStrategy::LearnedOmega => "learned-omega",
            MixtureStrategy::Average => "average",
            MixtureStrategy::MuOnly => "mu-only",
            MixtureStrategy::SigmaOnly => "sigma-only",
            MixtureStrategy::LastTask => "last-task",
            MixtureStrategy::RandomTask => "random-task",
        }
    }

    pub fn uses_mu(self) -> bool {
        self != MixtureStrategy::SigmaOnly
    }

    pub fn uses_sigma(self) -> bool {
        self != MixtureStrategy::MuOnly
    }
}

impl fmt::Display for MixtureStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MixtureStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown mixture strategy `{s}`")))
    }
}

/// One task's noise generator: two affine maps `h -> h W + b` producing the
/// mean and the scale of the noise.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseGenerator<T> {
    pub mu_weight: Matrix<T>,
    pub mu_bias: Vec<T>,
    pub sigma_weight: Matrix<T>,
    pub sigma_bias: Vec<T>,
    pub task_index: usize,
    pub frozen: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorGrad<T> {
    pub mu_weight: Matrix<T>,
    pub mu_bias: Vec<T>,
    pub sigma_weight: Matrix<T>,
    pub sigma_bias: Vec<T>,
}

impl<T: Real> NoiseGenerator<T> {
    /// Weights N(0, 1/d2) times `init_scale`, zero biases.
    pub fn random(d2: usize, task_index: usize, init_scale: T, rng: &mut SeededRng) -> Self {
        let s = init_scale * T::of(1.0 / (d2 as f64).sqrt());
        let mu_weight = sample_standard_normal::<T>(rng, d2, d2).scale(s);
        let sigma_weight = sample_standard_normal::<T>(rng, d2, d2).scale(s);
        Self {
            mu_weight,
            mu_bias: vec![T::zero(); d2],
            sigma_weight,
            sigma_bias: vec![T::zero(); d2],
            task_index,
            frozen: false,
        }
    }

    pub fn zeros(d2: usize, task_index: usize) -> Self {
        Self {
            mu_weight: Matrix::zeros(d2, d2),
            mu_bias: vec![T::zero(); d2],
            sigma_weight: Matrix::zeros(d2, d2),
            sigma_bias: vec![T::zero(); d2],
            task_index,
            frozen: false,
        }
    }

    pub fn width(&self) -> usize {
        self.mu_bias.len()
    }

    pub fn parameter_count(&self) -> usize {
        let d2 = self.width();
        2 * d2 * d2 + 2 * d2
    }

    pub fn mean(&self, h: &Matrix<T>) -> Matrix<T> {
        let mut m = h.matmul(&self.mu_weight);
        m.add_row_vector(&self.mu_bias);
        m
    }

    pub fn scale(&self, h: &Matrix<T>) -> Matrix<T> {
        let mut s = h.matmul(&self.sigma_weight);
        s.add_row_vector(&self.sigma_bias);
        s
    }

    /// `epsilon * sigma(h) + mu(h)`, elementwise.
    pub fn generate_noise(&self, h: &Matrix<T>, epsilon: &Matrix<T>) -> Result<Matrix<T>> {
        self.check_width(h)?;
        if epsilon.shape() != h.shape() {
            return Err(Error::DimensionMismatch(format!(
                "epsilon {:?} vs features {:?}",
                epsilon.shape(),
                h.shape()
            )));
        }
        let mut out = epsilon.hadamard(&self.scale(h));
        out.add_assign(&self.mean(h));
        Ok(out)
    }

    fn check_width(&self, h: &Matrix<T>) -> Result<()> {
        if h.cols() != self.width() {
            return Err(Error::DimensionMismatch(format!(
                "features of width {} for a {}-wide generator",
                h.cols(),
                self.width()
            )));
        }
        Ok(())
    }

    /// The generator's noise with either path optionally switched off.
    fn noise_parts(
        &self,
        h: &Matrix<T>,
        epsilon: Option<&Matrix<T>>,
        use_mu: bool,
        use_sigma: bool,
    ) -> Matrix<T> {
        let mut out = if use_mu {
            self.mean(h)
        } else {
            Matrix::zeros(h.rows(), h.cols())
        };
        if use_sigma {
            if let Some(e) = epsilon {
                out.add_assign(&e.hadamard(&self.scale(h)));
            }
        }
        out
    }

    /// Flattened parameters: mu weight, mu bias, sigma weight, sigma bias.
    pub fn flat_params(&self) -> Vec<T> {
        let mut v = Vec::with_capacity(self.parameter_count());
        v.extend_from_slice(self.mu_weight.as_slice());
        v.extend_from_slice(&self.mu_bias);
        v.extend_from_slice(self.sigma_weight.as_slice());
        v.extend_from_slice(&self.sigma_bias);
        v
    }

    /// Inverse of [`Self::flat_params`]; returns the number of values read.
    pub fn set_flat_params(&mut self, src: &[T]) -> usize {
        let d2 = self.width();
        let mut at = 0;
        let mut take = |dst: &mut [T]| {
            dst.copy_from_slice(&src[at..at + dst.len()]);
            at += dst.len();
        };
        take(self.mu_weight.as_mut_slice());
        take(&mut self.mu_bias);
        take(self.sigma_weight.as_mut_slice());
        take(&mut self.sigma_bias);
        debug_assert_eq!(at, 2 * d2 * d2 + 2 * d2);
        at
    }
}

impl<T: Real> GeneratorGrad<T> {
    pub fn flat(&self) -> Vec<T> {
        let mut v = Vec::new();
        v.extend_from_slice(self.mu_weight.as_slice());
        v.extend_from_slice(&self.mu_bias);
        v.extend_from_slice(self.sigma_weight.as_slice());
        v.extend_from_slice(&self.sigma_bias);
        v
    }
}

/// Randomness and mixing coefficients resolved for one forward pass of a
/// layer, so the pass itself is deterministic and replayable.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerPlan<T> {
    /// Standard normal draw shared by the layer's generators; `None` uses
    /// the mean path (`e = 0`).
    pub epsilon: Option<Matrix<T>>,
    /// Mixing coefficient per generator.
    pub coeffs: Vec<T>,
    pub use_mu: bool,
    pub use_sigma: bool,
    /// Whether the coefficients are the layer's trainable `omega`.
    pub learned: bool,
}

/// Forward intermediates of one Pi-Noise layer.
#[derive(Clone, Debug)]
pub struct LayerTrace<T> {
    pub down: Matrix<T>,
    /// Per generator noise, `None` where its coefficient is structurally zero.
    pub noises: Vec<Option<Matrix<T>>>,
    pub mixture: Matrix<T>,
    pub output: Matrix<T>,
}

#[derive(Clone, Debug)]
pub struct LayerGrad<T> {
    pub input: Matrix<T>,
    /// Gradients for non-frozen generators only, keyed by generator position.
    pub generators: Vec<(usize, GeneratorGrad<T>)>,
    pub omega: Option<Vec<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PiNoiseLayer<T> {
    w_down: Matrix<T>,
    w_up: Matrix<T>,
    pub generators: Vec<NoiseGenerator<T>>,
    pub prototypes: Vec<Vec<T>>,
    pub omega: Vec<T>,
    pub layer_index: usize,
}

impl<T: Real> PiNoiseLayer<T> {
    pub fn new(d1: usize, d2: usize, layer_index: usize, rng: &mut SeededRng) -> Self {
        let w_down = sample_standard_normal(rng, d1, d2);
        let w_up = sample_standard_normal(rng, d2, d1);
        Self::from_projections(w_down, w_up, layer_index)
    }

    pub fn from_projections(w_down: Matrix<T>, w_up: Matrix<T>, layer_index: usize) -> Self {
        Self {
            w_down,
            w_up,
            generators: Vec::new(),
            prototypes: Vec::new(),
            omega: Vec::new(),
            layer_index,
        }
    }

    pub fn w_down(&self) -> &Matrix<T> {
        &self.w_down
    }

    pub fn w_up(&self) -> &Matrix<T> {
        &self.w_up
    }

    pub fn d1(&self) -> usize {
        self.w_down.rows()
    }

    pub fn d2(&self) -> usize {
        self.w_down.cols()
    }

    pub fn num_tasks(&self) -> usize {
        self.generators.len()
    }

    pub fn down_project(&self, r: &Matrix<T>) -> Matrix<T> {
        r.matmul(&self.w_down)
    }

    /// Resolves the noise draw and mixing coefficients for a batch of `n`
    /// rows. `eval_mode` uses the mean path.
    pub fn plan(
        &self,
        strategy: MixtureStrategy,
        n: usize,
        eval_mode: bool,
        rng: &mut SeededRng,
    ) -> Result<LayerPlan<T>> {
        let t = self.generators.len();
        let uniform = || vec![T::one() / T::of(t as f64); t];
        let one_hot = |k: usize| {
            (0..t)
                .map(|i| if i == k { T::one() } else { T::zero() })
                .collect::<Vec<T>>()
        };
        let coeffs = match strategy {
            _ if t == 0 => Vec::new(),
            MixtureStrategy::LearnedOmega => {
                if self.omega.len() != t {
                    return Err(Error::DimensionMismatch(format!(
                        "omega has {} entries for {t} generators",
                        self.omega.len()
                    )));
                }
                self.omega.clone()
            }
            MixtureStrategy::Average | MixtureStrategy::MuOnly | MixtureStrategy::SigmaOnly => {
                uniform()
            }
            MixtureStrategy::LastTask => one_hot(t - 1),
            MixtureStrategy::RandomTask => one_hot(rng.below(t)),
        };
        let epsilon = if eval_mode || t == 0 {
            None
        } else {
            Some(sample_standard_normal(rng, n, self.d2()))
        };
        Ok(LayerPlan {
            epsilon,
            coeffs,
            use_mu: strategy.uses_mu(),
            use_sigma: strategy.uses_sigma(),
            learned: strategy == MixtureStrategy::LearnedOmega,
        })
    }

    /// Learned plans read the live `omega` so a plan can be replayed after
    /// the weights move.
    fn coefficients<'a>(&'a self, plan: &'a LayerPlan<T>) -> &'a [T] {
        if plan.learned {
            &self.omega
        } else {
            &plan.coeffs
        }
    }

    /// `u + mix(eps_1..eps_t) W_up` under a resolved plan.
    pub fn forward(&self, u: &Matrix<T>, plan: &LayerPlan<T>) -> Result<LayerTrace<T>> {
        if u.cols() != self.d1() {
            return Err(Error::DimensionMismatch(format!(
                "layer input width {} but d1 = {}",
                u.cols(),
                self.d1()
            )));
        }
        if self.coefficients(plan).len() != self.generators.len() {
            return Err(Error::DimensionMismatch(format!(
                "plan for {} generators, layer has {}",
                plan.coeffs.len(),
                self.generators.len()
            )));
        }
        let down = self.down_project(u);
        if self.generators.is_empty() {
            return Ok(LayerTrace {
                mixture: Matrix::zeros(u.rows(), self.d2()),
                noises: Vec::new(),
                down,
                output: u.clone(),
            });
        }
        if let Some(e) = &plan.epsilon {
            if e.shape() != down.shape() {
                return Err(Error::DimensionMismatch(format!(
                    "epsilon {:?} vs {:?}",
                    e.shape(),
                    down.shape()
                )));
            }
        }
        let mut noises = Vec::with_capacity(self.generators.len());
        let mut mixture: Option<Matrix<T>> = None;
        for (gen, &c) in self.generators.iter().zip(self.coefficients(plan)) {
            if !plan.learned && c == T::zero() {
                noises.push(None);
                continue;
            }
            let eps = gen.noise_parts(&down, plan.epsilon.as_ref(), plan.use_mu, plan.use_sigma);
            match mixture.as_mut() {
                None => mixture = Some(eps.scale(c)),
                Some(m) => m.axpy(c, &eps),
            }
            noises.push(Some(eps));
        }
        let mixture = mixture.unwrap_or_else(|| Matrix::zeros(u.rows(), self.d2()));
        let mut output = u.clone();
        output.add_assign(&mixture.matmul(&self.w_up));
        Ok(LayerTrace {
            down,
            noises,
            mixture,
            output,
        })
    }

    /// Applies the layer to `r` with fresh randomness from `rng`.
    pub fn apply_layer(
        &self,
        r: &Matrix<T>,
        strategy: MixtureStrategy,
        rng: &mut SeededRng,
        eval_mode: bool,
    ) -> Result<Matrix<T>> {
        let plan = self.plan(strategy, r.rows(), eval_mode, rng)?;
        Ok(self.forward(r, &plan)?.output)
    }

    /// Backpropagates `grad_out` (w.r.t. the layer output) through a
    /// recorded forward pass.
    pub fn backward(
        &self,
        trace: &LayerTrace<T>,
        plan: &LayerPlan<T>,
        grad_out: &Matrix<T>,
    ) -> LayerGrad<T> {
        let mut input = grad_out.clone();
        if self.generators.is_empty() {
            return LayerGrad {
                input,
                generators: Vec::new(),
                omega: None,
            };
        }
        let d_mix = grad_out.matmul_t(&self.w_up);
        let omega = plan.learned.then(|| {
            trace
                .noises
                .iter()
                .map(|n| {
                    n.as_ref()
                        .map_or(T::zero(), |eps| eps.hadamard(&d_mix).sum())
                })
                .collect()
        });
        let mut d_down = Matrix::zeros(d_mix.rows(), d_mix.cols());
        let mut generators = Vec::new();
        for (i, (gen, &c)) in self
            .generators
            .iter()
            .zip(self.coefficients(plan))
            .enumerate()
        {
            if trace.noises[i].is_none() {
                continue;
            }
            let d_eps = d_mix.scale(c);
            let d_mu = if plan.use_mu {
                Some(d_eps.clone())
            } else {
                None
            };
            let d_sigma = match (&plan.epsilon, plan.use_sigma) {
                (Some(e), true) => Some(d_eps.hadamard(e)),
                _ => None,
            };
            if let Some(d) = &d_mu {
                d_down.add_assign(&d.matmul_t(&gen.mu_weight));
            }
            if let Some(d) = &d_sigma {
                d_down.add_assign(&d.matmul_t(&gen.sigma_weight));
            }
            if !gen.frozen {
                let d2 = gen.width();
                let (mu_weight, mu_bias) = match &d_mu {
                    Some(d) => (trace.down.t_matmul(d), d.column_sums()),
                    None => (Matrix::zeros(d2, d2), vec![T::zero(); d2]),
                };
                let (sigma_weight, sigma_bias) = match &d_sigma {
                    Some(d) => (trace.down.t_matmul(d), d.column_sums()),
                    None => (Matrix::zeros(d2, d2), vec![T::zero(); d2]),
                };
                generators.push((
                    i,
                    GeneratorGrad {
                        mu_weight,
                        mu_bias,
                        sigma_weight,
                        sigma_bias,
                    },
                ));
            }
        }
        input.add_assign(&d_down.matmul_t(&self.w_down));
        LayerGrad {
            input,
            generators,
            omega,
        }
    }

    /// Mean of the down-projected features over every row of every batch.
    pub fn compute_prototype<'a, I>(&self, batches: I) -> Result<Vec<T>>
    where
        I: IntoIterator<Item = &'a Matrix<T>>,
    {
        let mut sum = vec![T::zero(); self.d2()];
        let mut count = 0usize;
        for b in batches {
            if b.cols() != self.d1() {
                return Err(Error::DimensionMismatch(format!(
                    "prototype batch width {} vs d1 {}",
                    b.cols(),
                    self.d1()
                )));
            }
            for (s, v) in sum.iter_mut().zip(self.down_project(b).column_sums()) {
                *s = *s + v;
            }
            count += b.rows();
        }
        if count == 0 {
            return Err(Error::EmptyInput("prototype needs at least one sample"));
        }
        let n = T::of(count as f64);
        Ok(sum.into_iter().map(|s| s / n).collect())
    }

    /// Freezes every generator currently registered.
    pub fn freeze_all(&mut self) {
        for g in &mut self.generators {
            g.frozen = true;
        }
    }
}

/// Combines already computed task noises.
///
/// For `MuOnly` and `SigmaOnly` the caller is expected to have produced the
/// noises with the other path switched off; they are averaged.
pub fn mix<T: Real>(
    strategy: MixtureStrategy,
    noises: &[Matrix<T>],
    omega: &[T],
    rng: &mut SeededRng,
) -> Result<Matrix<T>> {
    let first = noises
        .first()
        .ok_or(Error::EmptyInput("mix needs at least one noise"))?;
    if noises.iter().any(|n| n.shape() != first.shape()) {
        return Err(Error::DimensionMismatch("noises differ in shape".into()));
    }
    let t = noises.len();
    let weighted = |w: &[T]| {
        let mut out = noises[0].scale(w[0]);
        for (n, &c) in noises.iter().zip(w).skip(1) {
            out.axpy(c, n);
        }
        out
    };
    Ok(match strategy {
        MixtureStrategy::LearnedOmega => {
            if omega.len() != t {
                return Err(Error::DimensionMismatch(format!(
                    "omega has {} entries for {t} noises",
                    omega.len()
                )));
            }
            weighted(omega)
        }
        MixtureStrategy::Average | MixtureStrategy::MuOnly | MixtureStrategy::SigmaOnly => {
            weighted(&vec![T::one() / T::of(t as f64); t])
        }
        MixtureStrategy::LastTask => noises[t - 1].clone(),
        MixtureStrategy::RandomTask => noises[rng.below(t)].clone(),
    })
}

pub fn cosine_similarity<T: Real>(a: &[T], b: &[T]) -> Result<T> {
    let na = a.iter().map(|&v| v * v).sum::<T>().sqrt();
    let nb = b.iter().map(|&v| v * v).sum::<T>().sqrt();
    if na == T::zero() || nb == T::zero() {
        return Err(Error::InvalidParameter("zero-norm prototype".into()));
    }
    Ok(a.iter().zip(b).map(|(&x, &y)| x * y).sum::<T>() / (na * nb))
}

/// Initial mixture weights for task `t`: softmax over cosine similarities
/// between the newest prototype and every stored one, at temperature `tau`.
pub fn init_omega<T: Real>(prototypes: &[Vec<T>], t: usize, tau: T) -> Result<Vec<T>> {
    if t == 0 || prototypes.len() != t {
        return Err(Error::DimensionMismatch(format!(
            "{} prototypes for task {t}",
            prototypes.len()
        )));
    }
    let current = &prototypes[t - 1];
    let mut sims = Vec::with_capacity(t);
    for (i, p) in prototypes.iter().enumerate() {
        let s = cosine_similarity(current, p)?;
        sims.push(if i == t - 1 { T::one() } else { s });
    }
    omega_from_similarities(&sims, tau)
}

/// `softmax(s / tau)` over a similarity vector.
pub fn omega_from_similarities<T: Real>(similarities: &[T], tau: T) -> Result<Vec<T>> {
    softmax(similarities, tau)
}
