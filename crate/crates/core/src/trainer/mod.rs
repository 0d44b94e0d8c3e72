//! Per-session training pipeline.
//!
//! Each session runs, in order:
//!
//! 1. analytic classifier update on the task features under the current
//!    (previous-session) noise, mean path;
//! 2. a new noise generator per layer;
//! 3. per-layer task prototypes and mixture weight initialisation;
//! 4. a zero auxiliary classifier;
//! 5. SGD on {new generators, mixture weights, auxiliary classifier} with the
//!    residual loss;
//! 6. the classifier update again, restarted from the pre-session state,
//!    with the trained noise;
//! 7. freezing of the new generators.
//!
//! Evaluation is done separately by [`crate::eval::evaluate`].

mod gradcheck;
mod optim;
mod tape;

pub use gradcheck::{
    gradcheck, GradcheckReport, GradcheckSetup, GroupError, ABS_TOLERANCE, REL_TOLERANCE,
};
pub use optim::{clip_global_norm, cosine_lr, sgd_step};
pub use tape::{
    residual_loss, residual_loss_grad, GradientTape, Gradients, LayerGradients, LossGrad, LossMode,
};

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BufferExpansion, ForwardTrace};
use crate::classifier::AnalyticClassifier;
use crate::data::TaskDataset;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::pinoise::{init_omega, LayerPlan, MixtureStrategy, NoiseGenerator, PiNoiseLayer};
use crate::rng::SeededRng;
use crate::scalar::Real;

/// Architecture of a model; everything here is fixed for a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub d_raw: usize,
    pub d1: usize,
    pub num_layers: usize,
    pub gain: f64,
    pub buffer_size: usize,
    pub d2: usize,
    pub lambda: f64,
    /// `false` gives the plain analytic-classifier baseline.
    pub use_pinoise: bool,
    pub strategy: MixtureStrategy,
    /// One mixture weight vector for all layers instead of one per layer.
    pub shared_omega: bool,
    pub backbone_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_init: f64,
    pub momentum: f64,
    pub tau: f64,
    pub loss_mode: LossMode,
    /// Global gradient norm limit; `None` disables clipping.
    pub clip: Option<f64>,
    /// Size of a fresh generator's noise relative to the features it is
    /// added to (0 gives all-zero generators).
    pub gen_init_scale: f64,
    /// Fit the analytic classifier on sampled rather than mean-path noise.
    pub stochastic_classifier: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 128,
            lr_init: 0.001,
            momentum: 0.9,
            tau: 2.0,
            loss_mode: LossMode::ResidualCorrectedCe,
            clip: Some(1.0),
            gen_init_scale: 0.01,
            stochastic_classifier: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidParameter(
                "batch_size must be positive".into(),
            ));
        }
        if !(self.lr_init > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "lr_init must be positive, got {}",
                self.lr_init
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidParameter(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.tau > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "tau must be positive, got {}",
                self.tau
            )));
        }
        if let Some(c) = self.clip {
            if !(c > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "clip must be positive, got {c}"
                )));
            }
        }
        if !(self.gen_init_scale >= 0.0) {
            return Err(Error::InvalidParameter(
                "gen_init_scale must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub session: usize,
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionOutcome {
    pub task_index: usize,
    pub epochs: Vec<EpochLog>,
    /// Largest change of any analytic classifier weight during gradient
    /// training. The classifier is outside the trainable set, so this is 0.
    pub classifier_drift: f64,
}

/// Which parameter block a flat trainable coordinate belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ParamGroup {
    PhiMu,
    PhiSigma,
    Omega,
    WAux,
}

impl ParamGroup {
    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::PhiMu => "phi_mu",
            ParamGroup::PhiSigma => "phi_sigma",
            ParamGroup::Omega => "omega",
            ParamGroup::WAux => "w_aux",
        }
    }
}

/// Backbone, Pi-Noise layers and the analytic classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct MinModel<T> {
    pub spec: ModelSpec,
    pub backbone: Backbone<T>,
    pub buffer: BufferExpansion<T>,
    /// Empty when Pi-Noise is disabled.
    pub layers: Vec<PiNoiseLayer<T>>,
    pub classifier: AnalyticClassifier<T>,
    pub sessions_completed: usize,
}

impl<T: Real> MinModel<T> {
    /// Draws the frozen parameters from `spec.backbone_seed`. Two specs that
    /// differ only in Pi-Noise settings share the same backbone and buffer.
    pub fn new(spec: ModelSpec) -> Result<Self> {
        if spec.d2 == 0 {
            return Err(Error::InvalidParameter("d2 must be positive".into()));
        }
        let backbone = Backbone::random(
            spec.d_raw,
            spec.d1,
            spec.num_layers,
            T::of(spec.gain),
            &mut SeededRng::with_stream(spec.backbone_seed, 10),
        )?;
        let buffer = BufferExpansion::random(
            spec.d1,
            spec.buffer_size,
            &mut SeededRng::with_stream(spec.backbone_seed, 11),
        )?;
        let layers = if spec.use_pinoise {
            let mut rng = SeededRng::with_stream(spec.backbone_seed, 12);
            (0..spec.num_layers)
                .map(|l| PiNoiseLayer::new(spec.d1, spec.d2, l, &mut rng))
                .collect()
        } else {
            Vec::new()
        };
        let classifier = AnalyticClassifier::new(spec.buffer_size, T::of(spec.lambda))?;
        Ok(Self {
            spec,
            backbone,
            buffer,
            layers,
            classifier,
            sessions_completed: 0,
        })
    }

    pub fn strategy(&self) -> MixtureStrategy {
        self.spec.strategy
    }

    fn has_noise(&self) -> bool {
        !self.layers.is_empty()
    }

    /// Resolves noise draws for every layer; `None` without Pi-Noise.
    pub fn plans(
        &self,
        n: usize,
        eval_mode: bool,
        rng: &mut SeededRng,
    ) -> Result<Option<Vec<LayerPlan<T>>>> {
        if !self.has_noise() {
            return Ok(None);
        }
        self.layers
            .iter()
            .map(|l| l.plan(self.spec.strategy, n, eval_mode, rng))
            .collect::<Result<Vec<_>>>()
            .map(Some)
    }

    pub fn forward(
        &self,
        x: &Matrix<T>,
        plans: Option<&[LayerPlan<T>]>,
    ) -> Result<ForwardTrace<T>> {
        match plans {
            Some(p) => self.backbone.forward(Some((&self.layers, p)), x),
            None => self.backbone.forward(None, x),
        }
    }

    /// Records a full forward pass to the buffered features.
    pub fn record(
        &self,
        x: &Matrix<T>,
        plans: Option<Vec<LayerPlan<T>>>,
    ) -> Result<GradientTape<T>> {
        let trace = self.forward(x, plans.as_deref())?;
        let expanded = self.buffer.expand(&trace.output)?;
        Ok(GradientTape {
            trace,
            plans,
            expanded,
        })
    }

    /// Classifier-ready features `z_L` for a batch.
    pub fn features(
        &self,
        x: &Matrix<T>,
        eval_mode: bool,
        rng: &mut SeededRng,
    ) -> Result<Matrix<T>> {
        let plans = self.plans(x.rows(), eval_mode, rng)?;
        Ok(self.record(x, plans)?.expanded)
    }

    /// Trainable parameters of generators that are not frozen yet.
    pub fn trainable_generator_params(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| l.generators.iter())
            .filter(|g| !g.frozen)
            .map(NoiseGenerator::parameter_count)
            .sum()
    }

    fn learns_omega(&self) -> bool {
        self.has_noise() && self.spec.strategy == MixtureStrategy::LearnedOmega
    }

    /// Group label of every flat trainable coordinate, in the order used by
    /// [`Self::gather_trainable`] and [`Gradients::flatten`].
    pub fn trainable_layout(&self, w_aux: &Matrix<T>) -> Vec<ParamGroup> {
        let mut out = Vec::new();
        for layer in &self.layers {
            for g in layer.generators.iter().filter(|g| !g.frozen) {
                let d2 = g.width();
                out.extend(std::iter::repeat_n(ParamGroup::PhiMu, d2 * d2 + d2));
                out.extend(std::iter::repeat_n(ParamGroup::PhiSigma, d2 * d2 + d2));
            }
        }
        if self.learns_omega() {
            let n = if self.spec.shared_omega {
                self.layers[0].omega.len()
            } else {
                self.layers.iter().map(|l| l.omega.len()).sum()
            };
            out.extend(std::iter::repeat_n(ParamGroup::Omega, n));
        }
        out.extend(std::iter::repeat_n(
            ParamGroup::WAux,
            w_aux.as_slice().len(),
        ));
        out
    }

    pub fn gather_trainable(&self, w_aux: &Matrix<T>) -> Vec<T> {
        let mut out = Vec::new();
        for layer in &self.layers {
            for g in layer.generators.iter().filter(|g| !g.frozen) {
                out.extend(g.flat_params());
            }
        }
        if self.learns_omega() {
            if self.spec.shared_omega {
                out.extend_from_slice(&self.layers[0].omega);
            } else {
                for l in &self.layers {
                    out.extend_from_slice(&l.omega);
                }
            }
        }
        out.extend_from_slice(w_aux.as_slice());
        out
    }

    pub fn scatter_trainable(&mut self, w_aux: &mut Matrix<T>, flat: &[T]) {
        let mut at = 0;
        for layer in &mut self.layers {
            for g in layer.generators.iter_mut().filter(|g| !g.frozen) {
                at += g.set_flat_params(&flat[at..]);
            }
        }
        if self.learns_omega() {
            if self.spec.shared_omega {
                let n = self.layers[0].omega.len();
                for l in &mut self.layers {
                    l.omega.copy_from_slice(&flat[at..at + n]);
                }
                at += n;
            } else {
                for l in &mut self.layers {
                    let n = l.omega.len();
                    l.omega.copy_from_slice(&flat[at..at + n]);
                    at += n;
                }
            }
        }
        let n = w_aux.as_slice().len();
        w_aux.as_mut_slice().copy_from_slice(&flat[at..at + n]);
        debug_assert_eq!(at + n, flat.len());
    }

    /// Loss and gradients for one batch under fixed noise plans.
    pub fn loss_and_gradients(
        &self,
        x: &Matrix<T>,
        y: &Matrix<T>,
        w_aux: &Matrix<T>,
        plans: Option<Vec<LayerPlan<T>>>,
        mode: LossMode,
    ) -> Result<(T, Gradients<T>)> {
        let tape = self.record(x, plans)?;
        let logits = self.classifier.predict(&tape.expanded)?;
        let lg = residual_loss_grad(&tape.expanded, &logits, w_aux, y, mode)?;
        let grads = tape.backward(self, &lg)?;
        Ok((lg.loss, grads))
    }

    /// Loss with the classifier logits supplied, i.e. held constant.
    pub fn loss_with_logits(
        &self,
        x: &Matrix<T>,
        y: &Matrix<T>,
        classifier_logits: &Matrix<T>,
        w_aux: &Matrix<T>,
        plans: Option<Vec<LayerPlan<T>>>,
        mode: LossMode,
    ) -> Result<T> {
        let tape = self.record(x, plans)?;
        residual_loss(&tape.expanded, classifier_logits, w_aux, y, mode)
    }

    /// Loss only, under fixed plans.
    pub fn loss(
        &self,
        x: &Matrix<T>,
        y: &Matrix<T>,
        w_aux: &Matrix<T>,
        plans: Option<Vec<LayerPlan<T>>>,
        mode: LossMode,
    ) -> Result<T> {
        let tape = self.record(x, plans)?;
        let logits = self.classifier.predict(&tape.expanded)?;
        residual_loss(&tape.expanded, &logits, w_aux, y, mode)
    }

    /// Runs one full session on `task`'s training data.
    pub fn session(
        &mut self,
        task: &TaskDataset,
        config: &TrainConfig,
        rng: &mut SeededRng,
        mut log: impl FnMut(&EpochLog),
    ) -> Result<SessionOutcome> {
        config.validate()?;
        let t = task.task_index;
        if t != self.sessions_completed + 1 {
            return Err(Error::SessionOrder {
                expected: self.sessions_completed + 1,
                found: t,
            });
        }
        let (x, labels) = task.train_matrix::<T>();
        if x.rows() == 0 {
            return Err(Error::EmptyInput("task has no training samples"));
        }
        let classifier_mean_path = !config.stochastic_classifier;

        // 1. classifier update under the previous session's noise
        let before = self.classifier.clone();
        let plans = self.plans(x.rows(), classifier_mean_path, rng)?;
        let tape = self.record(&x, plans)?;
        self.classifier
            .update_with_labels(&tape.expanded, &labels)?;

        let mut epochs = Vec::new();
        let mut drift = 0.0;
        if self.has_noise() {
            // 2. expand generators, 3. prototypes and omega
            let mut protos = Vec::with_capacity(self.layers.len());
            for (l, layer) in self.layers.iter_mut().enumerate() {
                // the fixed projections amplify generator output by about sqrt(d1 * d2)
                let gain = ((layer.d1() * layer.d2()) as f64).sqrt();
                let scale = T::of(config.gen_init_scale / gain);
                layer
                    .generators
                    .push(NoiseGenerator::random(layer.d2(), t, scale, rng));
                let p = layer.compute_prototype([&tape.trace.block_outputs[l]])?;
                layer.prototypes.push(p.clone());
                protos.push(p);
            }
            if self.spec.shared_omega {
                let joined: Vec<Vec<T>> = (0..t)
                    .map(|i| {
                        self.layers
                            .iter()
                            .flat_map(|l| l.prototypes[i].iter().copied())
                            .collect()
                    })
                    .collect();
                let omega = init_omega(&joined, t, T::of(config.tau))?;
                for layer in &mut self.layers {
                    layer.omega = omega.clone();
                }
            } else {
                for layer in &mut self.layers {
                    layer.omega = init_omega(&layer.prototypes, t, T::of(config.tau))?;
                }
            }
            drop(tape);

            // 4. auxiliary classifier, 5. gradient training
            let mut w_aux = Matrix::zeros(self.classifier.dim(), self.classifier.num_classes());
            let w_t = self.classifier.weights().clone();
            let y_all = self.classifier.one_hot(&labels)?;
            let mut velocity = vec![T::zero(); self.gather_trainable(&w_aux).len()];
            let mut order: Vec<usize> = (0..x.rows()).collect();
            for epoch in 0..config.epochs {
                let lr = cosine_lr(epoch, config.epochs, config.lr_init)?;
                rng.shuffle(&mut order);
                let mut total = 0.0;
                for batch in order.chunks(config.batch_size) {
                    let xb = x.select_rows(batch);
                    let yb = y_all.select_rows(batch);
                    let plans = self.plans(batch.len(), false, rng)?;
                    let (loss, grads) =
                        self.loss_and_gradients(&xb, &yb, &w_aux, plans, config.loss_mode)?;
                    if !loss.is_finite() {
                        return Err(Error::NonFinite(format!(
                            "loss in session {t} epoch {epoch}"
                        )));
                    }
                    total += loss.as_f64() * batch.len() as f64;
                    let mut g = grads.flatten(self);
                    if let Some(c) = config.clip {
                        clip_global_norm(&mut g, T::of(c));
                    }
                    let mut params = self.gather_trainable(&w_aux);
                    sgd_step(
                        &mut params,
                        &g,
                        &mut velocity,
                        T::of(lr),
                        T::of(config.momentum),
                    );
                    self.scatter_trainable(&mut w_aux, &params);
                }
                let entry = EpochLog {
                    session: t,
                    epoch,
                    lr,
                    mean_loss: total / x.rows() as f64,
                };
                log(&entry);
                epochs.push(entry);
            }
            drift = self.classifier.weights().sub(&w_t).max_abs().as_f64();

            // 6. refit the classifier with the trained noise
            self.classifier = before;
            let plans = self.plans(x.rows(), classifier_mean_path, rng)?;
            let z = self.features_with(&x, plans)?;
            self.classifier.update_with_labels(&z, &labels)?;

            // 7. freeze
            for layer in &mut self.layers {
                layer.freeze_all();
            }
        }
        self.sessions_completed = t;
        Ok(SessionOutcome {
            task_index: t,
            epochs,
            classifier_drift: drift,
        })
    }

    fn features_with(&self, x: &Matrix<T>, plans: Option<Vec<LayerPlan<T>>>) -> Result<Matrix<T>> {
        Ok(self.record(x, plans)?.expanded)
    }
}

impl<T: Real> Gradients<T> {
    /// Flat gradient in the layout of [`MinModel::trainable_layout`].
    pub fn flatten(&self, model: &MinModel<T>) -> Vec<T> {
        let mut out = Vec::new();
        for (layer, lg) in model.layers.iter().zip(&self.layers) {
            for (i, g) in layer
                .generators
                .iter()
                .enumerate()
                .filter(|(_, g)| !g.frozen)
            {
                match lg.generators.iter().find(|(k, _)| *k == i) {
                    Some((_, grad)) => out.extend(grad.flat()),
                    None => out.extend(std::iter::repeat_n(T::zero(), g.parameter_count())),
                }
            }
        }
        if model.learns_omega() {
            let per_layer = |l: usize| -> Vec<T> {
                self.layers[l]
                    .omega
                    .clone()
                    .unwrap_or_else(|| vec![T::zero(); model.layers[l].omega.len()])
            };
            if model.spec.shared_omega {
                let mut sum = vec![T::zero(); model.layers[0].omega.len()];
                for l in 0..model.layers.len() {
                    for (s, v) in sum.iter_mut().zip(per_layer(l)) {
                        *s = *s + v;
                    }
                }
                out.extend(sum);
            } else {
                for l in 0..model.layers.len() {
                    out.extend(per_layer(l));
                }
            }
        }
        out.extend_from_slice(self.w_aux.as_slice());
        out
    }
}
