//! Analytic-versus-finite-difference gradient comparison on a small model.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::numeric::finite_difference_gradient;
use crate::pinoise::{MixtureStrategy, NoiseGenerator};
use crate::rng::{sample_standard_normal, SeededRng};
use crate::trainer::{LossMode, MinModel, ModelSpec, ParamGroup};

pub const REL_TOLERANCE: f64 = 1e-4;
pub const ABS_TOLERANCE: f64 = 1e-7;
const FD_STEP: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckSetup {
    pub d_raw: usize,
    pub d1: usize,
    pub d2: usize,
    pub num_layers: usize,
    pub batch: usize,
    /// Generators per layer; all but the last are frozen.
    pub tasks: usize,
    pub buffer_size: usize,
    pub strategy: MixtureStrategy,
    pub shared_omega: bool,
    pub loss_mode: LossMode,
    pub seed: u64,
    /// Test hook: perturb the first analytic coordinate of this group.
    pub corrupt: Option<ParamGroup>,
}

impl Default for GradcheckSetup {
    fn default() -> Self {
        Self {
            d_raw: 5,
            d1: 8,
            d2: 4,
            num_layers: 2,
            batch: 3,
            tasks: 2,
            buffer_size: 16,
            strategy: MixtureStrategy::LearnedOmega,
            shared_omega: false,
            loss_mode: LossMode::ResidualCorrectedCe,
            seed: 7,
            corrupt: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupError {
    pub coordinates: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Coordinates outside both tolerances.
    pub failures: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub groups: BTreeMap<String, GroupError>,
    pub loss: f64,
    pub passed: bool,
}

impl GradcheckReport {
    pub fn render(&self) -> String {
        let mut out = String::from("group,coordinates,max_rel_error,max_abs_error,failures\n");
        for (name, g) in &self.groups {
            out.push_str(&format!(
                "{name},{},{:.3e},{:.3e},{}\n",
                g.coordinates, g.max_rel_error, g.max_abs_error, g.failures
            ));
        }
        out.push_str(if self.passed { "PASS\n" } else { "FAIL\n" });
        out
    }
}

/// Builds the instance, computes both gradients and compares them.
pub fn gradcheck(setup: &GradcheckSetup) -> Result<GradcheckReport> {
    if setup.d1 > 16 || setup.d2 > 8 || setup.num_layers > 2 {
        return Err(Error::InvalidParameter(format!(
            "gradcheck needs d1 <= 16, d2 <= 8, L <= 2; got d1={} d2={} L={}",
            setup.d1, setup.d2, setup.num_layers
        )));
    }
    if setup.tasks == 0 || setup.batch == 0 {
        return Err(Error::InvalidParameter(
            "gradcheck needs tasks >= 1 and batch >= 1".into(),
        ));
    }
    let spec = ModelSpec {
        d_raw: setup.d_raw,
        d1: setup.d1,
        num_layers: setup.num_layers,
        gain: 0.5,
        buffer_size: setup.buffer_size,
        d2: setup.d2,
        lambda: 1.0,
        use_pinoise: true,
        strategy: setup.strategy,
        shared_omega: setup.shared_omega,
        backbone_seed: setup.seed,
    };
    let mut model = MinModel::<f64>::new(spec)?;
    let mut rng = SeededRng::with_stream(setup.seed, 20);
    let classes = 3;

    let x: Matrix<f64> = sample_standard_normal(&mut rng, setup.batch, setup.d_raw);
    let labels: Vec<usize> = (0..setup.batch).map(|i| i % classes).collect();
    let z0 = model.features(&x, true, &mut rng)?;
    let fit_labels: Vec<usize> = (0..classes).collect();
    let fit_rows: Vec<usize> = (0..classes).map(|i| i % setup.batch).collect();
    model
        .classifier
        .update_with_labels(&z0.select_rows(&fit_rows), &fit_labels)?;

    for layer in &mut model.layers {
        for t in 1..=setup.tasks {
            let mut g = NoiseGenerator::random(setup.d2, t, 0.5, &mut rng);
            g.frozen = t < setup.tasks;
            layer.generators.push(g);
            layer
                .prototypes
                .push((0..setup.d2).map(|_| rng.standard_normal()).collect());
        }
        let raw: Vec<f64> = (0..setup.tasks).map(|_| rng.uniform() + 0.1).collect();
        let total: f64 = raw.iter().sum();
        layer.omega = raw.into_iter().map(|v| v / total).collect();
    }
    if setup.shared_omega {
        let shared = model.layers[0].omega.clone();
        for layer in &mut model.layers {
            layer.omega = shared.clone();
        }
    }

    let y = model.classifier.one_hot(&labels)?;
    let w_aux: Matrix<f64> =
        sample_standard_normal(&mut rng, setup.buffer_size, classes).scale(0.1);
    let plans = model.plans(setup.batch, false, &mut rng)?;

    let (loss, grads) = model.loss_and_gradients(&x, &y, &w_aux, plans.clone(), setup.loss_mode)?;
    let mut analytic = grads.flatten(&model);
    let layout = model.trainable_layout(&w_aux);
    if let Some(group) = setup.corrupt {
        if let Some(i) = layout.iter().position(|&g| g == group) {
            analytic[i] += 1e-2 * (1.0 + analytic[i].abs());
        }
    }

    // The classifier logits enter the loss detached, so the oracle holds
    // them at their base-point value.
    let frozen_logits = model
        .classifier
        .predict(&model.record(&x, plans.clone())?.expanded)?;
    let theta = model.gather_trainable(&w_aux);
    let mut probe = model.clone();
    let mut probe_aux = w_aux.clone();
    let mut failure = None;
    let numeric = finite_difference_gradient(
        |p: &[f64]| {
            probe.scatter_trainable(&mut probe_aux, p);
            match probe.loss_with_logits(
                &x,
                &y,
                &frozen_logits,
                &probe_aux,
                plans.clone(),
                setup.loss_mode,
            ) {
                Ok(v) => v,
                Err(e) => {
                    failure.get_or_insert(e);
                    f64::NAN
                }
            }
        },
        &theta,
        FD_STEP,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    let numeric = numeric?;

    let mut groups: BTreeMap<String, GroupError> = BTreeMap::new();
    for ((&group, &a), &n) in layout.iter().zip(&analytic).zip(&numeric) {
        let abs = (a - n).abs();
        let scale = a.abs().max(n.abs());
        let rel = if scale > 0.0 { abs / scale } else { 0.0 };
        let entry = groups
            .entry(group.name().to_string())
            .or_insert(GroupError {
                coordinates: 0,
                max_rel_error: 0.0,
                max_abs_error: 0.0,
                failures: 0,
            });
        entry.coordinates += 1;
        entry.max_abs_error = entry.max_abs_error.max(abs);
        if abs > ABS_TOLERANCE {
            entry.max_rel_error = entry.max_rel_error.max(rel);
            if rel >= REL_TOLERANCE {
                entry.failures += 1;
            }
        }
    }
    let passed = groups.values().all(|g| g.failures == 0);
    Ok(GradcheckReport {
        groups,
        loss,
        passed,
    })
}
