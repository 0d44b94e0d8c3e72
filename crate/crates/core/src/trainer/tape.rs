//! Residual loss and reverse-mode gradients for one recorded forward pass.
//!
//! Gradients reach only the trainable set of a session: the newest
//! generator of every layer, the mixture weights and the auxiliary
//! classifier. The backbone, the projections, older generators and the
//! analytic classifier are constants here.

use serde::{Deserialize, Serialize};

use crate::backbone::ForwardTrace;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::pinoise::{GeneratorGrad, LayerPlan};
use crate::scalar::Real;
use crate::trainer::MinModel;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossMode {
    /// Cross-entropy of `Z W_aux + stop_grad(Z W_t)` against the labels.
    ResidualCorrectedCe,
    /// `||Z W_aux - (Y - stop_grad(Z W_t))||^2 / n`.
    ResidualMse,
}

impl LossMode {
    pub fn name(self) -> &'static str {
        match self {
            LossMode::ResidualCorrectedCe => "residual-corrected-ce",
            LossMode::ResidualMse => "residual-mse",
        }
    }
}

impl std::str::FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "residual-corrected-ce" => Ok(LossMode::ResidualCorrectedCe),
            "residual-mse" => Ok(LossMode::ResidualMse),
            _ => Err(Error::InvalidParameter(format!("unknown loss mode `{s}`"))),
        }
    }
}

/// Loss value and its gradients w.r.t. the features and `W_aux`.
pub struct LossGrad<T> {
    pub loss: T,
    pub d_features: Matrix<T>,
    pub d_w_aux: Matrix<T>,
}

/// Scalar residual loss. `classifier_logits` is `Z W_t`, treated as a constant.
pub fn residual_loss<T: Real>(
    z: &Matrix<T>,
    classifier_logits: &Matrix<T>,
    w_aux: &Matrix<T>,
    y: &Matrix<T>,
    mode: LossMode,
) -> Result<T> {
    Ok(residual_loss_grad(z, classifier_logits, w_aux, y, mode)?.loss)
}

pub fn residual_loss_grad<T: Real>(
    z: &Matrix<T>,
    classifier_logits: &Matrix<T>,
    w_aux: &Matrix<T>,
    y: &Matrix<T>,
    mode: LossMode,
) -> Result<LossGrad<T>> {
    let n = z.rows();
    if n == 0 {
        return Err(Error::EmptyInput("loss over an empty batch"));
    }
    if z.cols() != w_aux.rows()
        || y.shape() != (n, w_aux.cols())
        || classifier_logits.shape() != y.shape()
    {
        return Err(Error::DimensionMismatch(format!(
            "Z {:?}, W_aux {:?}, Y {:?}, Z W_t {:?}",
            z.shape(),
            w_aux.shape(),
            y.shape(),
            classifier_logits.shape()
        )));
    }
    let inv_n = T::one() / T::of(n as f64);
    let aux_logits = z.matmul(w_aux);
    let (loss, d_logits) = match mode {
        LossMode::ResidualCorrectedCe => {
            let logits = aux_logits.add(classifier_logits);
            if !logits.is_finite() {
                return Err(Error::NonFinite("logits".into()));
            }
            let mut d = Matrix::zeros(n, y.cols());
            let mut loss = T::zero();
            for i in 0..n {
                let row = logits.row(i);
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
                let log_z = max + sum.ln();
                for (j, &v) in row.iter().enumerate() {
                    let p = (v - log_z).exp();
                    let target = y[(i, j)];
                    loss = loss - target * (v - log_z);
                    d[(i, j)] = (p - target) * inv_n;
                }
            }
            (loss * inv_n, d)
        }
        LossMode::ResidualMse => {
            // E = Z W_aux - (Y - Z W_t)
            let mut e = aux_logits;
            e.axpy(-T::one(), y);
            e.add_assign(classifier_logits);
            if !e.is_finite() {
                return Err(Error::NonFinite("residual".into()));
            }
            let loss = e.as_slice().iter().map(|&v| v * v).sum::<T>() * inv_n;
            (loss, e.scale(T::of(2.0) * inv_n))
        }
    };
    Ok(LossGrad {
        loss,
        d_features: d_logits.matmul_t(w_aux),
        d_w_aux: z.t_matmul(&d_logits),
    })
}

/// A recorded forward pass: everything the backward sweep reads.
#[derive(Clone, Debug)]
pub struct GradientTape<T> {
    pub trace: ForwardTrace<T>,
    pub plans: Option<Vec<LayerPlan<T>>>,
    pub expanded: Matrix<T>,
}

/// Per-layer gradients of the trainable generator(s) and mixture weights.
#[derive(Clone, Debug)]
pub struct LayerGradients<T> {
    pub generators: Vec<(usize, GeneratorGrad<T>)>,
    pub omega: Option<Vec<T>>,
}

#[derive(Clone, Debug)]
pub struct Gradients<T> {
    pub layers: Vec<LayerGradients<T>>,
    pub w_aux: Matrix<T>,
}

impl<T: Real> GradientTape<T> {
    /// Backpropagates a loss gradient through the buffer expansion, the
    /// blocks and the Pi-Noise layers.
    pub fn backward(&self, model: &MinModel<T>, loss: &LossGrad<T>) -> Result<Gradients<T>> {
        if loss.d_features.shape() != self.expanded.shape() {
            return Err(Error::DimensionMismatch(format!(
                "loss gradient {:?} for a tape with features {:?}",
                loss.d_features.shape(),
                self.expanded.shape()
            )));
        }
        let blocks = model.backbone.blocks();
        let mut grad = model.buffer.backward(&self.expanded, &loss.d_features);
        let mut layers = vec![
            LayerGradients {
                generators: Vec::new(),
                omega: None
            };
            blocks.len()
        ];
        for l in (0..blocks.len()).rev() {
            if let (Some(plans), Some(trace)) = (&self.plans, &self.trace.noise[l]) {
                let lg = model.layers[l].backward(trace, &plans[l], &grad);
                layers[l] = LayerGradients {
                    generators: lg.generators,
                    omega: lg.omega,
                };
                grad = lg.input;
            }
            grad = blocks[l].backward(&self.trace.activations[l], &grad);
        }
        Ok(Gradients {
            layers,
            w_aux: loss.d_w_aux.clone(),
        })
    }
}
