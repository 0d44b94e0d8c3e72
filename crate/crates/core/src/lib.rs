//! Exemplar-free class-incremental learning with a frozen random backbone,
//! learned per-task feature noise ("Pi-Noise") mixed across tasks, and a
//! recursively updated closed-form ridge classifier.
//!
//! The numeric core is generic over [`Real`] (`f32` or `f64`); experiment
//! orchestration, checkpoints and reports work in `f64`.

pub mod backbone;
pub mod checkpoint;
pub mod classifier;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod linalg;
pub mod matrix;
pub mod numeric;
pub mod pinoise;
pub mod rng;
pub mod scalar;
pub mod trainer;

pub use classifier::AnalyticClassifier;
pub use error::{Error, Result};
pub use matrix::Matrix;
pub use pinoise::MixtureStrategy;
pub use rng::SeededRng;
pub use scalar::Real;
pub use trainer::{MinModel, ModelSpec, TrainConfig};

pub type Matrix64 = Matrix<f64>;
pub type Matrix32 = Matrix<f32>;
pub type Model64 = MinModel<f64>;
pub type Model32 = MinModel<f32>;
pub type Classifier64 = AnalyticClassifier<f64>;
pub type Classifier32 = AnalyticClassifier<f32>;
