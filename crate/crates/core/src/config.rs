//! Flat key-value run configuration.
//!
//! Files are TOML with one level of `key = value` pairs; unknown keys are
//! rejected. `--set key=value` overrides are applied on top of the file, and
//! a named profile (`desk`, `paper-dims`) supplies the starting values.
//!
//! | key | default | range |
//! |---|---|---|
//! | `source` | `"synthetic"` | `synthetic`, `embeddings` |
//! | `embedding_path` | `""` | CSV with a `label` column first |
//! | `num_classes` | 20 | >= tasks |
//! | `samples_per_class` | 50 | >= 5 |
//! | `dim` | 32 | >= 2 (raw input width) |
//! | `separation` | 6.0 | >= 0 |
//! | `overlap_classes` | 0 | 2 * k <= num_classes |
//! | `tasks` | 5 | >= 1 |
//! | `class_order_seed` | 1993 | |
//! | `num_layers` | 4 | 1..=16 |
//! | `d1` | 64 | >= 1 |
//! | `gain` | 0.5 | finite |
//! | `buffer_size` | 2048 | >= d1 |
//! | `use_pinoise` | true | |
//! | `d2` | 16 | >= 1 |
//! | `tau` | 2.0 | > 0 |
//! | `strategy` | `"learned-omega"` | see `MixtureStrategy` |
//! | `shared_omega` | false | |
//! | `stochastic_eval` | false | |
//! | `stochastic_classifier` | false | |
//! | `lambda` | 100.0 | > 0 |
//! | `epochs` | 10 | >= 0 |
//! | `batch_size` | 128 | >= 1 |
//! | `lr_init` | 0.001 | > 0 |
//! | `momentum` | 0.9 | [0, 1) |
//! | `loss_mode` | `"residual-corrected-ce"` | or `residual-mse` |
//! | `clip` | 1.0 | > 0, or 0 to disable |
//! | `gen_init_scale` | 0.01 | >= 0, session-start noise relative to the features |
//! | `train_seed` | 0 | |
//! | `backbone_seed` | 42 | |
//! | `output_dir` | `"runs/default"` | relative paths resolve under `$MIXNOISE_OUT` |

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{load_embedding_stream, make_synthetic_stream, SyntheticSpec, TaskStream};
use crate::error::{Error, Result};
use crate::pinoise::MixtureStrategy;
use crate::trainer::{LossMode, ModelSpec, TrainConfig};

pub const OUTPUT_ROOT_ENV: &str = "MIXNOISE_OUT";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    Synthetic,
    Embeddings,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub source: DataSource,
    pub embedding_path: String,
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub dim: usize,
    pub separation: f64,
    pub overlap_classes: usize,
    pub tasks: usize,
    pub class_order_seed: u64,

    pub num_layers: usize,
    pub d1: usize,
    pub gain: f64,
    pub buffer_size: usize,

    pub use_pinoise: bool,
    pub d2: usize,
    pub tau: f64,
    pub strategy: MixtureStrategy,
    pub shared_omega: bool,
    pub stochastic_eval: bool,
    pub stochastic_classifier: bool,

    pub lambda: f64,

    pub epochs: usize,
    pub batch_size: usize,
    pub lr_init: f64,
    pub momentum: f64,
    pub loss_mode: LossMode,
    pub clip: f64,
    pub gen_init_scale: f64,

    pub train_seed: u64,
    pub backbone_seed: u64,
    pub output_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            embedding_path: String::new(),
            num_classes: 20,
            samples_per_class: 50,
            dim: 32,
            separation: 6.0,
            overlap_classes: 0,
            tasks: 5,
            class_order_seed: 1993,
            num_layers: 4,
            d1: 64,
            gain: 0.5,
            buffer_size: 2048,
            use_pinoise: true,
            d2: 16,
            tau: 2.0,
            strategy: MixtureStrategy::LearnedOmega,
            shared_omega: false,
            stochastic_eval: false,
            stochastic_classifier: false,
            lambda: 100.0,
            epochs: 10,
            batch_size: 128,
            lr_init: 0.001,
            momentum: 0.9,
            loss_mode: LossMode::ResidualCorrectedCe,
            clip: 1.0,
            gen_init_scale: 0.01,
            train_seed: 0,
            backbone_seed: 42,
            output_dir: "runs/default".into(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    Desk,
    PaperDims,
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper-dims" => Ok(Profile::PaperDims),
            _ => Err(Error::Config(format!(
                "unknown profile `{s}` (desk, paper-dims)"
            ))),
        }
    }
}

impl RunConfig {
    pub fn profile(p: Profile) -> Self {
        match p {
            Profile::Desk => Self::default(),
            Profile::PaperDims => Self {
                d2: 192,
                buffer_size: 16384,
                ..Self::default()
            },
        }
    }

    /// Parses a config document; missing keys take the profile's values.
    pub fn from_toml_str(text: &str, base: Profile) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        Self::from_table(table, base)
    }

    pub fn load(path: &Path, base: Profile) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text, base)
    }

    fn from_table(table: toml::Table, base: Profile) -> Result<Self> {
        let mut merged = Self::profile(base).to_table();
        for (k, v) in table {
            if v.is_table() || v.is_array() {
                return Err(Error::Config(format!(
                    "`{k}` must be a plain value; the config is flat"
                )));
            }
            merged.insert(k, v);
        }
        let cfg: Self = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        Ok(cfg)
    }

    fn to_table(&self) -> toml::Table {
        match toml::Value::try_from(self) {
            Ok(toml::Value::Table(t)) => t,
            _ => unreachable!("config serializes to a table"),
        }
    }

    /// Applies `key=value` overrides. Values are read as TOML literals,
    /// falling back to a bare string.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut table = self.to_table();
        for item in overrides {
            let item = item.as_ref();
            let (k, v) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{item}` is not key=value")))?;
            let k = k.trim();
            let v = v.trim();
            if !table.contains_key(k) {
                return Err(Error::Config(format!("unknown key `{k}`")));
            }
            let value = format!("x = {v}")
                .parse::<toml::Table>()
                .ok()
                .and_then(|mut t| t.remove("x"))
                .unwrap_or_else(|| toml::Value::String(v.to_string()));
            table.insert(k.to_string(), value);
        }
        let cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.tasks == 0 {
            return bad("tasks must be at least 1".into());
        }
        if self.source == DataSource::Synthetic {
            if self.tasks > self.num_classes {
                return bad(format!(
                    "tasks ({}) exceeds num_classes ({})",
                    self.tasks, self.num_classes
                ));
            }
            if self.samples_per_class < 5 {
                return bad(format!(
                    "samples_per_class must be >= 5, got {}",
                    self.samples_per_class
                ));
            }
            if self.dim < 2 {
                return bad(format!("dim must be >= 2, got {}", self.dim));
            }
            if !(self.separation >= 0.0 && self.separation.is_finite()) {
                return bad(format!(
                    "separation must be a non-negative number, got {}",
                    self.separation
                ));
            }
            if 2 * self.overlap_classes > self.num_classes {
                return bad(format!(
                    "overlap_classes {} needs at least {} classes",
                    self.overlap_classes,
                    2 * self.overlap_classes
                ));
            }
        } else if self.embedding_path.is_empty() {
            return bad("embedding_path is required for source = \"embeddings\"".into());
        }
        if !(1..=16).contains(&self.num_layers) {
            return bad(format!(
                "num_layers must be in 1..=16, got {}",
                self.num_layers
            ));
        }
        if self.d1 == 0 || self.d2 == 0 {
            return bad("d1 and d2 must be positive".into());
        }
        if !self.gain.is_finite() {
            return bad("gain must be finite".into());
        }
        if self.buffer_size < self.d1 {
            return bad(format!(
                "buffer_size ({}) must be >= d1 ({})",
                self.buffer_size, self.d1
            ));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be positive, got {}", self.lambda));
        }
        if !(self.clip >= 0.0) {
            return bad(format!("clip must be >= 0 (0 disables), got {}", self.clip));
        }
        self.train_config()
            .validate()
            .map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 of the resolved config with `output_dir` blanked, so the same
    /// experiment written to two places hashes the same.
    pub fn hash(&self) -> String {
        let canonical = Self {
            output_dir: String::new(),
            ..self.clone()
        }
        .to_toml();
        crate::data::hex(&Sha256::digest(canonical.as_bytes()))
    }

    pub fn model_spec(&self, d_raw: usize) -> ModelSpec {
        ModelSpec {
            d_raw,
            d1: self.d1,
            num_layers: self.num_layers,
            gain: self.gain,
            buffer_size: self.buffer_size,
            d2: self.d2,
            lambda: self.lambda,
            use_pinoise: self.use_pinoise,
            strategy: self.strategy,
            shared_omega: self.shared_omega,
            backbone_seed: self.backbone_seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr_init: self.lr_init,
            momentum: self.momentum,
            tau: self.tau,
            loss_mode: self.loss_mode,
            clip: (self.clip > 0.0).then_some(self.clip),
            gen_init_scale: self.gen_init_scale,
            stochastic_classifier: self.stochastic_classifier,
        }
    }

    pub fn build_stream(&self) -> Result<TaskStream> {
        match self.source {
            DataSource::Synthetic => make_synthetic_stream(&SyntheticSpec {
                num_classes: self.num_classes,
                samples_per_class: self.samples_per_class,
                dim: self.dim,
                separation: self.separation,
                overlap_classes: self.overlap_classes,
                tasks: self.tasks,
                seed: self.class_order_seed,
            }),
            DataSource::Embeddings => load_embedding_stream(
                Path::new(&self.embedding_path),
                self.tasks,
                self.class_order_seed,
            ),
        }
    }

    /// `output_dir`, placed under `$MIXNOISE_OUT` when relative and the
    /// variable is set.
    pub fn resolved_output_dir(&self) -> PathBuf {
        let dir = PathBuf::from(&self.output_dir);
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) if dir.is_relative() => PathBuf::from(root).join(dir),
            _ => dir,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
        RunConfig::profile(Profile::PaperDims).validate().unwrap();
    }

    #[test]
    fn round_trip_through_toml() {
        let cfg = RunConfig {
            tau: 1.5,
            strategy: MixtureStrategy::MuOnly,
            ..Default::default()
        };
        let back = RunConfig::from_toml_str(&cfg.to_toml(), Profile::Desk).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_file_keeps_profile_values() {
        let cfg =
            RunConfig::from_toml_str("epochs = 3\nlambda = 10.0\n", Profile::PaperDims).unwrap();
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.lambda, 10.0);
        assert_eq!(cfg.d2, 192);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_toml_str("epochz = 3\n", Profile::Desk).is_err());
        assert!(RunConfig::default().with_overrides(&["nope=1"]).is_err());
        assert!(RunConfig::from_toml_str("[section]\nepochs = 3\n", Profile::Desk).is_err());
    }

    #[test]
    fn overrides() {
        let cfg = RunConfig::default()
            .with_overrides(&[
                "tau=0.5",
                "strategy=average",
                "use_pinoise=false",
                "lambda = 10",
            ])
            .unwrap();
        assert_eq!(cfg.tau, 0.5);
        assert_eq!(cfg.strategy, MixtureStrategy::Average);
        assert!(!cfg.use_pinoise);
        assert!(RunConfig::default().with_overrides(&["tau"]).is_err());
        assert!(RunConfig::default()
            .with_overrides(&["strategy=bogus"])
            .is_err());
    }

    #[test]
    fn validation_names_the_problem() {
        let err = RunConfig {
            tau: 0.0,
            ..Default::default()
        }
        .validate()
        .unwrap_err();
        assert!(err.to_string().contains("tau"), "{err}");
        assert!(RunConfig {
            buffer_size: 8,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(RunConfig {
            momentum: 1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(RunConfig {
            tasks: 30,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn hash_ignores_output_dir_only() {
        let a = RunConfig::default();
        let b = RunConfig {
            output_dir: "elsewhere".into(),
            ..Default::default()
        };
        let c = RunConfig {
            lambda: 50.0,
            ..Default::default()
        };
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
