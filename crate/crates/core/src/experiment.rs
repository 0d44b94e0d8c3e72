//! Orchestration: full runs with checkpoint/resume, ablations, sweeps and
//! multi-seed batches, plus the files each of them writes.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::config::RunConfig;
use crate::data::TaskStream;
use crate::error::{Error, Result};
use crate::eval::{
    emit, evaluate, evaluate_with, line_chart_svg, mean_std, summarize, RunSummary, Series,
    SessionReport,
};
use crate::pinoise::MixtureStrategy;
use crate::rng::SeededRng;
use crate::trainer::{EpochLog, MinModel};

const TRAIN_STREAM: u64 = 30;
const STOCHASTIC_EVAL_STREAM: u64 = 31;

/// Per-run knobs that are not part of the experiment definition.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Continue from this checkpoint instead of starting fresh.
    pub resume: Option<Checkpoint>,
    /// Stop after this many completed sessions (checkpoint still written).
    pub stop_after: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub summary: RunSummary,
    pub model: MinModel<f64>,
    pub stream_hash: String,
    pub train_log: Vec<EpochLog>,
    pub checkpoint: Checkpoint,
}

/// Runs sessions in order, evaluating after each one. Returns a summary of
/// the sessions completed so far (all of them unless `stop_after` is set).
pub fn run(cfg: &RunConfig, stream: &TaskStream, opts: RunOptions) -> Result<RunOutcome> {
    cfg.validate()?;
    let config_hash = cfg.hash();
    let stream_hash = stream.content_hash();
    if stream.num_tasks() != cfg.tasks {
        return Err(Error::Config(format!(
            "stream has {} tasks, config says {}",
            stream.num_tasks(),
            cfg.tasks
        )));
    }
    let mut model = MinModel::<f64>::new(cfg.model_spec(stream.dim))?;
    let train = cfg.train_config();

    let (mut rng, mut reports) = match &opts.resume {
        Some(ckpt) => {
            if ckpt.meta.config_hash != config_hash {
                return Err(Error::Checkpoint(
                    "checkpoint was written with a different config".into(),
                ));
            }
            if ckpt.meta.stream_hash != stream_hash {
                return Err(Error::Checkpoint(
                    "checkpoint was written for a different task stream".into(),
                ));
            }
            ckpt.restore_into(&mut model)?;
            (
                SeededRng::from_cursor(ckpt.meta.train_rng),
                ckpt.meta.reports.clone(),
            )
        }
        None => (
            SeededRng::with_stream(cfg.train_seed, TRAIN_STREAM),
            Vec::new(),
        ),
    };

    let last = opts.stop_after.unwrap_or(cfg.tasks).min(cfg.tasks);
    let mut train_log = Vec::new();
    for task in &stream.tasks[model.sessions_completed..last] {
        let outcome = model.session(task, &train, &mut rng, |e| train_log.push(*e))?;
        let mut report = if cfg.stochastic_eval {
            let mut eval_rng = SeededRng::with_stream(
                cfg.train_seed ^ task.task_index as u64,
                STOCHASTIC_EVAL_STREAM,
            );
            evaluate_with(&model, stream, task.task_index, false, &mut eval_rng)?
        } else {
            evaluate(&model, stream, task.task_index)?
        };
        report.epoch_losses = outcome.epochs.iter().map(|e| e.mean_loss).collect();
        reports.push(report);
    }

    let meta = CheckpointMeta {
        config_hash: config_hash.clone(),
        backbone_hash: model.backbone.content_hash(),
        buffer_hash: model.buffer.content_hash(),
        stream_hash: stream_hash.clone(),
        sessions_completed: model.sessions_completed,
        train_rng: rng.cursor(),
        reports: reports.clone(),
        config: cfg.to_toml(),
    };
    let checkpoint = Checkpoint::capture(&model, meta);
    let summary = summarize(reports, config_hash)?;
    Ok(RunOutcome {
        summary,
        model,
        stream_hash,
        train_log,
        checkpoint,
    })
}

pub fn train_log_csv(log: &[EpochLog]) -> String {
    let mut out = String::from("session,epoch,lr,mean_loss\n");
    for e in log {
        let _ = writeln!(
            out,
            "{},{},{:e},{:.10}",
            e.session, e.epoch, e.lr, e.mean_loss
        );
    }
    out
}

/// Writes the run's artifacts into `dir`: `accuracy.csv`, `summary.json`,
/// `accuracy.svg`, `train_log.csv`, `config.toml` and `checkpoint.bin`.
pub fn write_run(outcome: &RunOutcome, cfg: &RunConfig, dir: &Path) -> Result<()> {
    emit(&outcome.summary, dir)?;
    fs::write(dir.join("train_log.csv"), train_log_csv(&outcome.train_log))?;
    fs::write(
        dir.join("config.toml"),
        format!("# config hash {}\n{}", cfg.hash(), cfg.to_toml()),
    )?;
    outcome.checkpoint.save(&dir.join("checkpoint.bin"))?;
    Ok(())
}

/// Builds the stream and runs the config end to end.
pub fn run_config(cfg: &RunConfig, opts: RunOptions) -> Result<RunOutcome> {
    cfg.validate()?;
    let stream = cfg.build_stream()?;
    run(cfg, &stream, opts)
}

/// Named ablation variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    Baseline,
    NeAverage,
    NeMu,
    NeSigma,
    NeLast,
    NeRandom,
    Min,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Baseline,
        Variant::NeAverage,
        Variant::NeMu,
        Variant::NeSigma,
        Variant::NeLast,
        Variant::NeRandom,
        Variant::Min,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::NeAverage => "ne-avg",
            Variant::NeMu => "ne-mu",
            Variant::NeSigma => "ne-sigma",
            Variant::NeLast => "ne-last",
            Variant::NeRandom => "ne-random",
            Variant::Min => "min",
        }
    }

    pub fn apply(self, cfg: &RunConfig) -> RunConfig {
        let with = |strategy| RunConfig {
            use_pinoise: true,
            strategy,
            ..cfg.clone()
        };
        match self {
            Variant::Baseline => RunConfig {
                use_pinoise: false,
                ..cfg.clone()
            },
            Variant::NeAverage => with(MixtureStrategy::Average),
            Variant::NeMu => with(MixtureStrategy::MuOnly),
            Variant::NeSigma => with(MixtureStrategy::SigmaOnly),
            Variant::NeLast => with(MixtureStrategy::LastTask),
            Variant::NeRandom => with(MixtureStrategy::RandomTask),
            Variant::Min => with(MixtureStrategy::LearnedOmega),
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemberResult {
    pub label: String,
    pub seed: u64,
    pub average_accuracy: f64,
    pub last_accuracy: f64,
    pub stream_hash: String,
    pub accuracies: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub label: String,
    pub seeds: usize,
    pub mean_average: f64,
    pub std_average: f64,
    pub mean_last: f64,
    pub std_last: f64,
}

fn member(label: &str, cfg: &RunConfig) -> Result<MemberResult> {
    let out = run_config(cfg, RunOptions::default())?;
    Ok(MemberResult {
        label: label.to_string(),
        seed: cfg.class_order_seed,
        average_accuracy: out.summary.average_accuracy,
        last_accuracy: out.summary.last_accuracy,
        stream_hash: out.stream_hash,
        accuracies: out
            .summary
            .reports
            .iter()
            .map(|r| r.accuracy_seen)
            .collect(),
    })
}

/// Runs every `(label, config)` pair independently; order is preserved.
pub fn run_members(members: &[(String, RunConfig)]) -> Result<Vec<MemberResult>> {
    members
        .par_iter()
        .map(|(label, cfg)| member(label, cfg))
        .collect()
}

pub fn aggregate(results: &[MemberResult]) -> Vec<AggregateRow> {
    let mut labels: Vec<&str> = Vec::new();
    for r in results {
        if !labels.contains(&r.label.as_str()) {
            labels.push(&r.label);
        }
    }
    labels
        .into_iter()
        .map(|label| {
            let rows: Vec<&MemberResult> = results.iter().filter(|r| r.label == label).collect();
            let (mean_average, std_average) =
                mean_std(&rows.iter().map(|r| r.average_accuracy).collect::<Vec<_>>());
            let (mean_last, std_last) =
                mean_std(&rows.iter().map(|r| r.last_accuracy).collect::<Vec<_>>());
            AggregateRow {
                label: label.to_string(),
                seeds: rows.len(),
                mean_average,
                std_average,
                mean_last,
                std_last,
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationResult {
    pub members: Vec<MemberResult>,
    pub rows: Vec<AggregateRow>,
}

/// Every variant on the same streams. One seed per entry of `seeds`; the
/// seed sets the class order (and with it the synthetic data).
pub fn ablate(cfg: &RunConfig, variants: &[Variant], seeds: &[u64]) -> Result<AblationResult> {
    if variants.len() < 2 {
        return Err(Error::Config(
            "an ablation needs at least two variants".into(),
        ));
    }
    if seeds.is_empty() {
        return Err(Error::Config("an ablation needs at least one seed".into()));
    }
    let mut members = Vec::new();
    for &seed in seeds {
        for &v in variants {
            let c = RunConfig {
                class_order_seed: seed,
                ..v.apply(cfg)
            };
            c.validate()?;
            members.push((v.name().to_string(), c));
        }
    }
    let members = run_members(&members)?;
    for seed in seeds {
        let hashes: Vec<&str> = members
            .iter()
            .filter(|m| m.seed == *seed)
            .map(|m| m.stream_hash.as_str())
            .collect();
        if hashes.windows(2).any(|w| w[0] != w[1]) {
            return Err(Error::Data(format!(
                "variants saw different streams for seed {seed}"
            )));
        }
    }
    let rows = aggregate(&members);
    Ok(AblationResult { members, rows })
}

pub fn aggregate_csv(rows: &[AggregateRow], key: &str) -> String {
    let mut out = format!("{key},seeds,avg_acc_pct,avg_acc_std,last_acc_pct,last_acc_std\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{:.2},{:.2},{:.2},{:.2}",
            r.label,
            r.seeds,
            100.0 * r.mean_average,
            100.0 * r.std_average,
            100.0 * r.mean_last,
            100.0 * r.std_last
        );
    }
    out
}

pub fn members_csv(members: &[MemberResult], key: &str) -> String {
    let mut out = format!("{key},seed,avg_acc_pct,last_acc_pct,stream_hash\n");
    for m in members {
        let _ = writeln!(
            out,
            "{},{},{:.2},{:.2},{}",
            m.label,
            m.seed,
            100.0 * m.average_accuracy,
            100.0 * m.last_accuracy,
            m.stream_hash
        );
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepParam {
    Lambda,
    BufferSize,
    D2,
    Tau,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Lambda => "lambda",
            SweepParam::BufferSize => "buffer_size",
            SweepParam::D2 => "d2",
            SweepParam::Tau => "tau",
        }
    }

    pub fn apply(self, cfg: &RunConfig, value: f64) -> Result<RunConfig> {
        let whole = || -> Result<usize> {
            if value >= 1.0 && value.fract() == 0.0 {
                Ok(value as usize)
            } else {
                Err(Error::Config(format!(
                    "{} needs a positive integer, got {value}",
                    self.name()
                )))
            }
        };
        let c = match self {
            SweepParam::Lambda => RunConfig {
                lambda: value,
                ..cfg.clone()
            },
            SweepParam::BufferSize => RunConfig {
                buffer_size: whole()?,
                ..cfg.clone()
            },
            SweepParam::D2 => RunConfig {
                d2: whole()?,
                ..cfg.clone()
            },
            SweepParam::Tau => RunConfig {
                tau: value,
                ..cfg.clone()
            },
        };
        c.validate()?;
        Ok(c)
    }
}

impl std::str::FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lambda" => Ok(SweepParam::Lambda),
            "buffer_size" | "buffer" => Ok(SweepParam::BufferSize),
            "d2" => Ok(SweepParam::D2),
            "tau" => Ok(SweepParam::Tau),
            _ => Err(Error::Config(format!(
                "cannot sweep `{s}` (lambda, buffer_size, d2, tau)"
            ))),
        }
    }
}

/// Trainable generator parameters added per session: two affine `d2 x d2`
/// maps with biases in each of the `num_layers` layers.
pub fn trainable_params_per_session(cfg: &RunConfig) -> usize {
    if cfg.use_pinoise {
        cfg.num_layers * (2 * cfg.d2 * cfg.d2 + 2 * cfg.d2)
    } else {
        0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub value: f64,
    pub trainable_params: usize,
    pub average_accuracy: f64,
    pub last_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    pub param: SweepParam,
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    /// Largest minus smallest `A-bar`, in percentage points.
    pub fn average_spread_pct(&self) -> f64 {
        let it = self.rows.iter().map(|r| 100.0 * r.average_accuracy);
        let max = it.clone().fold(f64::NEG_INFINITY, f64::max);
        let min = it.fold(f64::INFINITY, f64::min);
        max - min
    }

    pub fn csv(&self) -> String {
        let mut out = format!(
            "{},trainable_params,avg_acc_pct,last_acc_pct\n",
            self.param.name()
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{:.2},{:.2}",
                r.value,
                r.trainable_params,
                100.0 * r.average_accuracy,
                100.0 * r.last_accuracy
            );
        }
        out
    }

    pub fn svg(&self, config_hash: &str) -> String {
        let points = self
            .rows
            .iter()
            .map(|r| (r.value, 100.0 * r.average_accuracy))
            .collect();
        line_chart_svg(
            &format!("Average accuracy vs {}", self.param.name()),
            self.param.name(),
            "average accuracy (%)",
            &[Series {
                label: "A-bar".into(),
                points,
            }],
            &format!("config {config_hash}"),
        )
    }
}

/// One full run per value on the same stream.
pub fn sweep(cfg: &RunConfig, param: SweepParam, values: &[f64]) -> Result<SweepResult> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let configs = values
        .iter()
        .map(|&v| Ok((format!("{v}"), param.apply(cfg, v)?)))
        .collect::<Result<Vec<_>>>()?;
    let members = run_members(&configs)?;
    let rows = values
        .iter()
        .zip(&members)
        .zip(&configs)
        .map(|((&value, m), (_, c))| SweepRow {
            value,
            trainable_params: trainable_params_per_session(c),
            average_accuracy: m.average_accuracy,
            last_accuracy: m.last_accuracy,
        })
        .collect();
    Ok(SweepResult { param, rows })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub config_hash: String,
    pub stream_hash: String,
    pub backbone_hash: String,
    pub buffer_hash: String,
    pub projection_hash: String,
    /// Learned state, present when a checkpoint was supplied.
    pub state_hash: Option<String>,
    pub sessions_completed: usize,
}

/// Content hashes of every frozen and learned component.
pub fn snapshot(cfg: &RunConfig, checkpoint: Option<&Checkpoint>) -> Result<Snapshot> {
    cfg.validate()?;
    let stream = cfg.build_stream()?;
    let mut model = MinModel::<f64>::new(cfg.model_spec(stream.dim))?;
    let mut state_hash = None;
    if let Some(c) = checkpoint {
        c.restore_into(&mut model)?;
        state_hash = Some(model_state_hash(&model));
    }
    let mut h = Sha256::new();
    for l in &model.layers {
        crate::backbone::hash_matrix(&mut h, l.w_down());
        crate::backbone::hash_matrix(&mut h, l.w_up());
    }
    Ok(Snapshot {
        config_hash: cfg.hash(),
        stream_hash: stream.content_hash(),
        backbone_hash: model.backbone.content_hash(),
        buffer_hash: model.buffer.content_hash(),
        projection_hash: crate::data::hex(&h.finalize()),
        state_hash,
        sessions_completed: model.sessions_completed,
    })
}

/// SHA-256 over everything that can change during a run: generators,
/// prototypes, mixture weights and the classifier.
pub fn model_state_hash(model: &MinModel<f64>) -> String {
    let mut h = Sha256::new();
    for l in &model.layers {
        for g in &l.generators {
            for v in g.flat_params() {
                h.update(v.to_le_bytes());
            }
            h.update([g.frozen as u8]);
        }
        for p in &l.prototypes {
            for v in p {
                h.update(v.to_le_bytes());
            }
        }
        for v in &l.omega {
            h.update(v.to_le_bytes());
        }
    }
    crate::backbone::hash_matrix(&mut h, model.classifier.weights());
    crate::backbone::hash_matrix(&mut h, model.classifier.autocorr_inv());
    for c in model.classifier.classes() {
        h.update((*c as u64).to_le_bytes());
    }
    h.update((model.sessions_completed as u64).to_le_bytes());
    crate::data::hex(&h.finalize())
}

/// Reports for the sessions of a summary as `(t, A_t in %)`.
pub fn accuracy_series(label: &str, reports: &[SessionReport]) -> Series {
    Series {
        label: label.into(),
        points: reports
            .iter()
            .map(|r| (r.task_index as f64, 100.0 * r.accuracy_seen))
            .collect(),
    }
}
