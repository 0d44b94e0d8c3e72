//! `mixnoise` command-line interface.
//!
//! Exit codes: 0 success, 1 invalid input (config, data, usage, I/O),
//! 2 numerical breakdown (non-finite values, failed factorizations, or a
//! failed gradient check).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mixnoise::checkpoint::Checkpoint;
use mixnoise::config::{Profile, RunConfig};
use mixnoise::eval::{evaluate, line_chart_svg, Series};
use mixnoise::experiment::{
    ablate, aggregate_csv, members_csv, run_config, snapshot, sweep, write_run, RunOptions,
    SweepParam, Variant,
};
use mixnoise::trainer::{gradcheck, GradcheckSetup, LossMode, ParamGroup};
use mixnoise::{Error, MinModel, MixtureStrategy};

#[derive(Parser, Debug)]
#[command(
    name = "mixnoise",
    version,
    about = "Class-incremental learning with mixed learned feature noise"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct ConfigArgs {
    /// Flat TOML config file.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Starting values: `desk` or `paper-dims`.
    #[arg(long, default_value = "desk")]
    profile: String,
    /// Override a config key, e.g. `--set tau=1.5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory (same as `--set output_dir=...`).
    #[arg(long)]
    out: Option<String>,
    /// Print the fully resolved config and exit.
    #[arg(long)]
    print_config: bool,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig, Error> {
        let profile: Profile = self.profile.parse()?;
        let base = match &self.config {
            Some(p) => RunConfig::load(p, profile)?,
            None => RunConfig::profile(profile),
        };
        let mut cfg = base.with_overrides(&self.overrides)?;
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run every session, evaluating after each; writes CSV/JSON/SVG,
    /// the training log and a checkpoint.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Continue from a checkpoint written by an earlier `train`.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many sessions.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Evaluate a checkpoint on all classes it has seen.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        /// Defaults to `<output_dir>/checkpoint.bin`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Compare noise variants on identical streams.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Comma-separated subset of baseline, ne-avg, ne-mu, ne-sigma,
        /// ne-last, ne-random, min.
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
        /// Class-order seeds; defaults to the config's seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Use this many consecutive seeds starting at the config's seed.
        #[arg(long, conflicts_with = "seeds")]
        num_seeds: Option<u64>,
    },
    /// One run per value of a single hyperparameter.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        /// lambda, buffer_size, d2 or tau.
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// Compare analytic gradients with finite differences on a small model.
    Gradcheck {
        #[arg(long, default_value_t = 8)]
        d1: usize,
        #[arg(long, default_value_t = 4)]
        d2: usize,
        #[arg(long, default_value_t = 2)]
        layers: usize,
        #[arg(long, default_value_t = 3)]
        batch: usize,
        #[arg(long, default_value_t = 2)]
        tasks: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value = "learned-omega")]
        strategy: String,
        #[arg(long, default_value = "residual-corrected-ce")]
        loss_mode: String,
        #[arg(long)]
        shared_omega: bool,
        /// Negative control: perturb one gradient group (phi_mu, phi_sigma,
        /// omega, w_aux).
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
    /// Print content hashes of the config, stream and model components.
    Snapshot {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

enum Failure {
    Invalid(String),
    Numerical(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_numerical() {
            Failure::Numerical(e.to_string())
        } else {
            Failure::Invalid(e.to_string())
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Invalid(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Numerical(msg)) => {
            eprintln!("numerical failure: {msg}");
            ExitCode::from(2)
        }
    }
}

/// Handles `--print-config`; true when the command should stop there.
fn print_config(args: &ConfigArgs, cfg: &RunConfig) -> bool {
    if args.print_config {
        print!("# config hash {}\n{}", cfg.hash(), cfg.to_toml());
    }
    args.print_config
}

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    if let Some(p) = path.parent() {
        std::fs::create_dir_all(p)?;
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn dispatch(command: Command) -> Result<(), Failure> {
    match command {
        Command::Train {
            config,
            resume,
            stop_after,
        } => {
            let cfg = config.resolve()?;
            if print_config(&config, &cfg) {
                return Ok(());
            }
            let resume = resume.map(|p| Checkpoint::load(&p)).transpose()?;
            let out = run_config(&cfg, RunOptions { resume, stop_after })?;
            let dir = cfg.resolved_output_dir();
            write_run(&out, &cfg, &dir)?;
            for r in &out.summary.reports {
                println!(
                    "session {}: A_t = {:.2}% ({} test samples)",
                    r.task_index,
                    100.0 * r.accuracy_seen,
                    r.sample_count
                );
            }
            println!(
                "average accuracy {:.2}%, last accuracy {:.2}%",
                100.0 * out.summary.average_accuracy,
                100.0 * out.summary.last_accuracy
            );
            println!("config {}", out.summary.config_hash);
            println!("wrote {}", dir.display());
        }
        Command::Eval { config, checkpoint } => {
            let cfg = config.resolve()?;
            if print_config(&config, &cfg) {
                return Ok(());
            }
            let path =
                checkpoint.unwrap_or_else(|| cfg.resolved_output_dir().join("checkpoint.bin"));
            let ckpt = Checkpoint::load(&path)?;
            if ckpt.meta.config_hash != cfg.hash() {
                return Err(Failure::Invalid(
                    "checkpoint was written with a different config".into(),
                ));
            }
            let stream = cfg.build_stream()?;
            let mut model = MinModel::<f64>::new(cfg.model_spec(stream.dim))?;
            ckpt.restore_into(&mut model)?;
            let t = model.sessions_completed;
            if t == 0 {
                return Err(Failure::Invalid(
                    "checkpoint has no completed sessions".into(),
                ));
            }
            let report = evaluate(&model, &stream, t)?;
            println!(
                "after session {t}: accuracy {:.2}% over {} samples",
                100.0 * report.accuracy_seen,
                report.sample_count
            );
            println!("class,accuracy_pct");
            for (c, a) in &report.per_class_accuracy {
                println!("{c},{:.2}", 100.0 * a);
            }
            let json = serde_json::to_string_pretty(&report)
                .map_err(|e| Failure::Invalid(e.to_string()))?;
            write(&cfg.resolved_output_dir().join("eval.json"), &json)?;
        }
        Command::Ablate {
            config,
            variants,
            seeds,
            num_seeds,
        } => {
            let cfg = config.resolve()?;
            if print_config(&config, &cfg) {
                return Ok(());
            }
            let variants: Vec<Variant> = if variants.is_empty() {
                Variant::ALL.to_vec()
            } else {
                variants
                    .iter()
                    .map(|v| v.parse())
                    .collect::<Result<_, _>>()?
            };
            let seeds = match (seeds.is_empty(), num_seeds) {
                (_, Some(n)) => (0..n).map(|k| cfg.class_order_seed + k).collect(),
                (true, None) => vec![cfg.class_order_seed],
                (false, None) => seeds,
            };
            let result = ablate(&cfg, &variants, &seeds)?;
            let dir = cfg.resolved_output_dir();
            let table = aggregate_csv(&result.rows, "variant");
            write(&dir.join("ablation.csv"), &table)?;
            write(
                &dir.join("ablation_runs.csv"),
                &members_csv(&result.members, "variant"),
            )?;
            let series: Vec<Series> = variants
                .iter()
                .map(|v| {
                    let runs: Vec<_> = result
                        .members
                        .iter()
                        .filter(|m| m.label == v.name())
                        .collect();
                    let t = runs[0].accuracies.len();
                    let points = (0..t)
                        .map(|i| {
                            (
                                (i + 1) as f64,
                                100.0 * runs.iter().map(|m| m.accuracies[i]).sum::<f64>()
                                    / runs.len() as f64,
                            )
                        })
                        .collect();
                    Series {
                        label: v.name().into(),
                        points,
                    }
                })
                .collect();
            let svg = line_chart_svg(
                "Ablation: mean accuracy on seen classes",
                "session",
                "accuracy (%)",
                &series,
                &format!("config {}", cfg.hash()),
            );
            write(&dir.join("ablation.svg"), &svg)?;
            print!("{table}");
        }
        Command::Sweep {
            config,
            param,
            values,
        } => {
            let cfg = config.resolve()?;
            if print_config(&config, &cfg) {
                return Ok(());
            }
            let param: SweepParam = param.parse()?;
            let result = sweep(&cfg, param, &values)?;
            let dir = cfg.resolved_output_dir();
            let csv = result.csv();
            write(&dir.join(format!("sweep_{}.csv", param.name())), &csv)?;
            write(
                &dir.join(format!("sweep_{}.svg", param.name())),
                &result.svg(&cfg.hash()),
            )?;
            print!("{csv}");
            println!(
                "average accuracy spread {:.2} points",
                result.average_spread_pct()
            );
        }
        Command::Gradcheck {
            d1,
            d2,
            layers,
            batch,
            tasks,
            seed,
            strategy,
            loss_mode,
            shared_omega,
            corrupt,
        } => {
            let strategy: MixtureStrategy = strategy.parse()?;
            let loss_mode: LossMode = loss_mode.parse()?;
            let corrupt = match corrupt.as_deref() {
                None => None,
                Some("phi_mu") => Some(ParamGroup::PhiMu),
                Some("phi_sigma") => Some(ParamGroup::PhiSigma),
                Some("omega") => Some(ParamGroup::Omega),
                Some("w_aux") => Some(ParamGroup::WAux),
                Some(other) => {
                    return Err(Failure::Invalid(format!(
                        "unknown gradient group `{other}`"
                    )))
                }
            };
            let setup = GradcheckSetup {
                d1,
                d2,
                num_layers: layers,
                batch,
                tasks,
                seed,
                strategy,
                loss_mode,
                shared_omega,
                corrupt,
                ..Default::default()
            };
            let report = gradcheck(&setup)?;
            print!("{}", report.render());
            if !report.passed {
                return Err(Failure::Numerical(
                    "analytic and finite-difference gradients disagree".into(),
                ));
            }
        }
        Command::Snapshot { config, checkpoint } => {
            let cfg = config.resolve()?;
            if print_config(&config, &cfg) {
                return Ok(());
            }
            let ckpt = checkpoint.map(|p| Checkpoint::load(&p)).transpose()?;
            let snap = snapshot(&cfg, ckpt.as_ref())?;
            let json =
                serde_json::to_string_pretty(&snap).map_err(|e| Failure::Invalid(e.to_string()))?;
            println!("{json}");
        }
    }
    Ok(())
}
