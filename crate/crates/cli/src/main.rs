use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand};

use pseudoclass::CenterGradScale;
use pseudoclass_cli::commands::{self, EvalRequest, TrainRequest};
use pseudoclass_cli::config::{ArchPreset, GridPreset, RunConfig, SweepAxis};

#[derive(Parser)]
#[command(name = "pseudoclass", version, about = "Unsupervised CNN features from learned pseudo-classes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every command.
#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
}

#[derive(Args, Clone, Default)]
struct TrainFlags {
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    iterations: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Number of pseudo-classes Λ.
    #[arg(long)]
    num_pseudo_classes: Option<usize>,
    #[arg(long)]
    center_grad_scale: Option<CenterGradScale>,
    /// Seat the centers on sample features after the first forward pass.
    #[arg(long)]
    warm_start_centers: bool,
    /// Move centers that a batch leaves empty onto outlying samples.
    #[arg(long)]
    reseed_dead_centers: bool,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    #[arg(long)]
    log_every: Option<u64>,
    /// `desk` or `custom` (layers from the config file).
    #[arg(long)]
    arch: Option<String>,
    #[arg(long)]
    feature_dim: Option<usize>,
}

#[derive(Args, Clone, Default)]
struct EvalFlags {
    /// Ridge regularizer γ.
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    folds: Option<usize>,
    /// Choose γ per fold by inner cross-validation.
    #[arg(long)]
    tune_gamma: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic texture dataset (manifest, payloads, labels).
    GenData {
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        per_class: Option<usize>,
        #[arg(long)]
        height: Option<usize>,
        #[arg(long)]
        width: Option<usize>,
        #[arg(long)]
        channels: Option<usize>,
        #[arg(long)]
        noise: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Train network and centers; writes the log and checkpoints.
    Train {
        /// Dataset manifest.
        #[arg(long)]
        data: PathBuf,
        /// Stop after this many updates (resumable).
        #[arg(long)]
        stop_after: Option<u64>,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        train: TrainFlags,
        #[command(flatten)]
        common: Common,
    },
    /// Dump features and pseudo-labels of every sample.
    Extract {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Cross-validated linear classification of extracted features.
    Eval {
        /// `features.csv` or `features.bin`.
        #[arg(long)]
        features: PathBuf,
        /// Ground-truth labels CSV.
        #[arg(long)]
        labels: PathBuf,
        /// Pseudo-label dump for purity (default: beside the features).
        #[arg(long)]
        pseudo_labels: Option<PathBuf>,
        #[command(flatten)]
        eval: EvalFlags,
        #[command(flatten)]
        common: Common,
    },
    /// Independent train/extract/eval runs over a grid of λ or Λ values.
    Sweep {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, value_enum)]
        axis: Option<SweepAxis>,
        /// Comma-separated grid values.
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<f64>>,
        /// Named grid; sets the axis too.
        #[arg(long, value_enum, conflicts_with_all = ["grid", "axis"])]
        preset: Option<GridPreset>,
        #[command(flatten)]
        train: TrainFlags,
        #[command(flatten)]
        eval: EvalFlags,
        #[command(flatten)]
        common: Common,
    },
    /// Markdown summary of a run directory.
    Report {
        /// Directory holding a training log, evaluation report or sweep table.
        #[arg(long)]
        run: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

fn base_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn apply_train(cfg: &mut RunConfig, f: &TrainFlags) -> Result<()> {
    let t = &mut cfg.train;
    macro_rules! set {
        ($($field:ident),*) => { $( if let Some(v) = f.$field { t.$field = v; } )* };
    }
    set!(lambda, learning_rate, iterations, batch_size, num_pseudo_classes, center_grad_scale, checkpoint_every, log_every);
    t.warm_start_centers |= f.warm_start_centers;
    t.reseed_dead_centers |= f.reseed_dead_centers;
    if let Some(a) = &f.arch {
        cfg.arch.preset = match a.as_str() {
            "desk" => ArchPreset::Desk,
            "custom" => ArchPreset::Custom,
            other => bail!("unknown architecture preset `{other}` (expected desk or custom)"),
        };
    }
    if f.feature_dim.is_some() {
        cfg.arch.feature_dim = f.feature_dim;
    }
    Ok(())
}

fn apply_eval(cfg: &mut RunConfig, f: &EvalFlags) {
    if let Some(g) = f.gamma {
        cfg.eval.gamma = g;
    }
    if let Some(k) = f.folds {
        cfg.eval.folds = k;
    }
    cfg.eval.tune_gamma |= f.tune_gamma;
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            classes,
            per_class,
            height,
            width,
            channels,
            noise,
            common,
        } => {
            let mut cfg = base_config(&common)?;
            let d = &mut cfg.data;
            d.classes = classes.unwrap_or(d.classes);
            d.per_class = per_class.unwrap_or(d.per_class);
            d.height = height.unwrap_or(d.height);
            d.width = width.unwrap_or(d.width);
            d.channels = channels.unwrap_or(d.channels);
            d.noise = noise.unwrap_or(d.noise);
            let report = commands::gen_data(&cfg, &common.out)?;
            println!(
                "wrote {} samples to {} (nearest-centroid pixel accuracy {:.3})",
                report.num_samples,
                common.out.display(),
                report.nearest_centroid_accuracy
            );
        }
        Command::Train {
            data,
            stop_after,
            resume,
            train,
            common,
        } => {
            let mut cfg = base_config(&common)?;
            apply_train(&mut cfg, &train)?;
            cfg.validate()?;
            let outcome = commands::train(
                &cfg,
                &TrainRequest {
                    data,
                    out: common.out.clone(),
                    stop_after,
                    resume,
                },
            )?;
            let where_ = if outcome.finished {
                common.out.join(commands::FINAL_CHECKPOINT)
            } else {
                commands::checkpoint_path(&common.out, outcome.state.iteration)
            };
            println!("stopped at iteration {}; checkpoint {}", outcome.state.iteration, where_.display());
        }
        Command::Extract { checkpoint, data, common } => {
            let cfg = base_config(&common)?;
            let dump = commands::extract(&cfg, &checkpoint, &data, &common.out)?;
            println!("extracted {} × {} features to {}", dump.ids.len(), dump.dim(), common.out.display());
        }
        Command::Eval {
            features,
            labels,
            pseudo_labels,
            eval,
            common,
        } => {
            let mut cfg = base_config(&common)?;
            apply_eval(&mut cfg, &eval);
            let r = commands::eval(
                &cfg,
                &EvalRequest {
                    features,
                    labels,
                    pseudo_labels,
                    out: common.out.clone(),
                },
            )?;
            print!("accuracy {:.2}% ± {:.2}%", 100.0 * r.mean, 100.0 * r.std);
            match r.purity {
                Some(p) => println!(", purity {p:.4}"),
                None => println!(),
            }
        }
        Command::Sweep {
            data,
            labels,
            axis,
            grid,
            preset,
            train,
            eval,
            common,
        } => {
            let mut cfg = base_config(&common)?;
            apply_train(&mut cfg, &train)?;
            apply_eval(&mut cfg, &eval);
            let (axis, grid) = match preset {
                Some(p) => (p.axis(), p.values()),
                None => (axis.unwrap_or(cfg.sweep.axis), grid.unwrap_or_else(|| cfg.sweep.grid.clone())),
            };
            let rows = commands::sweep(&cfg, &data, &labels, axis, &grid, &common.out)?;
            let failed = rows.iter().filter(|r| r.status != "ok").count();
            println!("{} points, {} failed; table {}", rows.len(), failed, common.out.join(commands::SWEEP_TABLE).display());
            if failed > 0 {
                bail!("{failed} sweep point(s) failed; see the status column");
            }
        }
        Command::Report { run, common } => {
            let md = commands::report(&run, &common.out)?;
            print!("{md}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
