//! The subcommands, callable without going through argument parsing.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};

use pseudoclass::checkpoint::{load_checkpoint, save_checkpoint};
use pseudoclass::data::{align_labels, gen_synthetic, kfold_split, load_dataset, read_labels, SyntheticParams, SyntheticReport};
use pseudoclass::eval::{cluster_purity, cross_validate, EvalReport, GammaChoice};
use pseudoclass::pseudo_loss::assign_pseudo_labels;
use pseudoclass::trainer::{extract_features, run, TrainObserver};
use pseudoclass::{InputGeometry, TrainLogRecord, TrainState};

use crate::artifacts::{
    log_line, pseudo_labels_csv, read_pseudo_labels, read_train_log, train_log_header, write_file, FeatureDump,
    PseudoLabelRecord, CONFUSION_HEADER, SWEEP_HEADER,
};
use crate::config::{RunConfig, SweepAxis};

pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const TIMING: &str = "timing.json";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const FEATURES_CSV: &str = "features.csv";
pub const FEATURES_BIN: &str = "features.bin";
pub const PSEUDO_LABELS: &str = "pseudo_labels.csv";
pub const EVAL_REPORT: &str = "eval_report.json";
pub const CONFUSION: &str = "confusion.csv";
pub const SWEEP_TABLE: &str = "sweep.csv";
pub const REPORT: &str = "report.md";

pub fn checkpoint_path(out: &Path, iteration: u64) -> PathBuf {
    out.join(CHECKPOINT_DIR).join(format!("ckpt_{iteration:08}.bin"))
}

pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<SyntheticReport> {
    let d = &cfg.data;
    let params = SyntheticParams {
        num_classes: d.classes,
        per_class: d.per_class,
        geometry: InputGeometry::new(d.channels, d.height, d.width),
        noise_sigma: d.noise,
        seed: cfg.seed,
    };
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    Ok(gen_synthetic(&params, out)?)
}

#[derive(Debug, Clone, Default)]
pub struct TrainRequest {
    pub data: PathBuf,
    pub out: PathBuf,
    /// Stop once this many updates have been applied (a checkpoint is written).
    pub stop_after: Option<u64>,
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Timing {
    pub wall_seconds: f64,
    pub steps_run: u64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    /// Whether the full iteration budget was reached.
    pub finished: bool,
}

struct FileObserver {
    log: BufWriter<fs::File>,
    log_path: PathBuf,
    out: PathBuf,
}

impl FileObserver {
    fn io(&self, path: &Path, e: std::io::Error) -> pseudoclass::Error {
        pseudoclass::Error::Io {
            path: path.to_path_buf(),
            source: e,
        }
    }
}

impl TrainObserver for FileObserver {
    fn on_log(&mut self, record: &TrainLogRecord) -> pseudoclass::Result<()> {
        let line = log_line(record);
        self.log.write_all(line.as_bytes()).map_err(|e| self.io(&self.log_path, e))
    }

    fn on_checkpoint(&mut self, state: &TrainState) -> pseudoclass::Result<()> {
        save_checkpoint(&state.to_checkpoint(), &checkpoint_path(&self.out, state.iteration))
    }
}

pub fn train(cfg: &RunConfig, req: &TrainRequest) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train_cfg = cfg.train_config();
    ensure!(req.data.is_file(), "dataset manifest {} does not exist", req.data.display());
    let dataset = load_dataset(&req.data)?;
    let images = dataset.images();
    let spec = cfg.arch.build(images.geometry(), train_cfg.num_pseudo_classes)?;

    let state = match &req.resume {
        Some(path) => {
            let state = TrainState::from_checkpoint(load_checkpoint(path)?);
            if state.network.spec() != &spec {
                bail!(
                    "checkpoint {} was trained with a different architecture than the configured one",
                    path.display()
                );
            }
            state
        }
        None => TrainState::init(spec, images.len(), cfg.seed)?,
    };
    let start_iteration = state.iteration;

    fs::create_dir_all(req.out.join(CHECKPOINT_DIR)).with_context(|| format!("creating {}", req.out.display()))?;
    let echo = cfg.echo();
    let log_path = req.out.join(TRAIN_LOG);
    let mut log_text = train_log_header(&echo);
    if req.resume.is_some() && log_path.is_file() {
        // keep, byte for byte, the records written up to the checkpoint
        read_train_log(&log_path)?;
        let previous = fs::read_to_string(&log_path)?;
        for line in previous.lines().skip(1) {
            let r: TrainLogRecord = serde_json::from_str(line)?;
            if r.iteration <= start_iteration {
                log_text.push_str(line);
                log_text.push('\n');
            }
        }
    }
    let mut file = fs::File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?;
    file.write_all(log_text.as_bytes())?;
    let mut observer = FileObserver {
        log: BufWriter::new(file),
        log_path: log_path.clone(),
        out: req.out.clone(),
    };

    let started = Instant::now();
    let result = run(state, images, &train_cfg, req.stop_after, &mut observer);
    observer.log.flush().with_context(|| format!("writing {}", log_path.display()))?;
    let state = result?;

    let finished = state.iteration >= train_cfg.iterations;
    if finished {
        save_checkpoint(&state.to_checkpoint(), &req.out.join(FINAL_CHECKPOINT))?;
    } else {
        let path = checkpoint_path(&req.out, state.iteration);
        if !path.is_file() {
            save_checkpoint(&state.to_checkpoint(), &path)?;
        }
    }
    let timing = Timing {
        wall_seconds: started.elapsed().as_secs_f64(),
        steps_run: state.iteration - start_iteration,
    };
    write_file(&req.out.join(TIMING), &serde_json::to_vec_pretty(&timing)?)?;
    Ok(TrainOutcome { state, finished })
}

/// Features of every manifest sample plus their pseudo-labels under the
/// checkpoint's centers.
pub fn extract(cfg: &RunConfig, checkpoint: &Path, data: &Path, out: &Path) -> Result<FeatureDump> {
    ensure!(checkpoint.is_file(), "checkpoint {} does not exist", checkpoint.display());
    ensure!(data.is_file(), "dataset manifest {} does not exist", data.display());
    let ckpt = load_checkpoint(checkpoint)?;
    let dataset = load_dataset(data)?;
    let images = dataset.images();
    let input = ckpt.network.spec().input;
    if images.geometry() != input {
        bail!(
            "checkpoint expects {}x{}x{} (CxHxW) inputs, dataset has {}x{}x{}",
            input.channels,
            input.height,
            input.width,
            images.geometry().channels,
            images.geometry().height,
            images.geometry().width
        );
    }
    let (features, ids) = extract_features(&ckpt.network, images)?;
    let assignment = assign_pseudo_labels(&features, &ckpt.centers)?;
    let dump = FeatureDump { ids, features };

    let echo = serde_json::json!({
        "seed": cfg.seed,
        "architecture": ckpt.network.spec(),
        "iteration": ckpt.iteration,
    });
    write_file(&out.join(FEATURES_CSV), &dump.to_csv(&echo)?)?;
    write_file(&out.join(FEATURES_BIN), &dump.to_bin(&echo))?;
    let records: Vec<PseudoLabelRecord> = dump
        .ids
        .iter()
        .enumerate()
        .map(|(i, id)| {
            let z = assignment.labels[i];
            PseudoLabelRecord {
                id: id.clone(),
                pseudo_label: z,
                distance: assignment.distances.row(i)[z],
            }
        })
        .collect();
    write_file(&out.join(PSEUDO_LABELS), &pseudo_labels_csv(&records, &echo)?)?;
    Ok(dump)
}

#[derive(Debug, Clone, Default)]
pub struct EvalRequest {
    pub features: PathBuf,
    pub labels: PathBuf,
    /// Defaults to `pseudo_labels.csv` beside the features, when present.
    pub pseudo_labels: Option<PathBuf>,
    pub out: PathBuf,
}

pub fn eval(cfg: &RunConfig, req: &EvalRequest) -> Result<EvalReport> {
    cfg.validate()?;
    ensure!(req.features.is_file(), "feature file {} does not exist", req.features.display());
    ensure!(
        req.labels.is_file(),
        "labels file {} does not exist (evaluation needs ground truth)",
        req.labels.display()
    );
    let dump = FeatureDump::read(&req.features)?;
    let labels = align_labels(&dump.ids, &read_labels(&req.labels)?)?;
    let split = kfold_split(labels.len(), Some(&labels), cfg.eval.folds, cfg.seed)?;
    let gamma = if cfg.eval.tune_gamma {
        GammaChoice::Tuned { seed: cfg.seed }
    } else {
        GammaChoice::Fixed(cfg.eval.gamma)
    };
    let mut report = cross_validate(&dump.features, &labels, &split, gamma)?;

    let pseudo_path = req
        .pseudo_labels
        .clone()
        .or_else(|| req.features.parent().map(|p| p.join(PSEUDO_LABELS)).filter(|p| p.is_file()));
    if let Some(path) = pseudo_path {
        let records = read_pseudo_labels(&path)?;
        let by_id: std::collections::BTreeMap<&str, usize> =
            records.iter().map(|r| (r.id.as_str(), r.pseudo_label)).collect();
        let pseudo = dump
            .ids
            .iter()
            .map(|id| by_id.get(id.as_str()).copied().with_context(|| format!("no pseudo-label for `{id}`")))
            .collect::<Result<Vec<_>>>()?;
        report.purity = Some(cluster_purity(&pseudo, &labels)?);
    }
    report.config = serde_json::json!({ "seed": cfg.seed, "eval": cfg.eval });

    write_file(&req.out.join(EVAL_REPORT), &serde_json::to_vec_pretty(&report)?)?;
    let mut confusion = format!("{CONFUSION_HEADER} config={}\n", report.config);
    confusion.push_str(&report.confusion.to_csv());
    write_file(&req.out.join(CONFUSION), confusion.as_bytes())?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub purity: Option<f64>,
    /// `ok` or the error that stopped this point.
    pub status: String,
}

pub fn apply_axis(cfg: &RunConfig, axis: SweepAxis, value: f64) -> Result<RunConfig> {
    let mut c = cfg.clone();
    match axis {
        SweepAxis::Lambda => c.train.lambda = value,
        SweepAxis::NumPseudoClasses => {
            ensure!(
                value >= 0.0 && value.fract() == 0.0,
                "pseudo-class count must be a whole number, got {value}"
            );
            c.train.num_pseudo_classes = value as usize;
        }
    }
    Ok(c)
}

fn sweep_point(cfg: &RunConfig, data: &Path, labels: &Path, dir: &Path) -> Result<EvalReport> {
    cfg.validate()?;
    let req = TrainRequest {
        data: data.to_path_buf(),
        out: dir.to_path_buf(),
        ..TrainRequest::default()
    };
    train(cfg, &req)?;
    extract(cfg, &dir.join(FINAL_CHECKPOINT), data, dir)?;
    eval(
        cfg,
        &EvalRequest {
            features: dir.join(FEATURES_BIN),
            labels: labels.to_path_buf(),
            pseudo_labels: None,
            out: dir.to_path_buf(),
        },
    )
}

/// One independent train → extract → eval per grid value, each in its own
/// subdirectory; a failing point is recorded and the sweep moves on.
pub fn sweep(
    cfg: &RunConfig,
    data: &Path,
    labels: &Path,
    axis: SweepAxis,
    grid: &[f64],
    out: &Path,
) -> Result<Vec<SweepRow>> {
    ensure!(!grid.is_empty(), "sweep grid is empty");
    let mut values = grid.to_vec();
    values.sort_by(f64::total_cmp);
    values.dedup();
    let mut rows = Vec::with_capacity(values.len());
    for &value in &values {
        let dir = out.join(format!("point_{value}"));
        let outcome = apply_axis(cfg, axis, value).and_then(|c| sweep_point(&c, data, labels, &dir));
        rows.push(match outcome {
            Ok(r) => SweepRow {
                value,
                mean: Some(r.mean),
                std: Some(r.std),
                purity: r.purity,
                status: "ok".into(),
            },
            Err(e) => SweepRow {
                value,
                mean: None,
                std: None,
                purity: None,
                status: format!("error: {e:#}"),
            },
        });
    }
    let mut echo = cfg.echo();
    echo["sweep"] = serde_json::json!({ "axis": axis, "grid": values });
    let mut table = format!("{SWEEP_HEADER} axis={} config={echo}\n", axis_name(axis)).into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut table);
        w.write_record(["value", "mean", "std", "purity", "status"])?;
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
        for r in &rows {
            w.write_record([r.value.to_string(), opt(r.mean), opt(r.std), opt(r.purity), r.status.clone()])?;
        }
        w.flush()?;
    }
    write_file(&out.join(SWEEP_TABLE), &table)?;
    Ok(rows)
}

pub fn axis_name(axis: SweepAxis) -> &'static str {
    match axis {
        SweepAxis::Lambda => "lambda",
        SweepAxis::NumPseudoClasses => "num-pseudo-classes",
    }
}

pub fn read_sweep(path: &Path) -> Result<Vec<SweepRow>> {
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(file);
    Ok(r.deserialize().collect::<std::result::Result<Vec<SweepRow>, _>>()?)
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Median joint loss of the first and last `window` logged steps.
pub fn loss_windows(records: &[TrainLogRecord], window: usize) -> Option<(f64, f64)> {
    if records.is_empty() || window == 0 {
        return None;
    }
    let w = window.min(records.len());
    let losses: Vec<f64> = records.iter().map(|r| r.loss).collect();
    Some((median(&losses[..w]), median(&losses[losses.len() - w..])))
}

/// Markdown summary of whatever artifacts are found in `run`.
pub fn report(run: &Path, out: &Path) -> Result<String> {
    ensure!(run.is_dir(), "run directory {} does not exist", run.display());
    let mut md = String::from("<!-- pseudoclass-report v1 -->\n");
    md.push_str(&format!("# Run `{}`\n", run.display()));
    let mut found = false;

    let log = run.join(TRAIN_LOG);
    if log.is_file() {
        found = true;
        let (_, records) = read_train_log(&log)?;
        md.push_str("\n## Training\n\n");
        md.push_str(&format!("- logged steps: {}\n", records.len()));
        if let Some((first, last)) = loss_windows(&records, 50) {
            md.push_str(&format!("- median joint loss, first 50 logged steps: {first:.6}\n"));
            md.push_str(&format!("- median joint loss, last 50 logged steps: {last:.6}\n"));
            md.push_str(&format!("- ratio last/first: {:.4}\n", last / first));
        }
        if let Some(r) = records.last() {
            md.push_str(&format!("- final churn: {:.4}\n", r.churn));
            md.push_str(&format!("- final batch pseudo-class counts: {:?}\n", r.counts));
        }
    }

    let eval_path = run.join(EVAL_REPORT);
    if eval_path.is_file() {
        found = true;
        let r: EvalReport = serde_json::from_slice(&fs::read(&eval_path)?)?;
        md.push_str("\n## Evaluation\n\n");
        md.push_str(&format!(
            "- {}-fold accuracy: {:.2}% ± {:.2}% ({} std)\n",
            r.fold_accuracies.len(),
            100.0 * r.mean,
            100.0 * r.std,
            r.std_kind
        ));
        let folds: Vec<String> = r.fold_accuracies.iter().map(|a| format!("{a:.4}")).collect();
        md.push_str(&format!("- per fold: {}\n", folds.join(", ")));
        if let Some(p) = r.purity {
            md.push_str(&format!("- pseudo-label purity: {p:.4}\n"));
        }
        for w in &r.warnings {
            md.push_str(&format!("- warning: {w}\n"));
        }
        md.push_str("\nConfusion (rows: true class, columns: predicted):\n\n");
        let k = r.confusion.counts.len();
        md.push_str(&format!("| |{}\n", (0..k).map(|j| format!(" {j} |")).collect::<String>()));
        md.push_str(&format!("|---|{}\n", "---|".repeat(k)));
        for (i, row) in r.confusion.counts.iter().enumerate() {
            md.push_str(&format!("| {i} |{}\n", row.iter().map(|c| format!(" {c} |")).collect::<String>()));
        }
    }

    let sweep_path = run.join(SWEEP_TABLE);
    if sweep_path.is_file() {
        found = true;
        md.push_str("\n## Sweep\n\n| value | mean | std | purity | status |\n|---|---|---|---|---|\n");
        let fmt = |v: Option<f64>| v.map_or("—".to_string(), |v| format!("{v:.4}"));
        for r in read_sweep(&sweep_path)? {
            md.push_str(&format!(
                "| {} | {} | {} | {} | {} |\n",
                r.value,
                fmt(r.mean),
                fmt(r.std),
                fmt(r.purity),
                r.status
            ));
        }
    }
    ensure!(found, "no training log, evaluation report or sweep table in {}", run.display());
    write_file(&out.join(REPORT), md.as_bytes())?;
    Ok(md)
}
