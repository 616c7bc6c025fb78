//! `mmfs`: generate data, train, evaluate and report from one config file.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::{info, warn};

use mmfs_core::checkpoint::Checkpoint;
use mmfs_core::data::{generate_synthetic_dataset, load_dataset, save_dataset, Dataset, SplitKind};
use mmfs_core::inference::DetectionSet;
use mmfs_core::losses::Stage;
use mmfs_core::metrics::{evaluate_map, precision_recall, VideoGroundTruth};
use mmfs_core::model::Model;
use mmfs_core::protocol::{run_episodes, summarize, EvalReport};
use mmfs_core::training::{base_train, meta_train, StepRecord};
use mmfs_core::{Error, ExperimentConfig, Mode};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

#[derive(Parser)]
#[command(name = "mmfs", version, about = "Multimodal few-shot temporal action detection")]
struct Cli {
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a config file holding every default.
    Init {
        #[arg(default_value = "mmfs.toml")]
        path: PathBuf,
        /// Overwrite an existing file.
        #[arg(long)]
        force: bool,
    },
    /// Generate the synthetic dataset into `dataset.path`.
    Generate {
        #[arg(short, long, default_value = "mmfs.toml")]
        config: PathBuf,
    },
    /// Train a model and write a checkpoint.
    Train {
        #[arg(short, long, default_value = "mmfs.toml")]
        config: PathBuf,
        #[arg(long, value_enum, default_value_t = StageArg::Both)]
        stage: StageArg,
        /// Checkpoint to write.
        #[arg(long, default_value = "model.ckpt")]
        checkpoint: PathBuf,
        /// Base checkpoint to start meta-training from; defaults to `--checkpoint`.
        #[arg(long)]
        from: Option<PathBuf>,
        /// Per-step JSON-lines training log.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Run the episodic evaluation protocol.
    Eval {
        #[arg(short, long, default_value = "mmfs.toml")]
        config: PathBuf,
        #[arg(long, default_value = "model.ckpt")]
        checkpoint: PathBuf,
        /// Overrides `eval.mode`.
        #[arg(long)]
        mode: Option<Mode>,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        workers: Option<usize>,
        /// Report file.
        #[arg(long, default_value = "report.json")]
        out: PathBuf,
        /// Also write every episode's predictions.
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Also write pooled precision/recall points per class and threshold.
        #[arg(long)]
        pr_curves: Option<PathBuf>,
        /// Evaluate even if the config differs from the one the checkpoint was trained with.
        #[arg(long)]
        allow_config_drift: bool,
    },
    /// Score a prediction file against the dataset's ground truth.
    Score {
        #[arg(short, long, default_value = "mmfs.toml")]
        config: PathBuf,
        /// JSON list of `{video_id, segments: [{start, end, class, score}]}`.
        predictions: PathBuf,
        /// Restrict to the classes of one split.
        #[arg(long, value_enum)]
        split: Option<SplitArg>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print one or more reports as a table.
    Report {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Base,
    Meta,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Base,
    Validation,
    Novel,
}

impl From<SplitArg> for SplitKind {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Base => SplitKind::Base,
            SplitArg::Validation => SplitKind::Validation,
            SplitArg::Novel => SplitKind::Novel,
        }
    }
}

/// Failures carry the exit code they map to.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::InvalidArgument(_) => EXIT_USAGE,
            Error::NonFinite(_) | Error::Divergence { .. } => EXIT_NUMERIC,
            _ => EXIT_DATA,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::from(e).into()
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Error::from(e).into()
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_USAGE,
        message: message.into(),
    }
}

type Outcome = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(command: Command) -> Outcome {
    match command {
        Command::Init { path, force } => init(&path, force),
        Command::Generate { config } => generate(&config),
        Command::Train {
            config,
            stage,
            checkpoint,
            from,
            log,
        } => train(&config, stage, &checkpoint, from.as_deref(), log.as_deref()),
        Command::Eval {
            config,
            checkpoint,
            mode,
            episodes,
            workers,
            out,
            predictions,
            pr_curves,
            allow_config_drift,
        } => {
            let opts = EvalOptions {
                mode,
                episodes,
                workers,
                out,
                predictions,
                pr_curves,
                allow_config_drift,
            };
            eval(&config, &checkpoint, &opts)
        }
        Command::Score {
            config,
            predictions,
            split,
            out,
        } => score(&config, &predictions, split.map(Into::into), out.as_deref()),
        Command::Report { reports } => report(&reports),
    }
}

fn init(path: &Path, force: bool) -> Outcome {
    if path.exists() && !force {
        return Err(usage(format!("{} exists; pass --force to overwrite", path.display())));
    }
    fs::write(path, ExperimentConfig::template())?;
    println!("wrote {}", path.display());
    Ok(())
}

/// The dataset directory, relative to the config file.
fn dataset_dir(config_path: &Path, cfg: &ExperimentConfig) -> PathBuf {
    let p = Path::new(&cfg.dataset.path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        config_path.parent().unwrap_or(Path::new(".")).join(p)
    }
}

fn load_data(config_path: &Path, cfg: &ExperimentConfig) -> Result<Dataset, Failure> {
    let dir = dataset_dir(config_path, cfg);
    if !dir.join("manifest.json").exists() {
        return Err(Failure {
            code: EXIT_DATA,
            message: format!("no dataset at {}; run `mmfs generate` first", dir.display()),
        });
    }
    Ok(load_dataset(&dir)?)
}

fn generate(config_path: &Path) -> Outcome {
    let cfg = ExperimentConfig::load(config_path)?;
    let dataset = generate_synthetic_dataset(&cfg.dataset.synthetic, cfg.seed)?;
    let dir = dataset_dir(config_path, &cfg);
    save_dataset(&dir, &dataset)?;
    println!(
        "wrote {} videos of {} classes to {} (base {}, validation {}, novel {})",
        dataset.videos.len(),
        dataset.num_classes(),
        dir.display(),
        dataset.split.base.len(),
        dataset.split.validation.len(),
        dataset.split.novel.len()
    );
    Ok(())
}

fn train(config_path: &Path, stage: StageArg, out: &Path, from: Option<&Path>, log_path: Option<&Path>) -> Outcome {
    let cfg = ExperimentConfig::load(config_path)?;
    let dataset = load_data(config_path, &cfg)?;
    let mut log_file = match log_path {
        Some(p) => Some(BufWriter::new(fs::File::create(p)?)),
        None => None,
    };
    let mut log_err = None;
    let mut log = |r: &StepRecord| {
        if r.step.is_multiple_of(50) {
            info!(
                "{} step {}: total {:.4} (grad norm {:.3})",
                r.stage, r.step, r.total, r.grad_norm
            );
        }
        if let Some(f) = log_file.as_mut() {
            let line = serde_json::to_string(r).expect("step record serializes");
            if let Err(e) = writeln!(f, "{line}") {
                log_err.get_or_insert(e);
            }
        }
    };

    let (mut model, mut stages) = match stage {
        StageArg::Base | StageArg::Both => (Model::for_dataset(cfg.model.clone(), &dataset, cfg.seed)?, Vec::new()),
        StageArg::Meta => {
            let path = from.unwrap_or(out);
            if !path.exists() {
                return Err(Failure {
                    code: EXIT_DATA,
                    message: format!(
                        "meta-training needs a base checkpoint at {}; run `mmfs train --stage base` first",
                        path.display()
                    ),
                });
            }
            let ck = Checkpoint::load(path)?;
            if !ck.stages.contains(&Stage::Base) {
                return Err(Failure {
                    code: EXIT_DATA,
                    message: format!("{} has not been base-trained", path.display()),
                });
            }
            if ck.config_hash() != cfg.hash() {
                return Err(Failure {
                    code: EXIT_DATA,
                    message: format!("{} was trained with a different config", path.display()),
                });
            }
            (ck.model, ck.stages)
        }
    };

    if matches!(stage, StageArg::Base | StageArg::Both) {
        let s = base_train(&mut model, &dataset, &cfg.training, cfg.seed, &mut log)?;
        println!(
            "base: {} steps, loss {:.4} -> {:.4}",
            s.steps, s.early_loss, s.late_loss
        );
        stages.push(Stage::Base);
    }
    if matches!(stage, StageArg::Meta | StageArg::Both) {
        let s = meta_train(&mut model, &dataset, &cfg.training, cfg.seed, &mut log)?;
        println!(
            "meta: {} episodes, loss {:.4} -> {:.4}",
            s.steps, s.early_loss, s.late_loss
        );
        stages.push(Stage::Meta);
    }
    if let Some(f) = log_file.as_mut() {
        f.flush()?;
    }
    if let Some(e) = log_err {
        return Err(e.into());
    }
    let ck = Checkpoint {
        config: cfg,
        stages,
        model,
    };
    ck.save(out)?;
    println!("wrote {} (config {})", out.display(), ck.config_hash());
    Ok(())
}

struct EvalOptions {
    mode: Option<Mode>,
    episodes: Option<usize>,
    workers: Option<usize>,
    out: PathBuf,
    predictions: Option<PathBuf>,
    pr_curves: Option<PathBuf>,
    allow_config_drift: bool,
}

#[derive(serde::Serialize)]
struct PrCurve {
    class_id: usize,
    tiou: f64,
    /// `(precision, recall)` in ranked order.
    points: Vec<(f64, f64)>,
}

fn eval(config_path: &Path, checkpoint: &Path, opts: &EvalOptions) -> Outcome {
    let cfg = ExperimentConfig::load(config_path)?;
    let ck = Checkpoint::load(checkpoint)?;
    if ck.config_hash() != cfg.hash() {
        let msg = format!(
            "{} was trained with config {} but {} hashes to {}",
            checkpoint.display(),
            ck.config_hash(),
            config_path.display(),
            cfg.hash()
        );
        if !opts.allow_config_drift {
            return Err(Failure {
                code: EXIT_DATA,
                message: format!("{msg}; pass --allow-config-drift to evaluate anyway"),
            });
        }
        warn!("{msg}");
    }
    let dataset = load_data(config_path, &cfg)?;
    let mut ev = cfg.eval.clone();
    if let Some(m) = opts.mode {
        ev.mode = m;
    }
    if let Some(n) = opts.episodes {
        ev.episodes = n;
    }
    if let Some(w) = opts.workers {
        ev.workers = w;
    }
    let outcomes = run_episodes(&ck.model, &dataset, &ev, cfg.seed)?;
    let mut report = summarize(&outcomes, &dataset, &ev);
    report.config_hash = Some(ck.config_hash());
    write_json(&opts.out, &report)?;
    print!("{}", report.table());
    println!("wrote {}", opts.out.display());

    if let Some(p) = &opts.predictions {
        write_json(p, &outcomes)?;
    }
    if let Some(p) = &opts.pr_curves {
        // Pool episodes; video ids are prefixed so repeated queries stay distinct.
        let mut preds = Vec::new();
        let mut gt = Vec::new();
        for o in &outcomes {
            for s in &o.predictions {
                preds.push(DetectionSet {
                    video_id: format!("{}/{}", o.index, s.video_id),
                    segments: s.segments.clone(),
                });
            }
            for g in &o.ground_truth {
                gt.push(VideoGroundTruth {
                    video_id: format!("{}/{}", o.index, g.video_id),
                    annotations: g.annotations.clone(),
                });
            }
        }
        let classes: std::collections::BTreeSet<usize> = outcomes.iter().flat_map(|o| o.class_ids.clone()).collect();
        let mut curves = Vec::new();
        for &c in &classes {
            for &th in &ev.tiou_grid {
                curves.push(PrCurve {
                    class_id: c,
                    tiou: th,
                    points: precision_recall(&preds, &gt, c, th),
                });
            }
        }
        write_json(p, &curves)?;
    }
    Ok(())
}

fn score(config_path: &Path, predictions: &Path, split: Option<SplitKind>, out: Option<&Path>) -> Outcome {
    let cfg = ExperimentConfig::load(config_path)?;
    let dataset = load_data(config_path, &cfg)?;
    let text = fs::read_to_string(predictions)?;
    let preds: Vec<DetectionSet> = serde_json::from_str(&text).map_err(|e| Failure {
        code: EXIT_DATA,
        message: format!("{}: {e}", predictions.display()),
    })?;
    let mut gt = Vec::with_capacity(preds.len());
    for p in &preds {
        p.validate()?;
        let v = dataset.video(&p.video_id).ok_or_else(|| Failure {
            code: EXIT_DATA,
            message: format!("{}: unknown video {}", predictions.display(), p.video_id),
        })?;
        gt.push(VideoGroundTruth {
            video_id: v.video_id.clone(),
            annotations: v.annotations.clone(),
        });
    }
    let mut classes: Vec<usize> = gt
        .iter()
        .flat_map(|g| g.annotations.iter().map(|a| a.class_id))
        .collect();
    if let Some(s) = split {
        let keep = dataset.split.classes(s);
        classes.retain(|c| keep.contains(c));
    }
    classes.sort_unstable();
    classes.dedup();
    let result = evaluate_map(&preds, &gt, &classes, &cfg.eval.tiou_grid);
    for (th, ap) in result.tiou_grid.iter().zip(&result.map) {
        println!("  mAP@{th:.2}  {:6.2}", 100.0 * ap);
    }
    println!("  avg       {:6.2}", 100.0 * result.average);
    if let Some(p) = out {
        write_json(p, &result)?;
    }
    Ok(())
}

fn report(paths: &[PathBuf]) -> Outcome {
    let mut reports = Vec::with_capacity(paths.len());
    for p in paths {
        let text = fs::read_to_string(p)?;
        let r: EvalReport = serde_json::from_str(&text).map_err(|e| Failure {
            code: EXIT_DATA,
            message: format!("{}: {e}", p.display()),
        })?;
        reports.push((p, r));
    }
    if reports.len() == 1 {
        print!("{}", reports[0].1.table());
        return Ok(());
    }
    let grid = &reports[0].1.tiou_grid;
    if reports.iter().any(|(_, r)| &r.tiou_grid != grid) {
        return Err(Failure {
            code: EXIT_DATA,
            message: "reports use different tIoU grids".into(),
        });
    }
    let mut header = format!("{:<32} {:>5} {:>6}", "report", "mode", "N/K");
    for th in grid {
        header.push_str(&format!(" {:>7}", format!("@{th:.2}")));
    }
    header.push_str(&format!(" {:>7}", "avg"));
    println!("{header}");
    for (p, r) in &reports {
        let name = p.display().to_string();
        let mut line = format!(
            "{:<32} {:>5} {:>6}",
            name,
            r.mode.to_string(),
            format!("{}/{}", r.ways, r.shots)
        );
        for ap in &r.map {
            line.push_str(&format!(" {:>7.2}", 100.0 * ap));
        }
        line.push_str(&format!(" {:>7.2}", 100.0 * r.average));
        println!("{line}");
    }
    Ok(())
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Outcome {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}
