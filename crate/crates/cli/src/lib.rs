//! `cemformer` command-line driver.
//!
//! Exit codes: 0 success, 1 usage, 2 data or format problem, 3 numeric
//! failure (non-finite values or a failed gradient check).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use cemformer::embed::{Image, MultiViewFrame};
use cemformer::encoder::{load_checkpoint, save_checkpoint, Cemformer};
use cemformer::episodes::{
    generate_dataset, kfold_split, read_dataset, write_dataset, Dataset, GenConfig, MetricsReport,
};
use cemformer::rules::{brain4cars_rules, parse_rules, ScenarioSet};
use cemformer::runtime::{export_attention, fps_report, InferenceSession};
use cemformer::train::{evaluate, run_cv, EpochStats, GradCheckSetup, TrainConfig, Trainer};
use clap::{Parser, Subcommand};
use thiserror::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] cemformer::Error),
    #[error("{0}")]
    Data(String),
    #[error("gradient check failed: {0}")]
    GradCheck(String),
    #[error("cannot write output: {0}")]
    Output(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) if e.is_numeric() => EXIT_NUMERIC,
            CliError::GradCheck(_) => EXIT_NUMERIC,
            _ => EXIT_DATA,
        }
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "cemformer", version, about = "Episodic-memory transformer for driver intention anticipation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Synthesize a dataset of two-view episodes.
    Gen {
        #[arg(long)]
        n: usize,
        /// Frames per episode.
        #[arg(long, default_value_t = 5)]
        t: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Ruleset file; the built-in driving rules when omitted.
        #[arg(long)]
        rules: Option<PathBuf>,
        /// Generator settings (TOML).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train with k-fold cross-validation (or on everything with --folds 1).
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u64).range(1..))]
        folds: u64,
        /// Training settings (TOML).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also write a checkpoint every N epochs.
        #[arg(long)]
        checkpoint_every: Option<usize>,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Ruleset for the contradiction rate; the dataset's own by default.
        #[arg(long)]
        rules: Option<PathBuf>,
        /// Sampled steps per episode; min(5, frames) by default.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Stream one episode frame by frame and print every prediction.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        episode: u64,
    },
    /// Export per-step attention maps of one episode.
    Attn {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        episode: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of the training gradient.
    Gradcheck {
        /// Model size and tolerances (TOML); a tiny model by default.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Measure streaming throughput.
    Fps {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 100)]
        n: usize,
        /// Stream frames from this dataset instead of synthetic ones.
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

/// Runs the CLI against the process's standard streams.
pub fn run(args: &[String]) -> i32 {
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run_with(args, &mut stdout.lock(), &mut stderr.lock())
}

pub fn run_with(args: &[String], out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK {
                out.write_all(text.as_bytes())
            } else {
                err.write_all(text.as_bytes())
            };
            return code;
        }
    };
    match dispatch(cli.command, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(command: Command, out: &mut dyn Write) -> CliResult<()> {
    match command {
        Command::Gen {
            n,
            t,
            seed,
            rules,
            config,
            out: dir,
        } => gen(n, t, seed, rules.as_deref(), config.as_deref(), &dir, out),
        Command::Train {
            data,
            folds,
            config,
            out: dir,
            checkpoint_every,
        } => train(&data, folds as usize, config.as_deref(), &dir, checkpoint_every, out),
        Command::Eval {
            data,
            checkpoint,
            rules,
            steps,
        } => eval(&data, &checkpoint, rules.as_deref(), steps, out),
        Command::Infer {
            checkpoint,
            data,
            episode,
        } => infer(&checkpoint, &data, episode, out),
        Command::Attn {
            checkpoint,
            data,
            episode,
            out: dir,
        } => attn(&checkpoint, &data, episode, &dir, out),
        Command::Gradcheck { config } => gradcheck(config.as_deref(), out),
        Command::Fps { checkpoint, n, data } => fps(&checkpoint, n, data.as_deref(), out),
    }
}

fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))
}

fn load_rules(path: Option<&Path>, template: &ScenarioSet) -> CliResult<ScenarioSet> {
    match path {
        None => Ok(template.clone()),
        Some(p) => Ok(parse_rules(&read_text(p)?, template.classes(), template.dim())?),
    }
}

fn gen(
    n: usize,
    t: usize,
    seed: u64,
    rules: Option<&Path>,
    config: Option<&Path>,
    dir: &Path,
    out: &mut dyn Write,
) -> CliResult<()> {
    let rules = load_rules(rules, &brain4cars_rules())?;
    let mut cfg = match config {
        Some(p) => GenConfig::from_toml(&read_text(p)?)?,
        None => GenConfig::default(),
    };
    cfg.frames = t;
    let episodes = generate_dataset(n, seed, &cfg, &rules)?;
    let manifest = write_dataset(dir, &episodes, &rules)?;
    writeln!(out, "wrote {} episodes of {} frames to {}", manifest.len(), t, dir.display())?;
    Ok(())
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("cannot create {}: {e}", dir.display())))
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    fs::write(path, bytes).map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

fn train(
    data: &Path,
    folds: usize,
    config: Option<&Path>,
    dir: &Path,
    checkpoint_every: Option<usize>,
    out: &mut dyn Write,
) -> CliResult<()> {
    let ds = read_dataset(data)?;
    let config = match config {
        Some(p) => TrainConfig::from_toml(&read_text(p)?)?,
        None => TrainConfig::default(),
    };
    config.validate()?;
    if ds.episodes.is_empty() {
        return Err(CliError::Data(format!("{} holds no episodes", data.display())));
    }
    create_dir(dir)?;
    write_file(&dir.join("config.toml"), config.to_toml().as_bytes())?;

    let mut log = String::new();
    let mut on_epoch = |tag: String, s: &EpochStats, m: &Cemformer| -> cemformer::Result<()> {
        let line = format!("{tag}{s}\n");
        let _ = out.write_all(line.as_bytes());
        log += &line;
        if checkpoint_every.is_some_and(|k| k > 0 && s.epoch.is_multiple_of(k)) {
            let name = format!("{}epoch{}.ckpt", tag.replace(['\t', ' '], ""), s.epoch);
            save_checkpoint(m, &dir.join(name))?;
        }
        Ok(())
    };

    if folds == 1 {
        let refs: Vec<_> = ds.episodes.iter().collect();
        let mut trainer = Trainer::new(config.clone(), ds.manifest.views.clone(), ds.rules.clone())?;
        trainer.fit(&refs, |s, m| on_epoch(String::new(), s, m))?;
        save_checkpoint(trainer.model(), &dir.join("model.ckpt"))?;
        let metrics = evaluate(trainer.model(), &refs, config.steps, &ds.rules)?;
        let report = format!("training set\n{}", MetricsReport::from_folds(vec![metrics]).to_table());
        write_file(&dir.join("metrics.log"), log.as_bytes())?;
        write_file(&dir.join("report.txt"), report.as_bytes())?;
        out.write_all(report.as_bytes())?;
        return Ok(());
    }

    let items: Vec<_> = ds.episodes.iter().map(|e| (e.id, e.label)).collect();
    let split = kfold_split(&items, folds, config.seed)?;
    let outcome = run_cv(&ds.episodes, &ds.rules, &split, &config, |f, s, m| {
        on_epoch(format!("fold {f}\t"), s, m)
    })?;
    for (f, model) in outcome.models.iter().enumerate() {
        save_checkpoint(model, &dir.join(format!("fold{f}.ckpt")))?;
    }
    let report = outcome.report.to_table();
    write_file(&dir.join("metrics.log"), log.as_bytes())?;
    write_file(&dir.join("report.txt"), report.as_bytes())?;
    out.write_all(report.as_bytes())?;
    Ok(())
}

/// Loads a checkpoint and a dataset and checks that they fit together.
fn load_pair(checkpoint: &Path, data: &Path) -> CliResult<(Cemformer, Dataset)> {
    let model = load_checkpoint(checkpoint)?;
    let ds = read_dataset(data)?;
    let n_classes = model.config().encoder.n_classes;
    if n_classes != ds.manifest.classes.len() {
        return Err(CliError::Data(format!(
            "checkpoint predicts {n_classes} classes, dataset has {}",
            ds.manifest.classes.len()
        )));
    }
    if model.config().views != ds.manifest.views {
        return Err(CliError::Data(format!(
            "checkpoint expects views {:?}, dataset has {:?}",
            model.config().views,
            ds.manifest.views
        )));
    }
    Ok((model, ds))
}

fn eval(
    data: &Path,
    checkpoint: &Path,
    rules: Option<&Path>,
    steps: Option<usize>,
    out: &mut dyn Write,
) -> CliResult<()> {
    let (model, ds) = load_pair(checkpoint, data)?;
    let rules = load_rules(rules, &ds.rules)?;
    let steps = steps.unwrap_or_else(|| TrainConfig::default().steps.min(ds.manifest.frames));
    let refs: Vec<_> = ds.episodes.iter().collect();
    let metrics = evaluate(&model, &refs, steps, &rules)?;
    let mut text = MetricsReport::from_folds(vec![metrics.clone()]).to_table();
    text += "class\tprecision\trecall\tf1\n";
    for (name, s) in ds.manifest.classes.iter().zip(&metrics.per_class) {
        text += &format!("{name}\t{:.4}\t{:.4}\t{:.4}\n", s.precision, s.recall, s.f1);
    }
    out.write_all(text.as_bytes())?;
    Ok(())
}

fn find_episode(ds: &Dataset, id: u64) -> CliResult<&cemformer::episodes::Episode> {
    ds.episodes
        .iter()
        .find(|e| e.id == id)
        .ok_or_else(|| CliError::Data(format!("no episode with id {id}")))
}

fn infer(checkpoint: &Path, data: &Path, id: u64, out: &mut dyn Write) -> CliResult<()> {
    let (model, ds) = load_pair(checkpoint, data)?;
    let ep = find_episode(&ds, id)?;
    let mut session = InferenceSession::new(Arc::new(model), false);
    for frame in &ep.frames {
        let p = session.feed(frame)?;
        let probs: Vec<String> = p.probs.iter().map(|v| format!("{v:.6}")).collect();
        writeln!(out, "{}\t{}\t{}", session.t(), probs.join("\t"), ds.manifest.classes[p.label])?;
    }
    Ok(())
}

fn attn(checkpoint: &Path, data: &Path, id: u64, dir: &Path, out: &mut dyn Write) -> CliResult<()> {
    let (model, ds) = load_pair(checkpoint, data)?;
    let ep = find_episode(&ds, id)?;
    let mut session = InferenceSession::new(Arc::new(model), true);
    for frame in &ep.frames {
        session.feed(frame)?;
    }
    let written = export_attention(&session, dir)?;
    writeln!(out, "wrote {} files to {}", written.len(), dir.display())?;
    Ok(())
}

fn gradcheck(config: Option<&Path>, out: &mut dyn Write) -> CliResult<()> {
    let setup = match config {
        Some(p) => GradCheckSetup::from_toml(&read_text(p)?)?,
        None => GradCheckSetup::default(),
    };
    let report = setup.run(&brain4cars_rules())?;
    writeln!(
        out,
        "coordinates {}\tmax_rel_err {:.3e}\tmax_abs_err {:.3e}\ttol {:.1e}\tworst {:?}",
        report.coordinates, report.max_rel_err, report.max_abs_err, report.tol, report.worst
    )?;
    if !report.passed {
        return Err(CliError::GradCheck(format!(
            "max relative error {:.3e} exceeds {:.1e}",
            report.max_rel_err, report.tol
        )));
    }
    writeln!(out, "ok")?;
    Ok(())
}

/// Smooth deterministic frames shaped for `model`.
fn synthetic_frames(model: &Cemformer, count: usize) -> CliResult<Vec<MultiViewFrame>> {
    (0..count)
        .map(|t| {
            let views = model
                .config()
                .views
                .iter()
                .map(|g| {
                    let n = g.channels * g.height * g.width;
                    let px = (0..n)
                        .map(|i| 0.5 + 0.5 * ((i + 7 * t) as f32 * 0.37).sin())
                        .collect();
                    Image::new(g.channels, g.height, g.width, px)
                })
                .collect::<cemformer::Result<Vec<_>>>()?;
            Ok(MultiViewFrame::new(views)?)
        })
        .collect()
}

fn fps(checkpoint: &Path, n: usize, data: Option<&Path>, out: &mut dyn Write) -> CliResult<()> {
    if n == 0 {
        return Err(CliError::Data("--n must be positive".into()));
    }
    let (model, frames) = match data {
        Some(d) => {
            let (model, ds) = load_pair(checkpoint, d)?;
            let ep = ds
                .episodes
                .into_iter()
                .next()
                .ok_or_else(|| CliError::Data(format!("{} holds no episodes", d.display())))?;
            (model, ep.frames)
        }
        None => {
            let model = load_checkpoint(checkpoint)?;
            let frames = synthetic_frames(&model, 5)?;
            (model, frames)
        }
    };
    let report = fps_report(Arc::new(model), &frames, n)?;
    writeln!(out, "{report}")?;
    Ok(())
}
