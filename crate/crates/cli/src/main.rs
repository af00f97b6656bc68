//! `flim`: train, detect, evaluate and serve.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use flim_core::builder::{load_training_images, BuildSession};
use flim_core::encoder::DEFAULT_EPSILON;
use flim_core::metrics::{curves_csv, pair_with_ground_truth};
use flim_core::project::read_ground_truth_dir;
use flim_core::synthetic::{write_fixture, SyntheticConfig};
use flim_core::{
    detect, evaluate, load_model, load_png, load_project, save_model, Architecture, DetectionSet, Heuristic,
};
use flim_service::AppState;

#[derive(Parser)]
#[command(name = "flim", version, about = "Object detection with encoders built from user scribbles")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Profile {
    Parasite,
    Ship,
}

impl From<Profile> for Heuristic {
    fn from(p: Profile) -> Self {
        match p {
            Profile::Parasite => Heuristic::Parasite,
            Profile::Ship => Heuristic::Ship,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Build a model from the project's marked images and export it to <project>/model.
    Train {
        #[arg(long)]
        project: PathBuf,
        /// Architecture JSON (layer specs, heuristic, optional selections).
        #[arg(long)]
        arch: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Keep every candidate kernel even where the architecture lists a selection.
        #[arg(long)]
        no_selection: bool,
    },
    /// Run a model over every PNG in a directory.
    Detect {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        images: PathBuf,
        /// Output JSON array of detection sets.
        #[arg(long)]
        out: PathBuf,
        /// Worker threads; 0 uses every core.
        #[arg(long, default_value_t = 0)]
        jobs: usize,
    },
    /// Score detections against ground-truth boxes.
    Eval {
        #[arg(long)]
        dets: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Metrics JSON.
        #[arg(long)]
        out: PathBuf,
        /// Per-threshold precision/recall points as CSV.
        #[arg(long)]
        curves: Option<PathBuf>,
    },
    /// Start the builder HTTP service.
    Serve {
        #[arg(long)]
        project: Option<PathBuf>,
        #[arg(long, env = "FLIM_PORT", default_value_t = 8765,
              value_parser = clap::value_parser!(u16).range(1..))]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a synthetic project plus held-out images and ground truth.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "parasite")]
        profile: Profile,
        #[arg(long, default_value_t = 128)]
        size: usize,
        #[arg(long, default_value_t = 20)]
        images: usize,
        #[arg(long, default_value_t = 5)]
        train: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Print a model summary as JSON.
    Inspect {
        #[arg(long)]
        model: PathBuf,
    },
    /// Print a built-in architecture profile as JSON.
    Arch {
        #[arg(value_enum)]
        profile: Profile,
    },
}

/// Bad invocation; exits with status 2.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn write_json<T: serde::Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn train(project: &Path, arch: &Path, seed: u64, no_selection: bool) -> Result<()> {
    if !arch.is_file() {
        return Err(usage(format!("architecture file not found: {}", arch.display())));
    }
    let arch = Architecture::load(arch).map_err(|e| usage(e.to_string()))?;
    let project = load_project(project)?;
    let training = load_training_images(&project)?;
    log::info!("training on {} marked images", training.len());
    let mut session = BuildSession::new(training, arch.heuristic, arch.postproc(), seed)
        .with_epsilon(arch.epsilon.unwrap_or(DEFAULT_EPSILON));
    let model = arch.train(&mut session, !no_selection)?;
    let dir = project.model_dir();
    save_model(&model, &dir)?;
    println!(
        "{}",
        serde_json::json!({
            "model": dir,
            "layers": model.num_layers(),
            "parameters": model.count_parameters(true),
        })
    );
    Ok(())
}

fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .is_some_and(|e| e.eq_ignore_ascii_case("png"))
        })
        .collect();
    files.sort();
    Ok(files)
}

fn detect_dir(model: &Path, images: &Path, out: &Path, jobs: usize) -> Result<()> {
    let model = load_model(model)?;
    let files = png_files(images)?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs).build()?;
    let results: Vec<_> = pool.install(|| {
        files
            .par_iter()
            .map(|path| {
                let id = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
                let image = load_png(path)?;
                detect(&image, &model, &id)
            })
            .collect()
    });
    let mut sets: Vec<DetectionSet> = Vec::with_capacity(results.len());
    let mut failed = 0;
    for (path, r) in files.iter().zip(results) {
        match r {
            Ok(d) => sets.push(d),
            Err(e) => {
                failed += 1;
                log::warn!("skipping {}: {e}", path.display());
            }
        }
    }
    write_json(out, &sets)?;
    if failed > 0 && sets.is_empty() {
        return Err(anyhow!("all {failed} images failed"));
    }
    log::info!("{} images, {} boxes", sets.len(), sets.iter().map(|d| d.boxes.len()).sum::<usize>());
    Ok(())
}

fn eval(dets: &Path, gt: &Path, out: &Path, curves: Option<&Path>) -> Result<()> {
    let text = fs::read_to_string(dets).with_context(|| format!("reading {}", dets.display()))?;
    let dets: Vec<DetectionSet> =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", dets.display()))?;
    if !gt.is_dir() {
        return Err(anyhow!("ground-truth directory not found: {}", gt.display()));
    }
    let gts = read_ground_truth_dir(gt)?;
    let images = pair_with_ground_truth(&dets, &gts)?;
    let evaluation = evaluate(&images)?;
    write_json(out, &evaluation.report)?;
    if let Some(path) = curves {
        fs::write(path, curves_csv(&evaluation.curves))
            .with_context(|| format!("writing {}", path.display()))?;
    }
    println!("{}", serde_json::to_string(&evaluation.report)?);
    Ok(())
}

fn serve(project: Option<&Path>, host: &str, port: u16, seed: u64) -> Result<()> {
    let state = AppState::new(seed);
    if let Some(p) = project {
        let handle = state.open_project(p)?;
        log::info!("project '{}' at {}", handle.id, handle.path.display());
    }
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind((host, port))
            .await
            .with_context(|| format!("binding {host}:{port}"))?;
        flim_service::serve(listener, state).await?;
        Ok(())
    })
}

fn synth(out: &Path, profile: Profile, cfg: SyntheticConfig) -> Result<()> {
    if cfg.train == 0 || cfg.train > cfg.images {
        return Err(usage("--train must be between 1 and --images"));
    }
    let paths = write_fixture(out, &cfg, profile.into())?;
    println!(
        "{}",
        serde_json::json!({
            "project": paths.project,
            "holdout_images": paths.holdout_images,
            "holdout_gt": paths.holdout_gt,
        })
    );
    Ok(())
}

fn inspect(model: &Path) -> Result<()> {
    let model = load_model(model)?;
    let layers: Vec<_> = model
        .layers()
        .iter()
        .map(|l| {
            serde_json::json!({
                "spec": l.spec,
                "input_channels": l.input_channels(),
                "candidates": l.bank.len(),
                "selected": l.selected,
            })
        })
        .collect();
    let summary = serde_json::json!({
        "heuristic": model.heuristic(),
        "postproc": model.postproc(),
        "layers": layers,
        "parameters": {
            "all": model.count_parameters(false),
            "selected": model.count_parameters(true),
        },
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { project, arch, seed, no_selection } => train(&project, &arch, seed, no_selection),
        Command::Detect { model, images, out, jobs } => detect_dir(&model, &images, &out, jobs),
        Command::Eval { dets, gt, out, curves } => eval(&dets, &gt, &out, curves.as_deref()),
        Command::Serve { project, port, host, seed } => serve(project.as_deref(), &host, port, seed),
        Command::Synth { out, profile, size, images, train, seed } => {
            synth(&out, profile, SyntheticConfig { size, images, train, seed })
        }
        Command::Inspect { model } => inspect(&model),
        Command::Arch { profile } => {
            let arch = match profile {
                Profile::Parasite => Architecture::parasite(),
                Profile::Ship => Architecture::ship(),
            };
            println!("{}", arch.to_json_pretty());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is::<UsageError>() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
