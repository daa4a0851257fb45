//! `fthnet` subcommands. [`run`] maps every outcome to an exit code:
//! 0 success, 1 invalid input or usage, 2 runtime failure.

pub mod config;

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use fthnet_core::bench::bench;
use fthnet_core::dataset::images::{check_min_size, load_rgb, prepare};
use fthnet_core::dataset::manifest::{load_manifest, save_manifest};
use fthnet_core::dataset::ratings::{aggregate_mos, level_from_score, rating_sd_stats, RaterTier, RatingRecord};
use fthnet_core::dataset::synth::{render, sample_spec};
use fthnet_core::dataset::synth_generate;
use fthnet_core::metrics::Metrics;
use fthnet_core::model::{checkpoint, Fthnet, FthnetConfig};
use fthnet_core::par::Executor;
use fthnet_core::trainer::{cross_validate, evaluate, load_samples, make_splits, TrainConfig};

use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl From<fthnet_core::Error> for CliError {
    fn from(e: fthnet_core::Error) -> Self {
        if e.is_validation() || matches!(e, fthnet_core::Error::Aggregation(_)) {
            CliError::Validation(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "fthnet", version, about = "Fundus image quality scoring with FTHNet")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// Model preset: l, l-deep, s, desk-s or tiny.
    #[arg(long, default_value = "desk-s")]
    model: String,
    /// Training profile: desk or full.
    #[arg(long, default_value = "desk")]
    profile: String,
    /// JSON file layered over the presets.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `train.lr_peak=1e-4` or `model.hypernet_mode=off`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig, CliError> {
        RunConfig::new(FthnetConfig::preset(&self.model)?, TrainConfig::profile(&self.profile)?)
            .layered(self.config.as_deref(), &self.overrides)
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic degraded-fundus dataset.
    Synth {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Cross-validated training; writes checkpoints, logs and a report.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Score a manifest with a checkpoint and print SRCC, PLCC, RMSE, Params.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Restrict to the test split of this training round.
        #[arg(long)]
        round: Option<usize>,
        /// Training seed that produced the splits (with --round).
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the row as CSV here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score individual images.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(required = true)]
        images: Vec<PathBuf>,
        /// Also write `image,score,level` CSV here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Single-image latency on this machine.
    Bench {
        /// Weights to time; random weights of the --model preset otherwise.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Image to score; a synthetic one otherwise.
        #[arg(long)]
        image: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        warmup: usize,
        #[arg(long, default_value_t = 10)]
        trials: usize,
        /// Write the JSON report here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Recompute MOS from a manifest's raw rating columns and report rating SDs.
    Aggregate {
        #[arg(long)]
        manifest: PathBuf,
        /// Output manifest; `sd_stats.json` is written next to it.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Run the HTTP service (listen address from FTHNET_LISTEN or --listen).
    Serve {
        #[arg(long)]
        checkpoint_s: Option<PathBuf>,
        #[arg(long)]
        checkpoint_l: Option<PathBuf>,
        /// Annotation store directory.
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        listen: Option<std::net::SocketAddr>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

/// Parse `argv` (including the program name), run, and return the exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Synth { n, out, seed, cfg } => {
            let cfg = cfg.resolve()?;
            let records = synth_generate(n, &cfg.synth, seed, &out, cfg.train.executor)?;
            println!("wrote {} images and manifest.csv to {}", records.len(), out.display());
            Ok(())
        }
        Command::Train { manifest, out, cfg } => train(&manifest, &out, &cfg.resolve()?),
        Command::Eval {
            manifest,
            checkpoint,
            round,
            seed,
            out,
        } => eval(&manifest, &checkpoint, round, seed, out.as_deref()),
        Command::Infer {
            checkpoint,
            images,
            out,
            cfg,
        } => infer(&checkpoint, &images, out.as_deref(), &cfg.resolve()?),
        Command::Bench {
            checkpoint,
            image,
            warmup,
            trials,
            out,
            cfg,
        } => {
            let model = cfg.model.clone();
            run_bench(&model, checkpoint.as_deref(), image.as_deref(), warmup, trials, out.as_deref(), &cfg.resolve()?)
        }
        Command::Aggregate { manifest, out, cfg } => aggregate(&manifest, &out, &cfg.resolve()?),
        Command::Serve {
            checkpoint_s,
            checkpoint_l,
            store,
            listen,
            cfg,
        } => serve(checkpoint_s, checkpoint_l, &store, listen, &cfg.resolve()?),
    }
}

fn train(manifest: &Path, out: &Path, cfg: &RunConfig) -> Result<(), CliError> {
    let records = load_manifest(manifest)?;
    let samples = load_samples(manifest, &records, cfg.train.executor)?;
    std::fs::create_dir_all(out)?;
    std::fs::write(
        out.join("config.json"),
        serde_json::to_string_pretty(cfg).map_err(|e| CliError::Runtime(e.to_string()))?,
    )?;
    let report = cross_validate(&samples, &cfg.model, &cfg.train, Some(out), |r, line| {
        log::info!("round {r} {line}");
    })?;
    println!("round,srcc,plcc,rmse");
    for r in &report.rounds {
        println!("{},{},{},{}", r.round, r.metrics.srcc, r.metrics.plcc, r.metrics.rmse);
    }
    println!(
        "mean SRCC {:.4} ± {:.4}  PLCC {:.4} ± {:.4}  RMSE {:.3} ± {:.3}",
        report.mean.srcc, report.std.srcc, report.mean.plcc, report.std.plcc, report.mean.rmse, report.std.rmse
    );
    Ok(())
}

fn eval(manifest: &Path, ckpt: &Path, round: Option<usize>, seed: u64, out: Option<&Path>) -> Result<(), CliError> {
    let net = checkpoint::load::<f32>(ckpt)?;
    let mut records = load_manifest(manifest)?;
    if let Some(r) = round {
        let plan = make_splits(records.len(), r + 1, seed)?;
        records = plan.rounds[r].test.iter().map(|&i| records[i].clone()).collect();
    }
    let samples = load_samples(manifest, &records, Executor::default())?;
    let m: Metrics = evaluate(&net, &samples, Executor::default())?;
    let header = "srcc,plcc,rmse,params";
    let row = format!("{},{},{},{}", m.srcc, m.plcc, m.rmse, net.count_params());
    println!("{header}\n{row}");
    if let Some(path) = out {
        std::fs::write(path, format!("{header}\n{row}\n"))?;
    }
    Ok(())
}

fn infer(ckpt: &Path, images: &[PathBuf], out: Option<&Path>, cfg: &RunConfig) -> Result<(), CliError> {
    let net = checkpoint::load::<f32>(ckpt)?;
    let size = net.config().input_size;
    let mut rows = Vec::new();
    for path in images {
        let img = load_rgb(path)?;
        check_min_size(&img)?;
        let score = net.predict(&prepare(&img, size))?.clamp(0.0, 100.0);
        let level = level_from_score(score, cfg.thresholds)?;
        rows.push(format!("{},{score},{level}", path.display()));
    }
    let mut text = String::from("image,score,level\n");
    for r in &rows {
        text.push_str(r);
        text.push('\n');
    }
    print!("{text}");
    if let Some(path) = out {
        std::fs::write(path, text)?;
    }
    Ok(())
}

fn run_bench(
    model: &str,
    ckpt: Option<&Path>,
    image: Option<&Path>,
    warmup: usize,
    trials: usize,
    out: Option<&Path>,
    cfg: &RunConfig,
) -> Result<(), CliError> {
    let net = match ckpt {
        Some(p) => checkpoint::load::<f32>(p)?,
        None => Fthnet::new(cfg.model.clone(), 0)?,
    };
    let size = net.config().input_size;
    let img = match image {
        Some(p) => load_rgb(p)?,
        None => render(&cfg.synth, &sample_spec(0, 0))?,
    };
    let report = bench(model, &net, &prepare(&img, size), warmup, trials)?;
    println!("model,params,gflops,mean_ms,min_ms,p95_ms,reference_gpu_ms");
    println!(
        "{},{},{:.3},{:.2},{:.2},{:.2},{}",
        report.model,
        report.params,
        report.flops as f64 / 1e9,
        report.mean_ms,
        report.min_ms,
        report.p95_ms,
        report.reference_gpu_ms.map_or("-".to_string(), |v| v.to_string())
    );
    if let Some(path) = out {
        std::fs::write(
            path,
            serde_json::to_string_pretty(&report).map_err(|e| CliError::Runtime(e.to_string()))?,
        )?;
    }
    Ok(())
}

fn aggregate(manifest: &Path, out: &Path, cfg: &RunConfig) -> Result<(), CliError> {
    let mut records = load_manifest(manifest)?;
    let mut per_image = Vec::with_capacity(records.len());
    for (n, r) in records.iter_mut().enumerate() {
        let ratings: Vec<RatingRecord> = r
            .experienced
            .iter()
            .enumerate()
            .map(|(i, &s)| (format!("e{}", i + 1), RaterTier::Experienced, s))
            .chain(r.junior.iter().enumerate().map(|(i, &s)| (format!("j{}", i + 1), RaterTier::Junior, s)))
            .map(|(rater_id, tier, score)| RatingRecord {
                rater_id,
                tier,
                score,
                level: r.level,
            })
            .collect();
        r.mos = aggregate_mos(&ratings, &cfg.aggregation)
            .map_err(|e| CliError::Validation(format!("row {} (`{}`): {e}", n + 1, r.image_path)))?;
        r.level = level_from_score(r.mos, cfg.thresholds)?;
        per_image.push(ratings.iter().map(|x| f64::from(x.score)).collect::<Vec<_>>());
    }
    let stats = rating_sd_stats(&per_image);
    save_manifest(&records, out)?;
    let stats_path = out.with_file_name("sd_stats.json");
    let mut f = std::fs::File::create(&stats_path)?;
    f.write_all(
        serde_json::to_string_pretty(&stats)
            .map_err(|e| CliError::Runtime(e.to_string()))?
            .as_bytes(),
    )?;
    println!("aggregated {} images into {}", records.len(), out.display());
    match &stats.quartiles {
        Some(q) => println!(
            "rating SD quartiles: q25 {:.2}, q50 {:.2}, q75 {:.2} (half of the SDs are under {:.2})",
            q.q25, q.q50, q.q75, q.q50
        ),
        None => println!("no image has two or more ratings"),
    }
    if stats.skipped > 0 {
        log::warn!("{} images have fewer than two ratings and were left out of the SD summary", stats.skipped);
        println!("skipped {} images with fewer than two ratings", stats.skipped);
    }
    Ok(())
}

fn serve(
    s: Option<PathBuf>,
    l: Option<PathBuf>,
    store: &Path,
    listen: Option<std::net::SocketAddr>,
    cfg: &RunConfig,
) -> Result<(), CliError> {
    let mut models = HashMap::new();
    for (key, path) in [("s", s), ("l", l)] {
        if let Some(p) = path {
            models.insert(key.to_string(), checkpoint::load::<f32>(&p)?);
        }
    }
    if models.is_empty() {
        log::warn!("no checkpoint given; /v1/score will answer 503");
    }
    let store = fthnet_service::AnnotationStore::open(store).map_err(|e| CliError::Runtime(e.to_string()))?;
    let config = fthnet_service::ServiceConfig {
        limits: fthnet_service::Limits {
            in_flight: cfg.service.in_flight,
            queue_depth: cfg.service.queue_depth,
        },
        thresholds: cfg.thresholds,
        weights: cfg.aggregation,
        discuss_sd: cfg.service.discuss_sd,
    };
    let state = fthnet_service::AppState::new(models, store, config);
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(fthnet_service::serve(state, listen))?;
    Ok(())
}
