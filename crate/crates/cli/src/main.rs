mod config;

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sloshnet::checks::{model_checks, op_checks};
use sloshnet::data::{generate_dataset, write_dataset, Catalog, VideoConfig};
use sloshnet::model::Model;
use sloshnet::trainer::{ablate, evaluate, load_checkpoint, metrics_csv, save_checkpoint, train_model, AblationRow, Suite};
use sloshnet::Error;

use config::RunConfig;

#[derive(Parser)]
#[command(name = "sloshnet", version, about = "Few-shot action recognition on synthetic videos")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset file.
    GenData {
        #[arg(long, default_value = "default")]
        catalog: String,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Run configuration supplying the video geometry.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train a model and write its checkpoint and per-episode metrics.
    Train {
        #[command(flatten)]
        run: RunFlags,
        #[arg(long)]
        out_checkpoint: Option<PathBuf>,
        #[arg(long)]
        metrics: Option<PathBuf>,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on held-out episodes.
    Eval {
        #[command(flatten)]
        run: RunFlags,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        tasks: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compare analytic gradients with central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// One tolerance for every check instead of the per-check defaults.
        #[arg(long)]
        tolerance: Option<f64>,
    },
    /// Train and evaluate every variant of an ablation table; prints CSV.
    Ablate {
        #[command(flatten)]
        run: RunFlags,
        #[arg(long)]
        suite: String,
    },
    /// Print the learned fusion weights of a checkpoint as CSV.
    InspectAlpha {
        #[command(flatten)]
        run: RunFlags,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunFlags {
    /// TOML run configuration; flags take precedence over its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    catalog: Option<String>,
    /// Sample episodes from a stored dataset instead of the generator.
    #[arg(long)]
    dataset: Option<PathBuf>,
}

impl RunFlags {
    fn load(&self) -> sloshnet::Result<RunConfig> {
        let mut rc = RunConfig::load(self.config.as_deref())?;
        if self.catalog.is_some() {
            rc.catalog = self.catalog.clone();
        }
        if self.dataset.is_some() {
            rc.dataset = self.dataset.clone();
        }
        Ok(rc)
    }
}

enum Failure {
    Check(String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Lib(e.into())
    }
}

fn required(path: Option<PathBuf>, what: &str) -> Result<PathBuf, Failure> {
    path.ok_or_else(|| Error::Config(format!("no {what} given (flag or config key)")).into())
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut out = std::io::stdout().lock();
    match cli.command {
        Command::GenData { catalog, count, seed, out: path, config } => {
            let video = match config {
                Some(p) => RunConfig::load(Some(&p))?.train_config()?.video,
                None => VideoConfig::default(),
            };
            let catalog: Catalog = catalog.parse()?;
            let videos = generate_dataset(&catalog.classes(), count, seed, &video)?;
            write_dataset(&path, &videos)?;
            writeln!(out, "wrote {} videos to {}", videos.len(), path.display())?;
            let mut histogram = BTreeMap::new();
            for v in &videos {
                *histogram.entry(v.label).or_insert(0usize) += 1;
            }
            for (label, n) in histogram {
                writeln!(out, "class {label} {n}")?;
            }
        }
        Command::Train { run, out_checkpoint, metrics, episodes, lr, seed } => {
            let mut rc = run.load()?;
            rc.episodes = episodes.or(rc.episodes);
            rc.lr = lr.or(rc.lr);
            rc.seed = seed.or(rc.seed);
            let cfg = rc.train_config()?;
            let checkpoint = required(out_checkpoint.or(rc.checkpoint.clone()), "checkpoint path")?;
            let source = rc.source(&cfg)?;
            let mut model = Model::new(cfg.model.clone())?;
            let log = train_model(&mut model, &cfg, &source, |m| {
                if m.episode % 100 == 0 {
                    eprintln!("episode {} loss {:.4} accuracy {:.3}", m.episode, m.loss, m.accuracy);
                }
            })?;
            save_checkpoint(&checkpoint, &model)?;
            if let Some(path) = metrics.or(rc.metrics) {
                std::fs::write(path, metrics_csv(&log))?;
            }
            // Mean over the last 100 episodes.
            let tail = &log[log.len().saturating_sub(100)..];
            let acc = if tail.is_empty() { f64::NAN } else { tail.iter().map(|m| m.accuracy).sum::<f64>() / tail.len() as f64 };
            writeln!(out, "train accuracy {acc}")?;
        }
        Command::Eval { run, checkpoint, tasks, seed } => {
            let rc = run.load()?;
            let cfg = rc.train_config()?;
            let path = required(checkpoint.or(rc.checkpoint.clone()), "checkpoint path")?;
            let model = load_checkpoint(&path, &cfg.model)?;
            let r = evaluate(&model, &cfg, &rc.source(&cfg)?, tasks.unwrap_or(cfg.eval_tasks), seed.unwrap_or(cfg.eval_seed))?;
            writeln!(out, "accuracy {} stderr {}", r.mean, r.stderr)?;
        }
        Command::Gradcheck { seed, tolerance } => {
            let mut failing = Vec::new();
            for check in op_checks(seed)?.into_iter().chain(model_checks(seed)?) {
                let tol = tolerance.unwrap_or(check.tolerance);
                let pass = check.report.passes(tol);
                writeln!(out, "{:<16} max_rel_error {:.3e} {}", check.name, check.report.max_rel_error, if pass { "PASS" } else { "FAIL" })?;
                if !pass {
                    failing.push(check.name);
                }
            }
            if !failing.is_empty() {
                return Err(Failure::Check(format!("gradient check failed: {}", failing.join(", "))));
            }
        }
        Command::Ablate { run, suite } => {
            let suite: Suite = suite.parse()?;
            let cfg = run.load()?.train_config()?;
            let rows = ablate(&cfg, suite, |r| eprintln!("{} {:.4} +- {:.4}", r.variant, r.accuracy, r.stderr))?;
            write!(out, "{}", AblationRow::csv(&rows))?;
        }
        Command::InspectAlpha { run, checkpoint } => {
            let rc = run.load()?;
            let cfg = rc.train_config()?;
            let path = required(checkpoint.or(rc.checkpoint.clone()), "checkpoint path")?;
            let model = load_checkpoint(&path, &cfg.model)?;
            let weights = model.search_weights().ok_or_else(|| Error::Config("the checkpoint's model has fusion disabled".into()))?;
            write!(out, "{}", weights.to_csv())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(msg)) => {
            eprintln!("{msg}");
            ExitCode::from(1)
        }
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if matches!(e, Error::Divergence { .. }) { 3 } else { 2 })
        }
    }
}
