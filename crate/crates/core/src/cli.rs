//! Command-line interface: `synth`, `train`, `eval`, `features`, `gradcheck`.
//!
//! Exit codes: 0 success, 1 runtime or verification failure, 2 usage or
//! configuration error.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{load_settings, RunConfig, Settings, THREADS_ENV};
use crate::error::{Error, Result};
use crate::gradsuite::{run_suite, Scope};
use crate::parallel::set_worker_threads;
use crate::pipeline::{self, SplitName};
use crate::synth::{write_synthetic_tree, SynthSpec};
use crate::train::EpochLog;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "iconvnext", version, about = "ConvNeXt-style classifier with dual pooling, channel attention and feature smoothing")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic ImageFolder tree of noisy gratings.
    Synth(SynthArgs),
    /// Train on an ImageFolder tree and save the best and last checkpoints.
    Train(CommonArgs),
    /// Evaluate a checkpoint on one split and write the metrics CSVs.
    Eval(CheckpointArgs),
    /// Dump pre-logits features of one split as CSV.
    Features(CheckpointArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, default_value_t = 50)]
    pub per_class: usize,
    /// Image side length in pixels.
    #[arg(long, visible_alias = "img-size", default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args, Default)]
pub struct CommonArgs {
    /// `key = value` config file; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// ImageFolder root.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory (for `features`, the CSV path).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seeds both initialisation/shuffling and the split.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads (falls back to ICNT_THREADS, then 8).
    #[arg(long)]
    pub threads: Option<usize>,
    /// icnt, cnt or basecnn.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lambda_fs: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub img_size: Option<usize>,
    /// 224 px inputs and the Tiny stage layout.
    #[arg(long)]
    pub full_size: bool,
    /// short (10 epochs at 5e-6) or extended (20 epochs at 1e-5).
    #[arg(long)]
    pub schedule: Option<String>,
}

#[derive(Debug, Args)]
pub struct CheckpointArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Checkpoint to load (defaults to the config's paths.checkpoint).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// train, val or test.
    #[arg(long, default_value = "test")]
    pub split: String,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// op, head, loss or full.
    #[arg(long, default_value = "full")]
    pub scope: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub threads: Option<usize>,
}

impl CommonArgs {
    /// Flag values as config settings.
    pub fn flag_settings(&self) -> Settings {
        let mut s = Settings::new();
        let mut put = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                s.insert(k.to_string(), v);
            }
        };
        put("paths.data", self.data.as_ref().map(|p| p.display().to_string()));
        put("paths.out", self.out.as_ref().map(|p| p.display().to_string()));
        put("train.seed", self.seed.map(|v| v.to_string()));
        put("split.seed", self.seed.map(|v| v.to_string()));
        put("train.threads", self.threads.map(|v| v.to_string()));
        put("model.preset", self.preset.clone());
        put("train.lr", self.lr.map(|v| v.to_string()));
        put("train.epochs", self.epochs.map(|v| v.to_string()));
        put("loss.lambda_fs", self.lambda_fs.map(|v| v.to_string()));
        put("train.batch", self.batch.map(|v| v.to_string()));
        put("model.image_size", self.img_size.map(|v| v.to_string()));
        put("model.full_size", self.full_size.then(|| "true".to_string()));
        put("train.schedule", self.schedule.clone());
        s
    }

    fn file_settings(&self) -> Result<Settings> {
        match &self.config {
            Some(p) if !p.is_file() => Err(Error::Config(format!("config file {} does not exist", p.display()))),
            Some(p) => load_settings(p),
            None => Ok(Settings::new()),
        }
    }

    /// File settings with flags layered on top.
    fn user_settings(&self) -> Result<Settings> {
        let mut s = self.file_settings()?;
        s.extend(self.flag_settings());
        Ok(s)
    }

    pub fn resolve(&self, env_threads: Option<&str>) -> Result<RunConfig> {
        RunConfig::resolve(&self.file_settings()?, env_threads, &self.flag_settings())
    }
}

/// Error class to exit code.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::InvalidArgument(_) => EXIT_USAGE,
        _ => EXIT_FAILURE,
    }
}

fn env_threads() -> Option<String> {
    std::env::var(THREADS_ENV).ok().filter(|v| !v.trim().is_empty())
}

fn init_threads(n: usize) -> Result<()> {
    // an already-built pool (e.g. a second in-process call) keeps its size
    if crate::parallel::configured_worker_threads().is_none() {
        if let Err(e) = set_worker_threads(n) {
            log::warn!("{e}");
        }
    }
    Ok(())
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn execute(command: Command) -> Result<i32> {
    let env = env_threads();
    match command {
        Command::Synth(a) => {
            let spec = SynthSpec::new(a.classes, a.per_class, a.size, a.seed);
            let files = write_synthetic_tree(&a.out, &spec)?;
            println!("wrote {} images in {} classes to {}", files.len(), a.classes, a.out.display());
            Ok(EXIT_OK)
        }
        Command::Train(a) => {
            let config = a.resolve(env.as_deref())?;
            init_threads(config.train.worker_threads)?;
            let run = pipeline::train(&config, |log| {
                if log.epoch == 1 {
                    println!("{}", EpochLog::CSV_HEADER);
                }
                println!("{}", log.csv_row());
            })?;
            println!(
                "best epoch {} val_acc {:.6}; checkpoint {}",
                run.outcome.best_epoch,
                run.outcome.best_val_acc,
                config.out.as_deref().unwrap_or(Path::new(".")).join(pipeline::BEST_CHECKPOINT_FILE).display()
            );
            Ok(EXIT_OK)
        }
        Command::Eval(a) => {
            let (which, ckpt) = checkpoint_target(&a)?;
            let (model, config, meta) = pipeline::open_checkpoint(&ckpt, env.as_deref(), &a.common.user_settings()?)?;
            init_threads(config.train.worker_threads)?;
            let out_dir = config.out.clone().unwrap_or_else(|| sibling(&ckpt, &format!("eval_{}", which.name())));
            let report = pipeline::evaluate_split(&model, &config, &meta, which, &out_dir)?;
            let m = &report.metrics;
            println!(
                "{} split, {} samples: accuracy {:.6} macro_f1 {:.6} weighted_f1 {:.6}",
                which.name(),
                report.labels.len(),
                m.accuracy,
                m.macro_avg.f1,
                m.weighted.f1
            );
            println!("reports in {}", out_dir.display());
            Ok(EXIT_OK)
        }
        Command::Features(a) => {
            let (which, ckpt) = checkpoint_target(&a)?;
            let (model, config, meta) = pipeline::open_checkpoint(&ckpt, env.as_deref(), &a.common.user_settings()?)?;
            init_threads(config.train.worker_threads)?;
            let out = config.out.clone().unwrap_or_else(|| sibling(&ckpt, &format!("features_{}.csv", which.name())));
            let rows = pipeline::dump_features(&model, &config, &meta, which, &out)?;
            println!("wrote {rows} rows to {}", out.display());
            Ok(EXIT_OK)
        }
        Command::Gradcheck(a) => {
            let scope: Scope = a.scope.parse()?;
            let threads = match (a.threads, env.as_deref()) {
                (Some(n), _) => n,
                (None, Some(v)) => v.parse().map_err(|_| Error::Config(format!("{THREADS_ENV}: cannot parse {v:?}")))?,
                (None, None) => crate::parallel::DEFAULT_WORKER_THREADS,
            };
            init_threads(threads)?;
            let report = run_suite(scope, a.seed)?;
            print!("{}", report.render());
            Ok(if report.passed() { EXIT_OK } else { EXIT_FAILURE })
        }
    }
}

fn checkpoint_target(a: &CheckpointArgs) -> Result<(SplitName, PathBuf)> {
    let which: SplitName = a.split.parse()?;
    let from_file = a.common.file_settings()?.get("paths.checkpoint").map(PathBuf::from);
    let ckpt = a
        .checkpoint
        .clone()
        .or(from_file)
        .ok_or_else(|| Error::Config("no checkpoint given (--checkpoint)".into()))?;
    Ok((which, ckpt))
}

fn sibling(path: &Path, name: &str) -> PathBuf {
    path.parent().unwrap_or(Path::new(".")).join(name)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_become_settings() {
        let cli = Cli::try_parse_from(["iconvnext", "train", "--seed", "3", "--lr", "0.0001", "--preset", "cnt"]).unwrap();
        let Command::Train(a) = cli.command else { panic!() };
        let c = a.resolve(None).unwrap();
        assert_eq!((c.train.seed, c.split.seed, c.train.adam.lr), (3, 3, 1e-4));
        assert!(!c.use_gmp);
    }

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(run(["iconvnext", "train", "--bogus"]), EXIT_USAGE);
        assert_eq!(run(["iconvnext", "gradcheck", "--scope", "nope"]), EXIT_USAGE);
        assert_eq!(run(["iconvnext", "train", "--data", "/no/such/dir", "--out", "/tmp/x"]), EXIT_USAGE);
        assert_eq!(run(["iconvnext", "--help"]), EXIT_OK);
    }

    #[test]
    fn error_classes_map_to_codes() {
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(exit_code(&Error::Dataset("x".into())), 1);
    }
}
