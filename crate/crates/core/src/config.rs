//! Resolved run configuration and its `key = value` text form.
//!
//! Sources are layered per key: command-line flag, then `ICNT_THREADS` for the
//! thread count, then the config file, then defaults. Defaults for the head
//! switches and the smoothing weight follow the preset; learning rate and
//! epoch count follow the schedule.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use indexmap::IndexMap;

use crate::data::SplitSpec;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Preset};
use crate::optim::AdamConfig;
use crate::train::TrainConfig;

pub const THREADS_ENV: &str = "ICNT_THREADS";

/// Raw `key -> value` pairs from one source, in file order.
pub type Settings = IndexMap<String, String>;

/// Every accepted key, in the order `run_config.txt` lists them.
pub const KEYS: &[&str] = &[
    "model.preset",
    "model.full_size",
    "model.image_size",
    "model.in_channels",
    "head.r",
    "head.hidden",
    "head.dropout",
    "head.gmp",
    "head.sevector",
    "loss.lambda_fs",
    "train.schedule",
    "train.lr",
    "train.beta1",
    "train.beta2",
    "train.eps",
    "train.batch",
    "train.epochs",
    "train.seed",
    "train.threads",
    "split.train",
    "split.val",
    "split.test",
    "split.seed",
    "split.stratified",
    "paths.data",
    "paths.out",
    "paths.checkpoint",
];

/// Keys that fix the network layout; a checkpoint and a run must agree on them.
pub const MODEL_KEYS: &[&str] = &[
    "model.preset",
    "model.full_size",
    "model.image_size",
    "model.in_channels",
    "head.r",
    "head.hidden",
    "head.dropout",
    "head.gmp",
    "head.sevector",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Schedule {
    /// 10 epochs at 5e-6.
    Short,
    /// 20 epochs at 1e-5.
    Extended,
}

impl Schedule {
    pub fn name(self) -> &'static str {
        match self {
            Schedule::Short => "short",
            Schedule::Extended => "extended",
        }
    }

    pub fn train_config(self) -> TrainConfig {
        match self {
            Schedule::Short => TrainConfig::default(),
            Schedule::Extended => TrainConfig::extended(),
        }
    }
}

impl FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "short" => Ok(Schedule::Short),
            "extended" => Ok(Schedule::Extended),
            other => Err(Error::Config(format!("unknown schedule {other:?} (expected short or extended)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: Preset,
    pub full_size: bool,
    pub image_size: usize,
    pub in_channels: usize,
    pub head_reduction: usize,
    pub head_hidden: usize,
    pub head_dropout: f64,
    pub use_gmp: bool,
    pub use_sevector: bool,
    pub schedule: Schedule,
    pub train: TrainConfig,
    pub split: SplitSpec,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::resolve(&Settings::new(), None, &Settings::new()).expect("defaults resolve")
    }
}

/// Parses `key = value` lines. Blank lines and lines starting with `#` are
/// skipped, as is anything after a ` #`.
pub fn parse_settings(text: &str) -> Result<Settings> {
    let mut out = Settings::new();
    for (i, raw) in text.lines().enumerate() {
        let line = match raw.find(" #") {
            Some(at) => &raw[..at],
            None => raw,
        }
        .trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got {raw:?}", i + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if !KEYS.contains(&k) {
            return Err(Error::Config(format!("line {}: unknown key {k:?}", i + 1)));
        }
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key {k:?}", i + 1)));
        }
    }
    Ok(out)
}

pub fn load_settings(path: &Path) -> Result<Settings> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_settings(&text).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {value:?}"))),
    }
}

impl RunConfig {
    /// Merges the sources; `flags` wins over `env_threads`, which wins over `file`.
    pub fn resolve(file: &Settings, env_threads: Option<&str>, flags: &Settings) -> Result<Self> {
        for k in file.keys().chain(flags.keys()) {
            if !KEYS.contains(&k.as_str()) {
                return Err(Error::Config(format!("unknown key {k:?}")));
            }
        }
        let pick = |k: &str| -> Option<&str> {
            if let Some(v) = flags.get(k) {
                return Some(v.as_str());
            }
            if k == "train.threads" {
                if let Some(v) = env_threads {
                    return Some(v);
                }
            }
            file.get(k).map(String::as_str)
        };

        let preset: Preset = pick("model.preset").map_or(Ok(Preset::Icnt), str::parse)?;
        let schedule: Schedule = pick("train.schedule").map_or(Ok(Schedule::Short), str::parse)?;
        let full_size = pick("model.full_size").map_or(Ok(false), |v| parse_bool("model.full_size", v))?;
        let in_channels = pick("model.in_channels").map_or(Ok(1), |v| parse("model.in_channels", v))?;
        let base = ModelConfig::preset(preset, 2, in_channels, full_size);
        let train_defaults = schedule.train_config();
        let split_defaults = SplitSpec::default();

        let get_usize = |k: &str, d: usize| pick(k).map_or(Ok(d), |v| parse::<usize>(k, v));
        let get_u64 = |k: &str, d: u64| pick(k).map_or(Ok(d), |v| parse::<u64>(k, v));
        let get_f64 = |k: &str, d: f64| pick(k).map_or(Ok(d), |v| parse::<f64>(k, v));
        let get_bool = |k: &str, d: bool| pick(k).map_or(Ok(d), |v| parse_bool(k, v));
        let get_path = |k: &str| pick(k).filter(|v| !v.is_empty()).map(PathBuf::from);

        let seed = get_u64("train.seed", 0)?;
        let config = Self {
            preset,
            full_size,
            image_size: get_usize("model.image_size", base.image_size)?,
            in_channels,
            head_reduction: get_usize("head.r", base.head.reduction)?,
            head_hidden: get_usize("head.hidden", base.head.hidden)?,
            head_dropout: get_f64("head.dropout", base.head.dropout)?,
            use_gmp: get_bool("head.gmp", base.head.use_gmp)?,
            use_sevector: get_bool("head.sevector", base.head.use_sevector)?,
            schedule,
            train: TrainConfig {
                adam: AdamConfig {
                    lr: get_f64("train.lr", train_defaults.adam.lr)?,
                    beta1: get_f64("train.beta1", train_defaults.adam.beta1)?,
                    beta2: get_f64("train.beta2", train_defaults.adam.beta2)?,
                    eps: get_f64("train.eps", train_defaults.adam.eps)?,
                },
                batch_size: get_usize("train.batch", train_defaults.batch_size)?,
                epochs: get_usize("train.epochs", train_defaults.epochs)?,
                seed,
                worker_threads: get_usize("train.threads", train_defaults.worker_threads)?,
                lambda_fs: get_f64("loss.lambda_fs", preset.default_lambda_fs())?,
            },
            split: SplitSpec {
                train: get_f64("split.train", split_defaults.train)?,
                val: get_f64("split.val", split_defaults.val)?,
                test: get_f64("split.test", split_defaults.test)?,
                seed: get_u64("split.seed", seed)?,
                stratified: get_bool("split.stratified", split_defaults.stratified)?,
            },
            data: get_path("paths.data"),
            out: get_path("paths.out"),
            checkpoint: get_path("paths.checkpoint"),
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.split.validate()?;
        if !(0.0..1.0).contains(&self.head_dropout) {
            return Err(Error::Config(format!("head.dropout must be in [0, 1), got {}", self.head_dropout)));
        }
        if self.in_channels != 1 && self.in_channels != 3 {
            return Err(Error::Config(format!("model.in_channels must be 1 or 3, got {}", self.in_channels)));
        }
        self.model_config(2)?;
        Ok(())
    }

    /// Network configuration for `n_class` classes.
    pub fn model_config(&self, n_class: usize) -> Result<ModelConfig> {
        let mut m = ModelConfig::preset(self.preset, n_class, self.in_channels, self.full_size);
        m.image_size = self.image_size;
        m.head.reduction = self.head_reduction;
        m.head.hidden = self.head_hidden;
        m.head.dropout = self.head_dropout;
        m.head.use_gmp = self.use_gmp;
        m.head.use_sevector = self.use_sevector;
        let stride = m.backbone.total_stride();
        if self.image_size == 0 || !self.image_size.is_multiple_of(stride) {
            return Err(Error::Config(format!(
                "model.image_size must be a positive multiple of {stride} for preset {}, got {}",
                self.preset, self.image_size
            )));
        }
        m.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(m)
    }

    /// Every key with its resolved value; unset paths are left out.
    pub fn to_settings(&self) -> Settings {
        let mut s = Settings::new();
        let mut put = |k: &str, v: String| {
            s.insert(k.to_string(), v);
        };
        put("model.preset", self.preset.to_string());
        put("model.full_size", self.full_size.to_string());
        put("model.image_size", self.image_size.to_string());
        put("model.in_channels", self.in_channels.to_string());
        put("head.r", self.head_reduction.to_string());
        put("head.hidden", self.head_hidden.to_string());
        put("head.dropout", self.head_dropout.to_string());
        put("head.gmp", self.use_gmp.to_string());
        put("head.sevector", self.use_sevector.to_string());
        put("loss.lambda_fs", self.train.lambda_fs.to_string());
        put("train.schedule", self.schedule.name().to_string());
        put("train.lr", self.train.adam.lr.to_string());
        put("train.beta1", self.train.adam.beta1.to_string());
        put("train.beta2", self.train.adam.beta2.to_string());
        put("train.eps", self.train.adam.eps.to_string());
        put("train.batch", self.train.batch_size.to_string());
        put("train.epochs", self.train.epochs.to_string());
        put("train.seed", self.train.seed.to_string());
        put("train.threads", self.train.worker_threads.to_string());
        put("split.train", self.split.train.to_string());
        put("split.val", self.split.val.to_string());
        put("split.test", self.split.test.to_string());
        put("split.seed", self.split.seed.to_string());
        put("split.stratified", self.split.stratified.to_string());
        for (k, p) in [("paths.data", &self.data), ("paths.out", &self.out), ("paths.checkpoint", &self.checkpoint)] {
            if let Some(p) = p {
                put(k, p.display().to_string());
            }
        }
        s
    }

    /// `run_config.txt` contents; feeding them back as a config file resolves
    /// to the same configuration.
    pub fn to_text(&self) -> String {
        let mut out = String::from("# resolved run configuration\n");
        for (k, v) in self.to_settings() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}
