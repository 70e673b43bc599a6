//! The work behind each CLI command, callable in-process.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::checkpoint::{load_checkpoint, save_checkpoint, Meta};
use crate::config::{RunConfig, Settings, KEYS, MODEL_KEYS};
use crate::data::{load_samples, scan_image_folder, split_dataset, DatasetIndex, SampleSet};
use crate::error::{Error, Result};
use crate::metrics::{emit_reports, evaluate, MetricsReport};
use crate::model::{Inference, Model};
use crate::tensor::Tensor;
use crate::train::{fit, EpochLog, FitOutcome};

pub const RUN_CONFIG_FILE: &str = "run_config.txt";
pub const EPOCH_LOG_FILE: &str = "epoch_log.csv";
pub const BEST_CHECKPOINT_FILE: &str = "best.ckpt";
pub const LAST_CHECKPOINT_FILE: &str = "last.ckpt";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl SplitName {
    pub fn name(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        }
    }
}

impl FromStr for SplitName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitName::Train),
            "val" => Ok(SplitName::Val),
            "test" => Ok(SplitName::Test),
            other => Err(Error::Config(format!("unknown split {other:?} (expected train, val or test)"))),
        }
    }
}

fn require_path<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| Error::Config(format!("no {what} given")))
}

/// Scans the data root, failing with a config error that names the path when
/// it is missing.
pub fn scan_data_root(root: &Path) -> Result<DatasetIndex> {
    if !root.is_dir() {
        return Err(Error::Config(format!("data root {} does not exist or is not a directory", root.display())));
    }
    scan_image_folder(root)
}

/// Loads one split of the configured data root.
pub fn load_split(config: &RunConfig, which: SplitName) -> Result<SampleSet> {
    let index = scan_data_root(require_path(&config.data, "data root (--data)")?)?;
    let splits = split_dataset(&index, &config.split)?;
    let part = match which {
        SplitName::Train => &splits.train,
        SplitName::Val => &splits.val,
        SplitName::Test => &splits.test,
    };
    if part.is_empty() {
        return Err(Error::Dataset(format!("{} split is empty", which.name())));
    }
    load_samples(part, config.image_size, config.in_channels)
}

/// Checkpoint metadata: the resolved configuration without paths or thread
/// count (neither changes the weights), then the class names.
pub fn checkpoint_meta(config: &RunConfig, class_names: &[String], best_epoch: usize, best_val_acc: f64) -> Meta {
    let mut meta: Meta = config
        .to_settings()
        .into_iter()
        .filter(|(k, _)| !k.starts_with("paths.") && k != "train.threads")
        .collect();
    meta.insert("n_class".into(), class_names.len().to_string());
    for (i, name) in class_names.iter().enumerate() {
        meta.insert(format!("class.{i}"), name.clone());
    }
    meta.insert("best_epoch".into(), best_epoch.to_string());
    meta.insert("best_val_acc".into(), best_val_acc.to_string());
    meta
}

/// Class names recorded in checkpoint metadata.
pub fn meta_class_names(meta: &Meta) -> Result<Vec<String>> {
    let bad = |m: String| Error::Checkpoint { offset: 0, message: m };
    let n: usize = meta
        .get("n_class")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| bad("metadata lacks n_class".into()))?;
    (0..n)
        .map(|i| meta.get(&format!("class.{i}")).cloned().ok_or_else(|| bad(format!("metadata lacks class.{i}"))))
        .collect()
}

/// Configuration keys stored in checkpoint metadata.
pub fn meta_settings(meta: &Meta) -> Settings {
    meta.iter().filter(|(k, _)| KEYS.contains(&k.as_str())).map(|(k, v)| (k.clone(), v.clone())).collect()
}

/// Resolves the configuration for a run that reuses a checkpoint: its
/// metadata replaces the defaults, `user` (file then flag settings) layers on
/// top, and any model key that ends up different is an error.
pub fn resolve_for_checkpoint(meta: &Meta, env_threads: Option<&str>, user: &Settings) -> Result<RunConfig> {
    let base = meta_settings(meta);
    let stored = RunConfig::resolve(&base, None, &Settings::new())?;
    let merged = RunConfig::resolve(&base, env_threads, user)?;
    let (a, b) = (stored.to_settings(), merged.to_settings());
    let diffs: Vec<String> = MODEL_KEYS
        .iter()
        .filter(|k| a.get(**k) != b.get(**k))
        .map(|k| format!("{k} (checkpoint {}, requested {})", a[*k], b[*k]))
        .collect();
    if !diffs.is_empty() {
        return Err(Error::Config(format!("configuration does not match the checkpoint: {}", diffs.join("; "))));
    }
    Ok(merged)
}

#[derive(Clone, Debug)]
pub struct TrainRun {
    pub outcome: FitOutcome,
    pub class_names: Vec<String>,
    pub train: SampleSet,
    pub val: SampleSet,
}

/// Scan, split, fit, then write `run_config.txt`, the epoch log and the best
/// and last checkpoints to the output directory. The log is rewritten after
/// every epoch; `on_epoch` sees each row as it completes.
pub fn train(config: &RunConfig, mut on_epoch: impl FnMut(&EpochLog)) -> Result<TrainRun> {
    config.validate()?;
    let out = require_path(&config.out, "output directory (--out)")?;
    let index = scan_data_root(require_path(&config.data, "data root (--data)")?)?;
    let splits = split_dataset(&index, &config.split)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let write = |name: &str, body: &[u8]| {
        let path = out.join(name);
        fs::write(&path, body).map_err(|e| Error::io(&path, e))
    };
    write(RUN_CONFIG_FILE, config.to_text().as_bytes())?;
    log::info!(
        "{} images in {} classes; split {}/{}/{}",
        index.len(),
        index.n_class(),
        splits.train.len(),
        splits.val.len(),
        splits.test.len()
    );
    let train = load_samples(&splits.train, config.image_size, config.in_channels)?;
    let val = load_samples(&splits.val, config.image_size, config.in_channels)?;
    let model = Model::init(config.model_config(index.n_class())?, config.train.seed)?;

    let mut csv = String::from(EpochLog::CSV_HEADER);
    csv.push('\n');
    let outcome = fit(model, &train, &val, &config.train, |log| {
        let _ = writeln!(csv, "{}", log.csv_row());
        write(EPOCH_LOG_FILE, csv.as_bytes())?;
        on_epoch(log);
        Ok(())
    })?;
    let meta = checkpoint_meta(config, &index.class_names, outcome.best_epoch, outcome.best_val_acc);
    save_checkpoint(&outcome.best, &meta, &out.join(BEST_CHECKPOINT_FILE))?;
    save_checkpoint(outcome.last.params(), &meta, &out.join(LAST_CHECKPOINT_FILE))?;
    Ok(TrainRun { outcome, class_names: index.class_names, train, val })
}

/// Loads a checkpoint and resolves the configuration it runs under.
pub fn open_checkpoint(path: &Path, env_threads: Option<&str>, user: &Settings) -> Result<(Model, RunConfig, Meta)> {
    if !path.is_file() {
        return Err(Error::Config(format!("checkpoint {} does not exist", path.display())));
    }
    let (params, meta) = load_checkpoint::<f32>(path)?;
    let config = resolve_for_checkpoint(&meta, env_threads, user)?;
    let names = meta_class_names(&meta)?;
    let model = Model::from_parts(config.model_config(names.len())?, params)?;
    Ok((model, config, meta))
}

/// Eval-mode forward over `data` in batches of `batch_size`, dataset order,
/// the same batching the validation pass uses during training.
pub fn infer_all(model: &Model, data: &SampleSet, batch_size: usize) -> Result<Inference> {
    let ids: Vec<usize> = (0..data.len()).collect();
    let (mut logits, mut prelogits, mut fused) = (Vec::new(), Vec::new(), Vec::new());
    for chunk in ids.chunks(batch_size.max(1)) {
        let (images, _) = data.batch(chunk);
        let out = model.infer(&images)?;
        logits.extend_from_slice(out.logits.data());
        prelogits.extend_from_slice(out.prelogits.data());
        fused.extend_from_slice(out.fused.data());
    }
    let n = data.len();
    let cols = |v: &Vec<f32>| v.len().checked_div(n).unwrap_or(0);
    Ok(Inference {
        logits: Tensor::new([n, cols(&logits)], logits.clone())?,
        prelogits: Tensor::new([n, cols(&prelogits)], prelogits.clone())?,
        fused: Tensor::new([n, cols(&fused)], fused.clone())?,
    })
}

fn check_classes(data: &SampleSet, meta: &Meta) -> Result<()> {
    let names = meta_class_names(meta)?;
    if names != data.class_names {
        return Err(Error::Config(format!(
            "data classes {:?} do not match the checkpoint's {:?}",
            data.class_names, names
        )));
    }
    Ok(())
}

/// Evaluates `model` on one split and writes the metrics CSVs to `out_dir`.
pub fn evaluate_split(model: &Model, config: &RunConfig, meta: &Meta, which: SplitName, out_dir: &Path) -> Result<MetricsReport> {
    let data = load_split(config, which)?;
    check_classes(&data, meta)?;
    let out = infer_all(model, &data, config.train.batch_size)?;
    let report = evaluate(
        out.logits.data(),
        out.prelogits.data(),
        out.prelogits.shape()[1],
        &data.labels,
        &data.class_names,
        &data.paths,
    )?;
    emit_reports(&report, out_dir)?;
    Ok(report)
}

/// Header of the feature dump: `f0..f{dim-1},label,path`.
pub fn features_header(dim: usize) -> String {
    let mut s: String = (0..dim).map(|i| format!("f{i},")).collect();
    s.push_str("label,path");
    s
}

/// Pre-logits of one split as CSV rows. Values are written in shortest
/// round-trip form so the dump reproduces the in-memory features exactly.
pub fn features_csv(prelogits: &Tensor<f32>, data: &SampleSet) -> String {
    let dim = prelogits.shape()[1];
    let mut s = features_header(dim);
    s.push('\n');
    for (i, row) in prelogits.data().chunks(dim).enumerate() {
        for v in row {
            let _ = write!(s, "{v},");
        }
        let _ = writeln!(s, "{},{}", data.class_names[data.labels[i]], data.paths[i].display());
    }
    s
}

/// Parses a feature dump back into row-major f64 features and label names.
pub fn parse_features_csv(text: &str) -> Result<(Vec<f64>, usize, Vec<String>)> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::InvalidArgument("empty feature dump".into()))?;
    let dim = header.split(',').count().saturating_sub(2);
    let (mut feats, mut labels) = (Vec::new(), Vec::new());
    for (i, line) in lines.filter(|l| !l.is_empty()).enumerate() {
        let fields: Vec<&str> = line.splitn(dim + 2, ',').collect();
        if fields.len() != dim + 2 {
            return Err(Error::InvalidArgument(format!("feature row {} has {} fields", i + 1, fields.len())));
        }
        for f in &fields[..dim] {
            let v: f32 = f.parse().map_err(|_| Error::InvalidArgument(format!("bad feature value {f:?}")))?;
            feats.push(v as f64);
        }
        labels.push(fields[dim].to_string());
    }
    Ok((feats, dim, labels))
}

/// Writes the pre-logits of one split to `out_path`; returns the row count.
pub fn dump_features(model: &Model, config: &RunConfig, meta: &Meta, which: SplitName, out_path: &Path) -> Result<usize> {
    let data = load_split(config, which)?;
    check_classes(&data, meta)?;
    let out = infer_all(model, &data, config.train.batch_size)?;
    if let Some(parent) = out_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(out_path, features_csv(&out.prelogits, &data)).map_err(|e| Error::io(out_path, e))?;
    Ok(data.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_names_parse() {
        for s in [SplitName::Train, SplitName::Val, SplitName::Test] {
            assert_eq!(s.name().parse::<SplitName>().unwrap(), s);
        }
        assert!(matches!("dev".parse::<SplitName>(), Err(Error::Config(_))));
    }

    #[test]
    fn missing_data_root_is_a_config_error_naming_it() {
        let err = scan_data_root(Path::new("/no/such/root")).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("/no/such/root"));
    }

    #[test]
    fn meta_round_trips_config_and_classes() {
        let config = RunConfig { data: Some("/d".into()), ..RunConfig::default() };
        let names = vec!["a".to_string(), "b".to_string()];
        let meta = checkpoint_meta(&config, &names, 3, 0.75);
        assert!(!meta.contains_key("paths.data") && !meta.contains_key("train.threads"));
        assert_eq!(meta_class_names(&meta).unwrap(), names);
        let back = resolve_for_checkpoint(&meta, None, &Settings::new()).unwrap();
        assert_eq!(back.model_config(2).unwrap(), config.model_config(2).unwrap());
    }

    #[test]
    fn conflicting_model_flag_is_rejected() {
        let meta = checkpoint_meta(&RunConfig::default(), &["a".into(), "b".into()], 1, 1.0);
        let user: Settings = [("model.preset".to_string(), "cnt".to_string())].into_iter().collect();
        let err = resolve_for_checkpoint(&meta, None, &user).unwrap_err().to_string();
        assert!(err.contains("model.preset"), "{err}");
        let same: Settings = [("model.preset".to_string(), "icnt".to_string())].into_iter().collect();
        resolve_for_checkpoint(&meta, None, &same).unwrap();
    }

    #[test]
    fn feature_dump_parses_back_exactly() {
        let prelogits = Tensor::new([2, 3], vec![0.0f32, 1.5, 1.0 / 3.0, 2.0, 0.1, 7e-8]).unwrap();
        let data = SampleSet {
            class_names: vec!["x".into(), "y".into()],
            channels: 1,
            size: 1,
            images: vec![0.0; 2],
            labels: vec![1, 0],
            paths: vec!["p/a.pgm".into(), "p/b,c.pgm".into()],
        };
        let text = features_csv(&prelogits, &data);
        assert!(text.starts_with("f0,f1,f2,label,path\n"));
        let (f, dim, labels) = parse_features_csv(&text).unwrap();
        assert_eq!(dim, 3);
        assert_eq!(labels, ["y", "x"]);
        let want: Vec<f64> = prelogits.data().iter().map(|&v| v as f64).collect();
        assert_eq!(f, want);
    }
}
