//! Contracts of the `iconvnext` binary on a small synthetic set.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use iconvnext::config::{parse_settings, RunConfig};
use iconvnext::data::{scan_image_folder, split_dataset, SplitSpec};
use iconvnext::metrics::pca3;
use iconvnext::pipeline::{self, parse_features_csv};

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_iconvnext")).args(args).env_remove("ICNT_THREADS").output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    data: PathBuf,
    run: PathBuf,
    stdout: String,
}

/// One synthetic tree and one short training run shared by the tests.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        let run = dir.path().join("run");
        let out = bin(&["synth", "--out", s(&data), "--classes", "3", "--per-class", "20", "--seed", "4"]);
        assert!(out.status.success());
        let out = bin(&[
            "train", "--data", s(&data), "--out", s(&run), "--seed", "4", "--lr", "1e-4", "--epochs", "2", "--threads", "1",
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        Fixture { data, run, stdout: String::from_utf8(out.stdout).unwrap(), _dir: dir }
    })
}

#[test]
fn synth_writes_counted_deterministic_tree() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        assert!(bin(&["synth", "--out", s(d), "--seed", "9", "--per-class", "5"]).status.success());
    }
    let index = scan_image_folder(&a).unwrap();
    assert_eq!((index.len(), index.n_class()), (20, 4));
    for r in &index.records {
        let rel = r.path.strip_prefix(&a).unwrap();
        assert_eq!(fs::read(&r.path).unwrap(), fs::read(b.join(rel)).unwrap(), "{}", rel.display());
    }
}

#[test]
fn train_writes_artifacts_and_echoes_the_log() {
    let f = fixture();
    let csv = fs::read_to_string(f.run.join(pipeline::EPOCH_LOG_FILE)).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "epoch,train_loss,train_ce,train_fsl,train_acc,val_loss,val_acc,seconds");
    assert_eq!(csv.lines().count(), 3);
    for row in csv.lines().skip(1) {
        assert!(f.stdout.contains(row), "stdout lacks {row}");
        assert!(row.split(',').skip(1).all(|v| v.split_once('.').is_some_and(|(_, frac)| frac.len() == 6)));
    }
    assert!(f.run.join(pipeline::BEST_CHECKPOINT_FILE).is_file());
}

#[test]
fn run_config_round_trips_through_the_cli() {
    let f = fixture();
    let text = fs::read_to_string(f.run.join(pipeline::RUN_CONFIG_FILE)).unwrap();
    let first = RunConfig::resolve(&parse_settings(&text).unwrap(), None, &Default::default()).unwrap();
    assert_eq!(first.to_text(), text);
    assert_eq!(first.train.adam.lr, 1e-4);
    assert_eq!((first.train.seed, first.split.seed, first.train.worker_threads), (4, 4, 1));

    // feeding it back as --config (no flags) reproduces the same file
    let again = f.run.parent().unwrap().join("again");
    let cfg = f.run.join(pipeline::RUN_CONFIG_FILE);
    let out = bin(&["train", "--config", s(&cfg), "--out", s(&again), "--epochs", "1"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let second = RunConfig::resolve(
        &parse_settings(&fs::read_to_string(again.join(pipeline::RUN_CONFIG_FILE)).unwrap()).unwrap(),
        None,
        &Default::default(),
    )
    .unwrap();
    let mut expect = first.clone();
    expect.train.epochs = 1;
    expect.out = Some(again.clone());
    assert_eq!(second, expect);
}

#[test]
fn eval_reproduces_best_val_accuracy_and_is_repeatable() {
    let f = fixture();
    let ckpt = f.run.join(pipeline::BEST_CHECKPOINT_FILE);
    let best_line = f.stdout.lines().find(|l| l.starts_with("best epoch")).unwrap();
    let logged: f64 = best_line.split("val_acc ").nth(1).unwrap().split(';').next().unwrap().parse().unwrap();
    let (o1, o2) = (f.run.join("e1"), f.run.join("e2"));
    for o in [&o1, &o2] {
        let out = bin(&["eval", "--checkpoint", s(&ckpt), "--data", s(&f.data), "--split", "val", "--out", s(o)]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let stdout = String::from_utf8(out.stdout).unwrap();
        let acc: f64 = stdout.split("accuracy ").nth(1).unwrap().split(' ').next().unwrap().parse().unwrap();
        assert_eq!(acc, logged, "{stdout}");
    }
    let mut names: Vec<String> = fs::read_dir(&o1).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    for want in ["auc.csv", "confusion.csv", "metrics.csv", "pca.csv", "roc_class_0.csv"] {
        assert!(names.iter().any(|n| n == want), "{want} missing from {names:?}");
    }
    for n in &names {
        assert_eq!(fs::read(o1.join(n)).unwrap(), fs::read(o2.join(n)).unwrap(), "{n} differs between runs");
    }
}

#[test]
fn features_dump_matches_eval_pca() {
    let f = fixture();
    let ckpt = f.run.join(pipeline::BEST_CHECKPOINT_FILE);
    let dump = f.run.join("feats.csv");
    let eval_dir = f.run.join("eval_pca");
    assert!(bin(&["features", "--checkpoint", s(&ckpt), "--data", s(&f.data), "--split", "test", "--out", s(&dump)]).status.success());
    assert!(bin(&["eval", "--checkpoint", s(&ckpt), "--data", s(&f.data), "--out", s(&eval_dir)]).status.success());

    let (feats, dim, labels) = parse_features_csv(&fs::read_to_string(&dump).unwrap()).unwrap();
    assert_eq!(dim, 256);
    assert!(feats.iter().all(|&v| v >= 0.0));
    let index = scan_image_folder(&f.data).unwrap();
    let test = split_dataset(&index, &SplitSpec { seed: 4, ..SplitSpec::default() }).unwrap().test;
    assert_eq!(labels.len(), test.len());

    let pca = pca3(&feats, labels.len(), dim).unwrap();
    let pca_csv = fs::read_to_string(eval_dir.join("pca.csv")).unwrap();
    for (i, row) in pca_csv.lines().skip(1).enumerate() {
        let v: Vec<f64> = row.split(',').take(3).map(|x| x.parse().unwrap()).collect();
        for c in 0..3 {
            let ours = pca.coords.get(i * pca.n_components() + c).copied().unwrap_or(0.0);
            assert!((format!("{ours:.6}").parse::<f64>().unwrap() - v[c]).abs() <= 1e-6, "row {i} pc{c}");
        }
    }
}

#[test]
fn exit_codes() {
    let f = fixture();
    let ckpt = f.run.join(pipeline::BEST_CHECKPOINT_FILE);
    let missing = bin(&["train", "--data", "/definitely/not/here", "--out", "/tmp/unused"]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("/definitely/not/here"));
    assert_eq!(bin(&["train", "--nonsense"]).status.code(), Some(2));
    assert_eq!(bin(&["frobnicate"]).status.code(), Some(2));
    let mismatch = bin(&["eval", "--checkpoint", s(&ckpt), "--data", s(&f.data), "--preset", "cnt"]);
    assert_eq!(mismatch.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&mismatch.stderr).contains("model.preset"));
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.cfg");
    fs::write(&bad, "train.lr = 1e-4\nno_such.key = 3\n").unwrap();
    let out = bin(&["train", "--config", s(&bad), "--data", s(&f.data), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
    let junk = dir.path().join("junk.ckpt");
    fs::write(&junk, b"ICNT garbage").unwrap();
    assert_eq!(bin(&["eval", "--checkpoint", s(&junk), "--data", s(&f.data)]).status.code(), Some(1));
}

#[test]
fn gradcheck_scopes_pass_and_are_deterministic() {
    for scope in ["op", "loss"] {
        let a = bin(&["gradcheck", "--scope", scope, "--seed", "3", "--threads", "1"]);
        assert_eq!(a.status.code(), Some(0), "{}", String::from_utf8_lossy(&a.stdout));
        let b = bin(&["gradcheck", "--scope", scope, "--seed", "3", "--threads", "1"]);
        assert_eq!(a.stdout, b.stdout);
    }
    let op = String::from_utf8(bin(&["gradcheck", "--scope", "op"]).stdout).unwrap();
    for name in ["conv2d.depthwise", "layer_norm.channels", "gelu", "global_max_pool", "cross_entropy", "segment_mean"] {
        assert!(op.contains(name), "{name} missing");
    }
    assert_eq!(bin(&["gradcheck", "--scope", "bogus"]).status.code(), Some(2));
}
