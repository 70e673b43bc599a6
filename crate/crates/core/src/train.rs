//! Epoch loop, validation and best-snapshot retention.

use std::fmt::Write as _;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{batch_iterator, SampleSet};
use crate::error::{Error, Result};
use crate::loss::{total_loss, BatchFeatures, LossConfig};
use crate::model::{argmax, model_forward, Model};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::params::ModelParams;
use crate::tape::Tape;
use crate::tensor::Element;

// Offset separating the dropout stream from the shuffling stream.
const DROPOUT_SEED_SALT: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub worker_threads: usize,
    pub lambda_fs: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            batch_size: 4,
            epochs: 10,
            seed: 0,
            worker_threads: crate::parallel::DEFAULT_WORKER_THREADS,
            lambda_fs: crate::loss::DEFAULT_LAMBDA_FS,
        }
    }
}

impl TrainConfig {
    /// Longer schedule: 20 epochs at learning rate 1e-5.
    pub fn extended() -> Self {
        Self { adam: AdamConfig { lr: 1e-5, ..AdamConfig::default() }, epochs: 20, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        self.adam.validate()?;
        if self.batch_size == 0 || self.epochs == 0 || self.worker_threads == 0 {
            return Err(Error::Config(format!(
                "batch size, epochs and worker threads must be >= 1 (got {}, {}, {})",
                self.batch_size, self.epochs, self.worker_threads
            )));
        }
        if !(self.lambda_fs >= 0.0 && self.lambda_fs.is_finite()) {
            return Err(Error::Config(format!("lambda_fs must be >= 0, got {}", self.lambda_fs)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Sample-weighted means over one pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub loss: f64,
    pub ce: f64,
    pub fsl: f64,
    pub accuracy: f64,
    pub samples: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub train_ce: f64,
    pub train_fsl: f64,
    pub train_acc: f64,
    /// Cross-entropy on the validation split. The smoothing term is left out
    /// so runs with and without it report the same quantity.
    pub val_loss: f64,
    pub val_acc: f64,
    pub seconds: f64,
}

impl EpochLog {
    pub const CSV_HEADER: &'static str = "epoch,train_loss,train_ce,train_fsl,train_acc,val_loss,val_acc,seconds";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.epoch,
            self.train_loss,
            self.train_ce,
            self.train_fsl,
            self.train_acc,
            self.val_loss,
            self.val_acc,
            self.seconds
        )
    }

    /// Same row without the wall-clock column, for comparing runs.
    pub fn csv_row_without_time(&self) -> String {
        let row = self.csv_row();
        row[..row.rfind(',').expect("columns")].to_string()
    }
}

pub fn logs_to_csv(logs: &[EpochLog]) -> String {
    let mut s = String::from(EpochLog::CSV_HEADER);
    s.push('\n');
    for l in logs {
        let _ = writeln!(s, "{}", l.csv_row());
    }
    s
}

/// One pass over `data`. Train mode shuffles by `(seed, epoch)`, applies
/// dropout and takes one Adam step per batch; eval mode keeps dataset order
/// and leaves the parameters alone.
pub fn run_epoch(
    model: &mut Model,
    adam: &mut AdamState<f32>,
    data: &SampleSet,
    config: &TrainConfig,
    mode: Mode,
    epoch: u64,
) -> Result<EpochStats> {
    let n_class = model.config().n_class();
    if data.n_class() != n_class {
        return Err(Error::Config(format!("model has {n_class} classes, data has {}", data.n_class())));
    }
    if data.channels != model.config().in_channels() || data.size != model.config().image_size {
        return Err(Error::Config(format!(
            "data is {}x{}x{}, model expects {}x{}x{}",
            data.channels,
            data.size,
            data.size,
            model.config().in_channels(),
            model.config().image_size,
            model.config().image_size
        )));
    }
    let training = mode == Mode::Train;
    let loss_config = LossConfig::new(config.lambda_fs, n_class)?;
    let batches = batch_iterator(data.len(), config.batch_size, training, config.seed, epoch)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(DROPOUT_SEED_SALT));
    rng.set_stream(epoch);

    let (mut loss_sum, mut ce_sum, mut fsl_sum, mut correct) = (0.0, 0.0, 0.0, 0usize);
    for (b, ids) in batches.iter().enumerate() {
        let (images, labels) = data.batch(ids);
        let mut tape = Tape::new();
        let vars = model.params().register(&mut tape, training);
        let x = tape.leaf(images, false);
        let out = model_forward(&mut tape, &vars, x, model.config(), training, &mut rng)?;
        let batch = BatchFeatures::new(tape.value(out.prelogits()), &labels)?;
        let breakdown = total_loss(tape.value(out.logits()), &batch, &loss_config)?;
        let total = Element::to_f64(breakdown.total);
        if !total.is_finite() {
            let paths: Vec<String> = ids.iter().map(|&i| data.paths[i].display().to_string()).collect();
            return Err(Error::NonFinite {
                context: format!("loss at epoch {epoch} batch {b} (samples {})", paths.join(", ")),
            });
        }
        let k = ids.len() as f64;
        loss_sum += total * k;
        ce_sum += Element::to_f64(breakdown.cross_entropy) * k;
        fsl_sum += Element::to_f64(breakdown.feature_smoothing) * k;
        let logits = tape.value(out.logits());
        correct += logits
            .data()
            .chunks(n_class)
            .zip(&labels)
            .filter(|(row, &y)| argmax(row) == y)
            .count();
        if training {
            let mut seeds = vec![(out.logits(), breakdown.grad_logits)];
            if config.lambda_fs > 0.0 {
                seeds.push((out.prelogits(), breakdown.grad_features));
            }
            tape.backward_with_seeds(seeds)?;
            let grads = vars.gradients(&tape);
            drop(tape);
            adam_step(model.params_mut(), &grads, adam, &config.adam)?;
        }
    }
    let n = data.len() as f64;
    Ok(EpochStats { loss: loss_sum / n, ce: ce_sum / n, fsl: fsl_sum / n, accuracy: correct as f64 / n, samples: data.len() })
}

/// Index of the best validation accuracy; the earlier epoch wins ties.
pub fn best_epoch_index(val_accs: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &a) in val_accs.iter().enumerate() {
        if best.is_none_or(|b| a > val_accs[b]) {
            best = Some(i);
        }
    }
    best
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    /// Parameters after the epoch with the highest validation accuracy.
    pub best: ModelParams,
    /// 1-based.
    pub best_epoch: usize,
    pub best_val_acc: f64,
    /// Model as it stands after the last epoch.
    pub last: Model,
    pub logs: Vec<EpochLog>,
}

/// Trains for `config.epochs` epochs, validating after each; `on_epoch` sees
/// every log as soon as it is complete.
pub fn fit(
    mut model: Model,
    train: &SampleSet,
    val: &SampleSet,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog) -> Result<()>,
) -> Result<FitOutcome> {
    config.validate()?;
    if val.is_empty() {
        return Err(Error::Dataset("validation split is empty; cannot select a best epoch".into()));
    }
    let mut adam = AdamState::new(model.params());
    let mut logs = Vec::with_capacity(config.epochs);
    let mut best: Option<(ModelParams, usize, f64)> = None;
    for e in 0..config.epochs {
        let start = Instant::now();
        let tr = run_epoch(&mut model, &mut adam, train, config, Mode::Train, e as u64)?;
        let va = run_epoch(&mut model, &mut adam, val, config, Mode::Eval, e as u64)?;
        let log = EpochLog {
            epoch: e + 1,
            train_loss: tr.loss,
            train_ce: tr.ce,
            train_fsl: tr.fsl,
            train_acc: tr.accuracy,
            val_loss: va.ce,
            val_acc: va.accuracy,
            seconds: start.elapsed().as_secs_f64(),
        };
        if best.as_ref().is_none_or(|(_, _, acc)| va.accuracy > *acc) {
            best = Some((model.params().clone(), e + 1, va.accuracy));
        }
        on_epoch(&log)?;
        logs.push(log);
    }
    let (best, best_epoch, best_val_acc) = best.expect("epochs >= 1");
    Ok(FitOutcome { best, best_epoch, best_val_acc, last: model, logs })
}
