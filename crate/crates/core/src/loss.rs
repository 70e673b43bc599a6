//! Cross-entropy, feature smoothing loss over in-batch class centres, and their
//! weighted sum.
//!
//! The feature smoothing term is
//!
//! ```text
//! L_fs = 1/C_p * sum_c 1/N_c * sum_i || f_ci - mean_c ||^2
//! ```
//!
//! where the centre `mean_c` is recomputed from the current mini-batch and
//! `C_p` counts only the classes present in that batch. Its gradient,
//! `2 / (C_p * N_c) * (f_ci - mean_c)`, is the same whether or not the centre
//! is differentiated through, because the deviations of a class sum to zero.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{cst, Element, Tensor};

pub const DEFAULT_LAMBDA_FS: f64 = 0.05;

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub lambda_fs: f64,
    pub n_class: usize,
}

impl LossConfig {
    pub fn new(lambda_fs: f64, n_class: usize) -> Result<Self> {
        let cfg = Self { lambda_fs, n_class };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.lambda_fs.is_finite() || self.lambda_fs < 0.0 {
            return Err(Error::InvalidArgument(format!("lambda_fs must be finite and >= 0, got {}", self.lambda_fs)));
        }
        if self.n_class < 2 {
            return Err(Error::InvalidArgument(format!("need at least 2 classes, got {}", self.n_class)));
        }
        Ok(())
    }
}

/// Per-sample feature rows with their class labels.
#[derive(Clone, Debug)]
pub struct BatchFeatures<'a, T> {
    pub features: &'a Tensor<T>,
    pub labels: &'a [usize],
}

impl<'a, T: Element> BatchFeatures<'a, T> {
    pub fn new(features: &'a Tensor<T>, labels: &'a [usize]) -> Result<Self> {
        if features.rank() != 2 {
            return Err(Error::shape("batch_features", format!("features must be N x D, got {:?}", features.shape())));
        }
        if features.dim(0) != labels.len() {
            return Err(Error::shape(
                "batch_features",
                format!("{} feature rows but {} labels", features.dim(0), labels.len()),
            ));
        }
        if labels.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        Ok(Self { features, labels })
    }

    fn dim(&self) -> usize {
        self.features.dim(1)
    }

    fn row(&self, i: usize) -> &[T] {
        let d = self.dim();
        &self.features.data()[i * d..(i + 1) * d]
    }
}

fn check_labels(labels: &[usize], k: usize) -> Result<()> {
    match labels.iter().position(|&l| l >= k) {
        Some(i) => Err(Error::InvalidArgument(format!(
            "label {} at position {i} out of range for {k} classes",
            labels[i]
        ))),
        None => Ok(()),
    }
}

/// Mean of `-log softmax(logits)[label]` with its gradient `(softmax - onehot) / N`.
pub fn softmax_cross_entropy<T: Element>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    if logits.rank() != 2 || logits.dim(0) != labels.len() || labels.is_empty() {
        return Err(Error::shape(
            "cross_entropy",
            format!("logits {:?} vs {} labels", logits.shape(), labels.len()),
        ));
    }
    let (n, k) = (logits.dim(0), logits.dim(1));
    check_labels(labels, k)?;
    let inv_n: T = cst(1.0 / n as f64);
    let mut grad = vec![T::zero(); n * k];
    let mut total = T::zero();
    for (i, &label) in labels.iter().enumerate() {
        let row = &logits.data()[i * k..(i + 1) * k];
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let sum_exp = row.iter().fold(T::zero(), |s, &v| s + (v - max).exp());
        let log_z = max + sum_exp.ln();
        total = total + (log_z - row[label]);
        let g = &mut grad[i * k..(i + 1) * k];
        for (j, (gv, &v)) in g.iter_mut().zip(row).enumerate() {
            let p = (v - log_z).exp();
            let onehot = if j == label { T::one() } else { T::zero() };
            *gv = (p - onehot) * inv_n;
        }
    }
    Ok((total * inv_n, Tensor::new([n, k], grad)?))
}

/// Row-wise softmax probabilities.
pub fn softmax<T: Element>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    if logits.rank() != 2 {
        return Err(Error::shape("softmax", format!("expected N x K, got {:?}", logits.shape())));
    }
    let k = logits.dim(1);
    let mut out = Vec::with_capacity(logits.numel());
    for row in logits.data().chunks(k.max(1)) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
        let s = exps.iter().fold(T::zero(), |a, &b| a + b);
        out.extend(exps.into_iter().map(|e| e / s));
    }
    Tensor::new(logits.shape().to_vec(), out)
}

pub fn cross_entropy<T: Element>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    softmax_cross_entropy(logits, labels)
}

/// Mean feature of every class present in the batch.
pub fn class_centers<T: Element>(batch: &BatchFeatures<'_, T>) -> BTreeMap<usize, Vec<T>> {
    let d = batch.dim();
    let mut sums: BTreeMap<usize, (Vec<T>, usize)> = BTreeMap::new();
    for (i, &c) in batch.labels.iter().enumerate() {
        let entry = sums.entry(c).or_insert_with(|| (vec![T::zero(); d], 0));
        entry.0.iter_mut().zip(batch.row(i)).for_each(|(s, &v)| *s = *s + v);
        entry.1 += 1;
    }
    sums.into_iter()
        .map(|(c, (mut s, n))| {
            let inv: T = cst(1.0 / n as f64);
            s.iter_mut().for_each(|v| *v = *v * inv);
            (c, s)
        })
        .collect()
}

/// Feature smoothing loss and its gradient with respect to the features.
pub fn feature_smoothing_loss<T: Element>(batch: &BatchFeatures<'_, T>) -> (T, Tensor<T>) {
    let d = batch.dim();
    let centers = class_centers(batch);
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &c in batch.labels {
        *counts.entry(c).or_default() += 1;
    }
    let present: T = cst(centers.len() as f64);
    let mut per_class: BTreeMap<usize, T> = BTreeMap::new();
    let mut grad = vec![T::zero(); batch.labels.len() * d];
    for (i, &c) in batch.labels.iter().enumerate() {
        let center = &centers[&c];
        let n_c: T = cst(counts[&c] as f64);
        let coef = cst::<T>(2.0) / (present * n_c);
        let mut sq = T::zero();
        for ((g, &f), &m) in grad[i * d..(i + 1) * d].iter_mut().zip(batch.row(i)).zip(center) {
            let diff = f - m;
            sq = sq + diff * diff;
            *g = coef * diff;
        }
        let acc = per_class.entry(c).or_insert(T::zero());
        *acc = *acc + sq;
    }
    let loss = per_class
        .iter()
        .fold(T::zero(), |acc, (c, &s)| acc + s / cst(counts[c] as f64))
        / present;
    (loss, Tensor::new(batch.features.shape().to_vec(), grad).expect("feature shape"))
}

#[derive(Clone, Debug)]
pub struct LossBreakdown<T> {
    pub total: T,
    pub cross_entropy: T,
    pub feature_smoothing: T,
    pub grad_logits: Tensor<T>,
    pub grad_features: Tensor<T>,
}

/// `L = L_CE + lambda_fs * L_fs` with gradients for the logits and the features.
pub fn total_loss<T: Element>(
    logits: &Tensor<T>,
    batch: &BatchFeatures<'_, T>,
    config: &LossConfig,
) -> Result<LossBreakdown<T>> {
    if logits.rank() != 2 || logits.dim(1) != config.n_class {
        return Err(Error::shape(
            "total_loss",
            format!("logits {:?} vs {} classes", logits.shape(), config.n_class),
        ));
    }
    if logits.dim(0) != batch.labels.len() {
        return Err(Error::shape(
            "total_loss",
            format!("{} logit rows vs {} feature rows", logits.dim(0), batch.labels.len()),
        ));
    }
    let (ce, grad_logits) = softmax_cross_entropy(logits, batch.labels)?;
    let (fs, fs_grad) = feature_smoothing_loss(batch);
    let lambda: T = cst(config.lambda_fs);
    let grad_features = Tensor::new(fs_grad.shape().to_vec(), fs_grad.data().iter().map(|&g| g * lambda).collect())?;
    Ok(LossBreakdown {
        total: ce + lambda * fs,
        cross_entropy: ce,
        feature_smoothing: fs,
        grad_logits,
        grad_features,
    })
}

/// Records the feature smoothing loss as primitive tape ops, so the backward
/// pass also differentiates through the in-batch centres.
pub fn feature_smoothing_on_tape<T: Element>(tape: &mut Tape<T>, features: Var, labels: &[usize]) -> Result<Var> {
    let present: Vec<usize> = {
        let mut v = labels.to_vec();
        v.sort_unstable();
        v.dedup();
        v
    };
    let segment: Vec<usize> = labels
        .iter()
        .map(|l| present.binary_search(l).expect("label is present"))
        .collect();
    let mut sizes = vec![0usize; present.len()];
    segment.iter().for_each(|&s| sizes[s] += 1);
    let weights: Vec<T> = segment
        .iter()
        .map(|&s| cst(1.0 / (present.len() as f64 * sizes[s] as f64)))
        .collect();
    let centers = tape.segment_mean(features, &segment, present.len())?;
    let spread = tape.gather_rows(centers, &segment)?;
    let diff = tape.sub(features, spread)?;
    let sq = tape.mul(diff, diff)?;
    tape.weighted_row_sum(sq, &weights)
}

/// Tape-recorded total loss; the reference composition used by gradient checks.
pub fn total_loss_on_tape<T: Element>(
    tape: &mut Tape<T>,
    logits: Var,
    features: Var,
    labels: &[usize],
    lambda_fs: f64,
) -> Result<Var> {
    let ce = tape.cross_entropy(logits, labels)?;
    let fs = feature_smoothing_on_tape(tape, features, labels)?;
    let weighted = tape.scale(fs, cst(lambda_fs));
    tape.add(ce, weighted)
}
