//! Pooling, channel attention and the two-layer classifier on top of the
//! backbone feature map.

use rand::Rng;

use crate::error::{Error, Result};
use crate::ops::Activation;
use crate::params::{add_linear, ParamStore, ParamVars};
use crate::tape::{Tape, Var};
use crate::tensor::Element;

#[derive(Clone, Debug, PartialEq)]
pub struct HeadConfig {
    /// Channels of the incoming feature map.
    pub channels: usize,
    pub reduction: usize,
    pub hidden: usize,
    pub n_class: usize,
    pub dropout: f64,
    pub use_gmp: bool,
    pub use_sevector: bool,
}

impl HeadConfig {
    pub fn new(channels: usize, n_class: usize) -> Self {
        Self { channels, reduction: 16, hidden: 256, n_class, dropout: 0.3, use_gmp: true, use_sevector: true }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.hidden == 0 || self.reduction == 0 {
            return Err(Error::Config("head channels, hidden width and reduction must be >= 1".into()));
        }
        if self.n_class < 2 {
            return Err(Error::Config(format!("n_class must be >= 2, got {}", self.n_class)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }

    /// Width of the pooled descriptor: `2C` with max pooling, `C` without.
    pub fn fused_width(&self) -> usize {
        if self.use_gmp {
            2 * self.channels
        } else {
            self.channels
        }
    }

    /// Bottleneck width of the attention MLP, never below 8.
    pub fn se_hidden(&self) -> usize {
        (self.fused_width() / self.reduction).max(8)
    }
}

pub fn init_head<T: Element, R: Rng + ?Sized>(config: &HeadConfig, rng: &mut R) -> Result<ParamStore<T>> {
    config.validate()?;
    let d = config.fused_width();
    let mut p = ParamStore::new();
    if config.use_sevector {
        let h = config.se_hidden();
        add_linear(&mut p, "head.se.fc1", h, d, rng)?;
        add_linear(&mut p, "head.se.fc2", d, h, rng)?;
    }
    add_linear(&mut p, "head.classifier.fc1", config.hidden, d, rng)?;
    add_linear(&mut p, "head.classifier.fc2", config.n_class, config.hidden, rng)?;
    Ok(p)
}

/// `[GAP(F) | GMP(F)]` along channels, or `GAP(F)` alone.
pub fn gagm_fuse<T: Element>(tape: &mut Tape<T>, features: Var, use_gmp: bool) -> Result<Var> {
    let avg = tape.global_avg_pool(features)?;
    if !use_gmp {
        return Ok(avg);
    }
    let max = tape.global_max_pool(features)?;
    tape.concat_channels(avg, max)
}

/// `v * sigmoid(W2 relu(W1 v + b1) + b2)`; identity when disabled.
pub fn sevector<T: Element>(tape: &mut Tape<T>, v: Var, vars: &ParamVars, enabled: bool) -> Result<Var> {
    if !enabled {
        return Ok(v);
    }
    let h = tape.linear(v, vars.get("head.se.fc1.weight")?, Some(vars.get("head.se.fc1.bias")?))?;
    let h = tape.activation(h, Activation::Relu);
    let s = tape.linear(h, vars.get("head.se.fc2.weight")?, Some(vars.get("head.se.fc2.bias")?))?;
    let s = tape.activation(s, Activation::Sigmoid);
    tape.mul(v, s)
}

#[derive(Clone, Copy, Debug)]
pub struct ClassifierVars {
    /// Hidden activations before dropout; the smoothing loss is taken here.
    pub prelogits: Var,
    pub logits: Var,
}

pub fn classifier_head<T: Element, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    v: Var,
    vars: &ParamVars,
    config: &HeadConfig,
    training: bool,
    rng: &mut R,
) -> Result<ClassifierVars> {
    let h = tape.linear(v, vars.get("head.classifier.fc1.weight")?, Some(vars.get("head.classifier.fc1.bias")?))?;
    let prelogits = tape.activation(h, Activation::Relu);
    let dropped = tape.dropout(prelogits, config.dropout, training, rng)?;
    let logits = tape.linear(
        dropped,
        vars.get("head.classifier.fc2.weight")?,
        Some(vars.get("head.classifier.fc2.bias")?),
    )?;
    Ok(ClassifierVars { prelogits, logits })
}

#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub fused: Var,
    pub attended: Var,
    pub prelogits: Var,
    pub logits: Var,
}

pub fn head_forward<T: Element, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    features: Var,
    vars: &ParamVars,
    config: &HeadConfig,
    training: bool,
    rng: &mut R,
) -> Result<HeadVars> {
    let shape = tape.value(features).shape();
    if shape.len() != 4 || shape[1] != config.channels {
        return Err(Error::shape(
            "head_forward",
            format!("expected N x {} x h x w features, got {shape:?}", config.channels),
        ));
    }
    let fused = gagm_fuse(tape, features, config.use_gmp)?;
    let attended = sevector(tape, fused, vars, config.use_sevector)?;
    let c = classifier_head(tape, attended, vars, config, training, rng)?;
    Ok(HeadVars { fused, attended, prelogits: c.prelogits, logits: c.logits })
}
