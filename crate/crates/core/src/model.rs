//! Full classifier: backbone, pooled head and the named presets.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{backbone_forward, base_cnn_forward, init_backbone, init_base_cnn, BackboneConfig, BaseCnnConfig};
use crate::error::{Error, Result};
use crate::head::{head_forward, init_head, HeadConfig, HeadVars};
use crate::params::{ModelParams, ParamStore, ParamVars};
use crate::tape::{Tape, Var};
use crate::tensor::{Element, Tensor};

/// Named model variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Preset {
    /// ConvNeXt backbone with dual pooling, channel attention and feature smoothing.
    Icnt,
    /// Same backbone, average pooling only, no attention, cross-entropy only.
    Cnt,
    /// Small plain CNN with the `Cnt` head.
    BaseCnn,
}

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::Icnt, Preset::Cnt, Preset::BaseCnn];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Icnt => "icnt",
            Preset::Cnt => "cnt",
            Preset::BaseCnn => "basecnn",
        }
    }

    /// Loss weight of the smoothing term this variant trains with.
    pub fn default_lambda_fs(self) -> f64 {
        match self {
            Preset::Icnt => crate::loss::DEFAULT_LAMBDA_FS,
            Preset::Cnt | Preset::BaseCnn => 0.0,
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "icnt" => Ok(Preset::Icnt),
            "cnt" => Ok(Preset::Cnt),
            "basecnn" | "base-cnn" | "base_cnn" => Ok(Preset::BaseCnn),
            other => Err(Error::Config(format!("unknown preset {other:?} (expected icnt, cnt or basecnn)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum BackboneKind {
    ConvNext(BackboneConfig),
    BaseCnn(BaseCnnConfig),
}

impl BackboneKind {
    pub fn in_channels(&self) -> usize {
        match self {
            BackboneKind::ConvNext(c) => c.in_channels,
            BackboneKind::BaseCnn(c) => c.in_channels,
        }
    }

    pub fn out_channels(&self) -> usize {
        match self {
            BackboneKind::ConvNext(c) => c.out_channels(),
            BackboneKind::BaseCnn(c) => c.out_channels(),
        }
    }

    pub fn total_stride(&self) -> usize {
        match self {
            BackboneKind::ConvNext(c) => c.total_stride(),
            BackboneKind::BaseCnn(c) => c.total_stride(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneKind,
    pub head: HeadConfig,
    /// Side length of the square input images.
    pub image_size: usize,
}

impl ModelConfig {
    /// Desk-scale configuration (64x64 inputs, toy stage widths) unless
    /// `full_size`, which selects 224x224 inputs and the Tiny stages.
    pub fn preset(preset: Preset, n_class: usize, in_channels: usize, full_size: bool) -> Self {
        let image_size = if full_size { 224 } else { 64 };
        let backbone = match preset {
            Preset::Icnt | Preset::Cnt if full_size => BackboneKind::ConvNext(BackboneConfig::tiny(in_channels)),
            Preset::Icnt | Preset::Cnt => BackboneKind::ConvNext(BackboneConfig::toy(in_channels)),
            Preset::BaseCnn => BackboneKind::BaseCnn(BaseCnnConfig::standard(in_channels)),
        };
        let mut head = HeadConfig::new(backbone.out_channels(), n_class);
        if preset != Preset::Icnt {
            head.use_gmp = false;
            head.use_sevector = false;
        }
        Self { backbone, head, image_size }
    }

    pub fn validate(&self) -> Result<()> {
        match &self.backbone {
            BackboneKind::ConvNext(c) => c.validate()?,
            BackboneKind::BaseCnn(c) => c.validate()?,
        }
        self.head.validate()?;
        if self.head.channels != self.backbone.out_channels() {
            return Err(Error::Config(format!(
                "head expects {} channels but the backbone produces {}",
                self.head.channels,
                self.backbone.out_channels()
            )));
        }
        let m = self.backbone.total_stride();
        if self.image_size == 0 || !self.image_size.is_multiple_of(m) {
            return Err(Error::Config(format!("image size {} must be a positive multiple of {m}", self.image_size)));
        }
        Ok(())
    }

    pub fn in_channels(&self) -> usize {
        self.backbone.in_channels()
    }

    pub fn n_class(&self) -> usize {
        self.head.n_class
    }

    /// Fresh parameters; the same seed always gives the same tensors.
    pub fn init_params<T: Element>(&self, seed: u64) -> Result<ParamStore<T>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = match &self.backbone {
            BackboneKind::ConvNext(c) => init_backbone(c, &mut rng)?,
            BackboneKind::BaseCnn(c) => init_base_cnn(c, &mut rng)?,
        };
        p.extend(init_head(&self.head, &mut rng)?)?;
        Ok(p)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub features: Var,
    pub head: HeadVars,
}

impl ForwardVars {
    pub fn logits(&self) -> Var {
        self.head.logits
    }

    pub fn prelogits(&self) -> Var {
        self.head.prelogits
    }
}

pub fn model_forward<T: Element, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    vars: &ParamVars,
    input: Var,
    config: &ModelConfig,
    training: bool,
    rng: &mut R,
) -> Result<ForwardVars> {
    let features = match &config.backbone {
        BackboneKind::ConvNext(c) => backbone_forward(tape, vars, input, c)?,
        BackboneKind::BaseCnn(c) => base_cnn_forward(tape, vars, input, c)?,
    };
    let head = head_forward(tape, features, vars, &config.head, training, rng)?;
    Ok(ForwardVars { features, head })
}

/// Eval-mode outputs for a batch.
#[derive(Clone, Debug)]
pub struct Inference {
    pub logits: Tensor<f32>,
    /// Hidden classifier activations (the embedding used for the PCA plot).
    pub prelogits: Tensor<f32>,
    /// Pooled descriptor before attention.
    pub fused: Tensor<f32>,
}

impl Inference {
    pub fn predictions(&self) -> Vec<usize> {
        let c = self.logits.shape()[1];
        self.logits.data().chunks(c).map(argmax).collect()
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax<T: PartialOrd + Copy>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// A configuration together with its parameters.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    params: ModelParams,
}

impl Model {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = config.init_params(seed)?;
        Ok(Self { config, params })
    }

    /// Pairs `params` with `config` after checking every name and shape.
    pub fn from_parts(config: ModelConfig, params: ModelParams) -> Result<Self> {
        config.validate()?;
        let reference: ParamStore<f32> = config.init_params(0)?;
        params.check_layout(&reference)?;
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParams {
        &mut self.params
    }

    pub fn into_parts(self) -> (ModelConfig, ModelParams) {
        (self.config, self.params)
    }

    /// Eval-mode forward pass over `N x C x S x S` images.
    pub fn infer(&self, images: &Tensor<f32>) -> Result<Inference> {
        let shape = images.shape();
        let s = self.config.image_size;
        if shape.len() != 4 || shape[1] != self.config.in_channels() || shape[2] != s || shape[3] != s {
            return Err(Error::shape(
                "infer",
                format!("expected N x {} x {s} x {s} images, got {shape:?}", self.config.in_channels()),
            ));
        }
        let mut tape = Tape::new();
        let vars = self.params.register(&mut tape, false);
        let x = tape.leaf(images.clone(), false);
        // eval mode never draws from the generator
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = model_forward(&mut tape, &vars, x, &self.config, false, &mut rng)?;
        let logits = tape.value(out.logits()).clone();
        if !logits.is_finite() {
            return Err(Error::NonFinite { context: "inference logits".into() });
        }
        Ok(Inference {
            logits,
            prelogits: tape.value(out.prelogits()).clone(),
            fused: tape.value(out.head.fused).clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_parse_and_shape() {
        for p in Preset::ALL {
            assert_eq!(p.name().parse::<Preset>().unwrap(), p);
            let cfg = ModelConfig::preset(p, 4, 1, false);
            cfg.validate().unwrap();
        }
        assert!("resnet".parse::<Preset>().is_err());
        let cnt = ModelConfig::preset(Preset::Cnt, 4, 1, false);
        assert!(!cnt.head.use_gmp && !cnt.head.use_sevector);
        let full = ModelConfig::preset(Preset::Icnt, 4, 3, true);
        assert_eq!(full.image_size, 224);
        assert_eq!(full.head.channels, 768);
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[2.0, 2.0]), 0);
        assert_eq!(argmax(&[f32::NEG_INFINITY]), 0);
    }

    #[test]
    fn inference_is_per_sample() {
        let cfg = ModelConfig::preset(Preset::Icnt, 3, 1, false);
        let model = Model::init(cfg, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let images: Tensor<f32> = crate::params::trunc_normal(&[2, 1, 64, 64], 1.0, &mut rng);
        let both = model.infer(&images).unwrap();
        let first = Tensor::new([1, 1, 64, 64], images.data()[..4096].to_vec()).unwrap();
        let one = model.infer(&first).unwrap();
        for (a, b) in one.logits.data().iter().zip(&both.logits.data()[..3]) {
            assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0));
        }
        assert_eq!(both.prelogits.shape(), &[2, 256]);
        assert_eq!(both.fused.shape(), &[2, 384]);
    }

    #[test]
    fn from_parts_rejects_wrong_layout() {
        let icnt = ModelConfig::preset(Preset::Icnt, 3, 1, false);
        let cnt = ModelConfig::preset(Preset::Cnt, 3, 1, false);
        let p: ModelParams = icnt.init_params(0).unwrap();
        assert!(Model::from_parts(icnt, p.clone()).is_ok());
        let err = Model::from_parts(cnt, p).unwrap_err().to_string();
        assert!(err.contains("head."), "{err}");
    }
}
