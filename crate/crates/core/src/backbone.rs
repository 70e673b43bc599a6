//! ConvNeXt-style feature extractor and the plain CNN used as a baseline.
//!
//! Stem: `k x k` stride-`k` patch conv followed by channel layer norm.
//! Stage `i > 0` opens with layer norm + 2x2 stride-2 conv. Each block is
//! depthwise 7x7 -> layer norm -> 1x1 expand (4x) -> GELU -> 1x1 project,
//! added back onto its input.

use rand::Rng;

use crate::error::{Error, Result};
use crate::ops::{Activation, Conv2dSpec};
use crate::ops::norm::DEFAULT_EPS;
use crate::params::{add_conv, add_norm, ParamStore, ParamVars};
use crate::tape::{Tape, Var};
use crate::tensor::Element;

pub const BLOCK_KERNEL: usize = 7;
pub const MLP_RATIO: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub stage_depths: [usize; 4],
    pub stage_widths: [usize; 4],
    pub stem_kernel: usize,
    pub stem_stride: usize,
}

impl BackboneConfig {
    /// Desk-scale preset.
    pub fn toy(in_channels: usize) -> Self {
        Self {
            in_channels,
            stage_depths: [1, 1, 2, 1],
            stage_widths: [24, 48, 96, 192],
            stem_kernel: 4,
            stem_stride: 4,
        }
    }

    /// ConvNeXt-Tiny shape.
    pub fn tiny(in_channels: usize) -> Self {
        Self {
            in_channels,
            stage_depths: [3, 3, 9, 3],
            stage_widths: [96, 192, 384, 768],
            stem_kernel: 4,
            stem_stride: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.in_channels == 1 || self.in_channels == 3) {
            return Err(Error::Config(format!("in_channels must be 1 or 3, got {}", self.in_channels)));
        }
        if self.stage_widths.contains(&0) {
            return Err(Error::Config(format!("stage widths must be positive: {:?}", self.stage_widths)));
        }
        if self.stage_widths.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Config(format!("stage widths must be nondecreasing: {:?}", self.stage_widths)));
        }
        if self.stem_kernel == 0 || self.stem_stride == 0 {
            return Err(Error::Config("stem kernel and stride must be >= 1".into()));
        }
        Ok(())
    }

    /// Channel count of the final feature map.
    pub fn out_channels(&self) -> usize {
        self.stage_widths[3]
    }

    /// Total downsampling factor: the stem stride times three 2x reductions.
    pub fn total_stride(&self) -> usize {
        self.stem_stride * 8
    }
}

pub fn init_backbone<T: Element, R: Rng + ?Sized>(config: &BackboneConfig, rng: &mut R) -> Result<ParamStore<T>> {
    config.validate()?;
    let mut p = ParamStore::new();
    let w0 = config.stage_widths[0];
    let k = config.stem_kernel;
    add_conv(&mut p, "backbone.stem.conv", [w0, config.in_channels, k, k], rng)?;
    add_norm(&mut p, "backbone.stem.norm", w0)?;
    for (s, (&depth, &width)) in config.stage_depths.iter().zip(&config.stage_widths).enumerate() {
        if s > 0 {
            let prev = config.stage_widths[s - 1];
            add_norm(&mut p, &format!("backbone.stages.{s}.downsample.norm"), prev)?;
            add_conv(&mut p, &format!("backbone.stages.{s}.downsample.conv"), [width, prev, 2, 2], rng)?;
        }
        for b in 0..depth {
            let pre = format!("backbone.stages.{s}.blocks.{b}");
            add_conv(&mut p, &format!("{pre}.dwconv"), [width, 1, BLOCK_KERNEL, BLOCK_KERNEL], rng)?;
            add_norm(&mut p, &format!("{pre}.norm"), width)?;
            add_conv(&mut p, &format!("{pre}.pwconv1"), [MLP_RATIO * width, width, 1, 1], rng)?;
            add_conv(&mut p, &format!("{pre}.pwconv2"), [width, MLP_RATIO * width, 1, 1], rng)?;
        }
    }
    Ok(p)
}

fn norm<T: Element>(tape: &mut Tape<T>, vars: &ParamVars, x: Var, prefix: &str) -> Result<Var> {
    let gamma = vars.get(&format!("{prefix}.gamma"))?;
    let beta = vars.get(&format!("{prefix}.beta"))?;
    tape.layer_norm(x, gamma, beta, 1, DEFAULT_EPS)
}

fn conv<T: Element>(tape: &mut Tape<T>, vars: &ParamVars, x: Var, prefix: &str, spec: Conv2dSpec) -> Result<Var> {
    let w = vars.get(&format!("{prefix}.weight"))?;
    let b = vars.get(&format!("{prefix}.bias"))?;
    tape.conv2d(x, w, Some(b), spec)
}

/// One residual block; `prefix` is e.g. `backbone.stages.0.blocks.0`.
pub fn convnext_block<T: Element>(tape: &mut Tape<T>, vars: &ParamVars, x: Var, prefix: &str) -> Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    let dw_w = vars.get(&format!("{prefix}.dwconv.weight"))?;
    let width = tape.value(dw_w).dim(0);
    if shape.len() != 4 || shape[1] != width {
        return Err(Error::shape(
            "convnext_block",
            format!("input {shape:?} does not have the block width {width} as channel dim"),
        ));
    }
    let pad = BLOCK_KERNEL / 2;
    let h = conv(tape, vars, x, &format!("{prefix}.dwconv"), Conv2dSpec::new(1, pad, width))?;
    let h = norm(tape, vars, h, &format!("{prefix}.norm"))?;
    let h = conv(tape, vars, h, &format!("{prefix}.pwconv1"), Conv2dSpec::default())?;
    let h = tape.activation(h, Activation::Gelu);
    let h = conv(tape, vars, h, &format!("{prefix}.pwconv2"), Conv2dSpec::default())?;
    tape.add(x, h)
}

/// Feature map `N x C x H/32 x W/32` (for the default stem).
pub fn backbone_forward<T: Element>(tape: &mut Tape<T>, vars: &ParamVars, x: Var, config: &BackboneConfig) -> Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    if shape.len() != 4 || shape[1] != config.in_channels {
        return Err(Error::shape(
            "backbone_forward",
            format!("expected N x {} x H x W input, got {shape:?}", config.in_channels),
        ));
    }
    let multiple = config.total_stride();
    if !shape[2].is_multiple_of(multiple) || !shape[3].is_multiple_of(multiple) || shape[2] == 0 || shape[3] == 0 {
        return Err(Error::shape(
            "backbone_forward",
            format!("spatial size {}x{} must be a positive multiple of {multiple}", shape[2], shape[3]),
        ));
    }
    let stem_spec = Conv2dSpec::new(config.stem_stride, 0, 1);
    let mut h = conv(tape, vars, x, "backbone.stem.conv", stem_spec)?;
    h = norm(tape, vars, h, "backbone.stem.norm")?;
    for (s, &depth) in config.stage_depths.iter().enumerate() {
        if s > 0 {
            h = norm(tape, vars, h, &format!("backbone.stages.{s}.downsample.norm"))?;
            h = conv(tape, vars, h, &format!("backbone.stages.{s}.downsample.conv"), Conv2dSpec::new(2, 0, 1))?;
        }
        for b in 0..depth {
            h = convnext_block(tape, vars, h, &format!("backbone.stages.{s}.blocks.{b}"))?;
        }
    }
    Ok(h)
}

/// Plain baseline: `conv3x3 -> ReLU -> maxpool2` repeated per width.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BaseCnnConfig {
    pub in_channels: usize,
    pub widths: Vec<usize>,
}

impl BaseCnnConfig {
    pub fn standard(in_channels: usize) -> Self {
        Self { in_channels, widths: vec![16, 32, 64] }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.in_channels == 1 || self.in_channels == 3) {
            return Err(Error::Config(format!("in_channels must be 1 or 3, got {}", self.in_channels)));
        }
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Config(format!("base CNN widths must be nonempty and positive: {:?}", self.widths)));
        }
        Ok(())
    }

    pub fn out_channels(&self) -> usize {
        *self.widths.last().expect("validated")
    }

    pub fn total_stride(&self) -> usize {
        1 << self.widths.len()
    }
}

pub fn init_base_cnn<T: Element, R: Rng + ?Sized>(config: &BaseCnnConfig, rng: &mut R) -> Result<ParamStore<T>> {
    config.validate()?;
    let mut p = ParamStore::new();
    let mut cin = config.in_channels;
    for (i, &w) in config.widths.iter().enumerate() {
        add_conv(&mut p, &format!("backbone.convs.{i}"), [w, cin, 3, 3], rng)?;
        cin = w;
    }
    Ok(p)
}

pub fn base_cnn_forward<T: Element>(tape: &mut Tape<T>, vars: &ParamVars, x: Var, config: &BaseCnnConfig) -> Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    let multiple = config.total_stride();
    if shape.len() != 4 || shape[1] != config.in_channels {
        return Err(Error::shape(
            "base_cnn_forward",
            format!("expected N x {} x H x W input, got {shape:?}", config.in_channels),
        ));
    }
    if !shape[2].is_multiple_of(multiple) || !shape[3].is_multiple_of(multiple) || shape[2] == 0 || shape[3] == 0 {
        return Err(Error::shape(
            "base_cnn_forward",
            format!("spatial size {}x{} must be a positive multiple of {multiple}", shape[2], shape[3]),
        ));
    }
    let mut h = x;
    for i in 0..config.widths.len() {
        h = conv(tape, vars, h, &format!("backbone.convs.{i}"), Conv2dSpec::new(1, 1, 1))?;
        h = tape.activation(h, Activation::Relu);
        h = tape.max_pool2d(h, 2)?;
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn init_is_seed_deterministic() {
        let cfg = BackboneConfig::toy(1);
        let a: ParamStore<f32> = init_backbone(&cfg, &mut rng(7)).unwrap();
        let b: ParamStore<f32> = init_backbone(&cfg, &mut rng(7)).unwrap();
        assert!(a.bitwise_eq(&b));
        let c: ParamStore<f32> = init_backbone(&cfg, &mut rng(8)).unwrap();
        assert!(!a.bitwise_eq(&c));
    }

    #[test]
    fn toy_preset_is_small_and_norms_start_at_identity() {
        let p: ParamStore<f32> = init_backbone(&BackboneConfig::toy(1), &mut rng(0)).unwrap();
        assert!(p.num_elements() < 1_500_000, "{}", p.num_elements());
        for (name, t) in p.iter() {
            if name.ends_with(".gamma") {
                assert!(t.data().iter().all(|&v| v == 1.0), "{name}");
            }
            if name.ends_with(".beta") || name.ends_with(".bias") {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
            }
        }
    }

    #[test]
    fn toy_and_tiny_output_shapes() {
        let cfg = BackboneConfig::toy(1);
        let p: ParamStore<f32> = init_backbone(&cfg, &mut rng(0)).unwrap();
        let mut tape = Tape::new();
        let vars = p.register(&mut tape, false);
        let x = tape.leaf(Tensor::zeros([2, 1, 64, 64]), false);
        let f = backbone_forward(&mut tape, &vars, x, &cfg).unwrap();
        assert_eq!(tape.value(f).shape(), &[2, 192, 2, 2]);
        assert!(tape.value(f).is_finite());

        let cfg = BackboneConfig::tiny(3);
        let p: ParamStore<f32> = init_backbone(&cfg, &mut rng(0)).unwrap();
        let mut tape = Tape::new();
        let vars = p.register(&mut tape, false);
        let x = tape.leaf(Tensor::zeros([1, 3, 224, 224]), false);
        let f = backbone_forward(&mut tape, &vars, x, &cfg).unwrap();
        assert_eq!(tape.value(f).shape(), &[1, 768, 7, 7]);
    }

    #[test]
    fn indivisible_input_names_required_multiple() {
        let cfg = BackboneConfig::toy(1);
        let p: ParamStore<f32> = init_backbone(&cfg, &mut rng(0)).unwrap();
        let mut tape = Tape::new();
        let vars = p.register(&mut tape, false);
        let x = tape.leaf(Tensor::zeros([1, 1, 48, 64]), false);
        let err = backbone_forward(&mut tape, &vars, x, &cfg).unwrap_err().to_string();
        assert!(err.contains("multiple of 32"), "{err}");
    }

    #[test]
    fn zeroed_block_is_identity() {
        let cfg = BackboneConfig::toy(1);
        let mut p: ParamStore<f64> = init_backbone(&cfg, &mut rng(1)).unwrap();
        let pre = "backbone.stages.1.blocks.0";
        for suffix in ["dwconv.weight", "dwconv.bias", "pwconv1.weight", "pwconv1.bias", "pwconv2.weight", "pwconv2.bias"] {
            p.get_mut(&format!("{pre}.{suffix}")).unwrap().data_mut().fill(0.0);
        }
        let mut tape = Tape::new();
        let vars = p.register(&mut tape, false);
        let mut r = rng(2);
        let x = tape.leaf(crate::params::trunc_normal(&[2, 48, 3, 5], 1.0, &mut r), false);
        let y = convnext_block(&mut tape, &vars, x, pre).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn validation() {
        let mut cfg = BackboneConfig::toy(1);
        cfg.stage_widths = [24, 12, 96, 192];
        assert!(cfg.validate().is_err());
        cfg = BackboneConfig::toy(2);
        assert!(cfg.validate().is_err());
        assert!(BaseCnnConfig { in_channels: 1, widths: vec![] }.validate().is_err());
    }

    #[test]
    fn base_cnn_shapes() {
        let cfg = BaseCnnConfig::standard(1);
        let p: ParamStore<f32> = init_base_cnn(&cfg, &mut rng(0)).unwrap();
        let mut tape = Tape::new();
        let vars = p.register(&mut tape, false);
        let x = tape.leaf(Tensor::zeros([2, 1, 64, 64]), false);
        let f = base_cnn_forward(&mut tape, &vars, x, &cfg).unwrap();
        assert_eq!(tape.value(f).shape(), &[2, 64, 8, 8]);
    }
}
