//! ConvNeXt-style image classifier with dual global pooling, channel
//! attention and an intra-class feature smoothing loss, plus the data,
//! training and evaluation pipeline around it.

pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod gradsuite;
pub mod head;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod optim;
pub mod parallel;
pub mod pipeline;
pub mod params;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{Model, ModelConfig, Preset};
pub use params::{ModelParams, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::{DType, Element, Tensor};
