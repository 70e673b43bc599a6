//! Forward/backward kernels. Each kernel is a pure function of its inputs;
//! [`crate::tape::Tape`] records them and replays the backward halves.

pub mod activation;
pub mod conv;
pub mod linear;
pub mod misc;
pub mod norm;
pub mod pool;

pub use activation::{activation, Activation};
pub use conv::{conv2d, conv_output_extent, Conv2dSpec};
pub use linear::linear;
pub use misc::{concat_channels, dropout};
pub use norm::layer_norm;
pub use pool::{global_avg_pool, global_max_pool};
