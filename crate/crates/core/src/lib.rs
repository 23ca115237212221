//! U-Mamba style hybrid CNN/state-space segmentation in pure Rust.

pub mod autodiff;
pub mod bench;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod metrics;
pub mod network;
pub mod params;
pub mod pipeline;
pub mod ssm;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
