//! Temporal attention layers with instance centering and spectral
//! normalization, Gaussian shift probes, a small reverse-mode autodiff
//! trainer and cost benchmarks.

pub mod autodiff;
pub mod bench;
pub mod error;
pub mod gaussian;
pub mod layers;
pub mod probe;
pub mod report;
pub mod rng;
pub mod spectral;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use gaussian::{estimate_stats, sample_gaussian, GaussianSpec};
pub use rng::RngStream;
pub use tensor::{Grid, Tensor};
