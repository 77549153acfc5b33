//! Normalization, attention blocks, temporal modules and frame-level attention.

pub mod attention;
pub mod container;
pub mod frames;
pub mod norm;
pub mod temporal;

pub use attention::{attention, attention_weights, linear, mix_values, transformer_block, BlockWeights};
pub use container::WeightBundle;
pub use frames::{ffam, fine_coarse_context, full_st_attention, sca, FrameSet};
pub use norm::{apply_norm, instance_center, instance_norm, layer_norm, NormAxis, NormMode, NormParams};
pub use temporal::{stam, ta_module};
