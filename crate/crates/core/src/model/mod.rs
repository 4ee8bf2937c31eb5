//! The segmentation network: shared encoder, segmentation decoder and the
//! context-residual decoder with its attention gating.

mod config;
mod network;
mod params;

pub use config::{ModelConfig, OutputMode, Variant, DOWNSAMPLE};
pub use network::{forward, predict, register_params, ForwardOutput, ForwardVars, ParamVars};
pub use params::{build_model, count_params, expected_layout, ModelParams, ParamCount};

#[cfg(test)]
mod tests;
