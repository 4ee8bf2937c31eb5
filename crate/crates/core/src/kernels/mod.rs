//! Numeric kernels behind the differentiable graph operations.

pub mod conv;
pub mod norm;
pub mod slice_diff;
pub mod upsample;
