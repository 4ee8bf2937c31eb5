//! Dual-decoder 3D segmentation with inter-slice context residual learning.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`], [`kernels`], [`autodiff`], [`gradcheck`]: dense tensors and a
//!   reverse-mode tape with the 3D kernels the network needs.
//! * [`masks`], [`losses`], [`metrics`]: residual ground truth, training
//!   losses, Dice and Hausdorff evaluation.
//! * [`model`]: the shared encoder, segmentation and context-residual
//!   decoders, and their ablation variants.
//! * [`data`]: synthetic phantoms, preprocessing, augmentation, volume files.
//! * [`train`]: Adam, polynomial decay, the training loop, evaluation,
//!   checkpoints and ablation runs.
//! * [`config`], [`verify`]: run configuration files and the verification
//!   suites exposed by the command-line tool.

pub mod autodiff;
pub mod config;
mod container;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod losses;
pub mod masks;
pub mod model;
pub mod metrics;
pub mod oracles;
pub mod seeding;
pub mod tensor;
pub mod verify;
pub mod train;

pub use autodiff::{Graph, Gradients, Var};
pub use error::{Error, Result};
pub use kernels::conv::ConvSpec;
pub use masks::{BinaryMask, LabelVolume, ResidualAxis};
pub use tensor::{Scalar, Tensor};
