//! Frozen vision-transformer backbone with lightweight adaptation modules and
//! a convolutional BiLSTM CTC head for continuous sign-language recognition,
//! built on a small tape-based reverse-mode autodiff engine.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`], [`kernels`], [`elem`]: dense row-major tensors over f32/f64.
//! - [`tape`]: reverse-mode autodiff with per-op MAC accounting.
//! - [`ops`]: eager, fallible counterparts used by tests and tools.
//! - [`params`], [`optim`], [`gradcheck`]: parameter store, Adam, FD checking.
//! - [`backbone`], [`adaptation`], [`seq`], [`model`]: the network itself.
//! - [`ctc`], [`wer`]: loss and evaluation metrics with exact oracles.
//! - [`cost`]: analytic and instrumented MAC accounting.
//! - [`data`], [`train`], [`checkpoint`], [`dump`]: experiment harness.

pub mod adaptation;
pub mod backbone;
pub mod checkpoint;
pub mod cost;
pub mod ctc;
pub mod data;
pub mod dump;
pub mod elem;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod model;
pub mod ops;
pub mod optim;
pub mod params;
pub mod seq;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod wer;

pub use adaptation::AdaptConfig;
pub use backbone::{Regime, ViTConfig};
pub use data::{AugmentConfig, Split, SyntheticSpec, VideoSample};
pub use elem::{Dtype, Elem};
pub use error::{Error, Result};
pub use model::{ModelConfig, SignModel};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
pub use train::{ExperimentConfig, TrainReport};
pub use wer::WerBreakdown;
