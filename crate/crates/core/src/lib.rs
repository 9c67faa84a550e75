//! Multimodal weight prediction from an object image plus physical metadata.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`], [`tape`], [`gradcheck`]: dense `f64` tensors with reverse-mode
//!   autodiff and a finite-difference checker.
//! - [`features`]: physics-informed geometric descriptors, z-scoring and the
//!   log target transform.
//! - [`dataset`]: a statistics-matched synthetic dataset with procedural
//!   images, stratified splits, augmentation and CSV/PPM persistence.
//! - [`model`]: the patch transformer, metadata encoder, mutual attention
//!   fusion stack and regression head.
//! - [`loss`], [`train`], [`eval`], [`explain`]: objectives, the two-phase
//!   trainer, metrics/ablation and post-hoc explanations.
//! - [`config`]: the flat key-value run configuration.

pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod explain;
pub mod features;
pub mod gradcheck;
pub mod gradsuite;
pub mod loss;
pub mod model;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tape::{ElementwiseOp, Tape, Var};
pub use tensor::Tensor;
