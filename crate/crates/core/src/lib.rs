//! Self-training unsupervised domain adaptation for semantic segmentation,
//! with a mean-teacher pair and an inter-pixel consistency regularizer.
//!
//! The crate is organised bottom-up:
//!
//! - [`autodiff`]: dense tensors and a reverse-mode tape
//! - [`model`]: a three-layer convolutional per-pixel classifier
//! - [`losses`]: supervised, self-training and consistency losses
//! - [`teacher`]: the EMA teacher / student pair
//! - [`sampling`]: pixel sampling for similarity matrices
//! - [`data`]: synthetic two-domain scenes and augmentations
//! - [`train`]: configuration, optimizer, training loop, evaluation,
//!   checkpoints and ablation sweeps
//! - [`diagnostics`]: finite-difference checks of each loss

pub mod autodiff;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod losses;
pub mod model;
pub mod sampling;
pub mod teacher;
pub mod train;

pub use error::{Error, Result};
