//! Cross-task regularized transfer learning for facial landmark detection.
//!
//! A face-identity classifier is pretrained on procedurally generated faces,
//! its encoder is transferred into a heatmap-regression landmark detector, and
//! the detector is optionally regularized towards the frozen classifier's
//! outputs (softmax distance on logits) or embeddings (cosine alignment).
//!
//! Module map:
//! - [`tensorcore`]: tensors, the conv/deconv/dense kernels, a small
//!   reverse-mode tape, Adam, the polynomial LR schedule and checkpoints.
//! - [`heatmap`]: landmark/heatmap codec and landmark-aware augmentation.
//! - [`synthfaces`]: deterministic synthetic face generator and manifests.
//! - [`model`]: encoder, classifier head, deconvolutional decoder, transfer.
//! - [`losses`]: regression loss and the two cross-task regularizers.
//! - [`trainer`]: source pretraining, target training, ablation runner.
//! - [`evalkit`]: ME / SD / CED / AUC / FR and report files.

pub mod error;
pub mod evalkit;
pub mod heatmap;
pub mod losses;
pub mod model;
pub mod synthfaces;
pub mod tensorcore;
pub mod trainer;

pub use error::{Error, Result};
