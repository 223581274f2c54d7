//! Core library for an attention-based rail component detector.
//!
//! The pipeline: a small convolutional backbone turns an image into a token
//! sequence, cascading attention blocks refine a fixed set of prediction
//! slots against that sequence, and two parallel heads emit categories and
//! normalized boxes. Training matches predictions to ground truth with a
//! Hungarian assignment and optimizes the matched set loss with AdamW.
//! Evaluation reports COCO-style AP over IoU thresholds 0.50–0.95.
//!
//! Everything runs on plain `f64` tensors with a reverse-mode tape; there is
//! no GPU path and no external ML dependency.

pub mod error;
pub mod gradcheck;
pub mod tensor;

pub use error::{CoreError, Result};
pub use tensor::tape::{NodeId, Tape};
pub use tensor::Tensor;
