//! Point-supervised weakly semi-supervised object detection at desk scale.
//!
//! A point-conditioned transformer teacher is trained on a small fully
//! box-labeled subset (with a multi-point consistency regularizer), refined on
//! point-only images with a symmetric flip/mask/jitter consistency term, and
//! used to pseudo-label the weak images; a dense anchor-free student trains on
//! the union and is scored by mAP across fully-labeled-fraction sweeps.
//!
//! Module map:
//! - [`geometry`]: normalized box/point algebra (IoU, GIoU, flips).
//! - [`data`]: synthetic blob dataset, manifest I/O, splits, stochastic ops.
//! - [`encoding`]: sinusoidal positional codes and class embeddings.
//! - [`autodiff`] / [`nn`]: the f64 tape engine and layer library.
//! - [`teacher`]: the point-conditioned box predictor.
//! - [`objectives`]: box, multi-point and symmetric consistency losses.
//! - [`student`]: dense one-stage detector, target assignment, decode, NMS.
//! - [`evalsuite`]: detection matching, AP, mAP reports.
//! - [`pipeline`]: the three training steps, pseudo-labeling, benchmark sweep.

pub mod autodiff;
pub mod data;
pub mod encoding;
pub mod error;
pub mod evalsuite;
pub mod geometry;
pub mod nn;
pub mod objectives;
pub mod par;
pub mod student;
pub mod teacher;

pub use error::{Error, Result};
