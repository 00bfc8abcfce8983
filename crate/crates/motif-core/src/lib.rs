//! Leitmotif occurrence detection as one-dimensional boundary regression.
//!
//! A constant-Q spectrogram frontend feeds a grid/anchor convolutional
//! detector; decoding runs class-wise NMS and evaluation reports
//! boundary-wise F1 and COCO-style mAP. A synthetic-motif generator makes
//! the whole pipeline testable end to end without the source recordings.

pub mod anchors;
pub mod audio;
pub mod cqt;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod loss;
pub mod model;
pub mod num;
pub mod plot;
pub mod train;

pub use error::{Error, Result};
