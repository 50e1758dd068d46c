//! Weakly-supervised video semantic segmentation from clip-level tags.
//!
//! A two-stream (appearance + optical flow) convolutional segmenter trained
//! with a log-sum-exp tag loss, a classifier-heatmap localization loss and a
//! dense-CRF consistency term, together with a synthetic scene generator and
//! the usual segmentation metrics.

pub mod autodiff;
pub mod config;
pub mod crf;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod flow;
pub mod heatmap;
pub mod losses;
pub mod net;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
