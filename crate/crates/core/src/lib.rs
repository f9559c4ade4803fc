//! Desk-scale joint object detection and semantic segmentation, built from
//! scratch: a dense f64 tensor engine with reverse-mode autodiff, an
//! encoder-decoder network family with per-level detection/segmentation
//! heads, anchor machinery, multi-task losses, a synthetic shape dataset,
//! evaluation metrics, and a training loop.
//!
//! Everything is deterministic for a fixed seed: seeded ChaCha streams,
//! fixed reduction orders, and single-threaded kernels.

pub mod anchors;
pub mod data;
pub mod error;
pub mod eval;
pub mod loss;
pub mod net;
pub mod tensor;
pub mod train;

pub use error::{CoreError, Result};
