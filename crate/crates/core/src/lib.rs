//! Caption-enhanced video-text retrieval.
//!
//! The crate covers the whole desk-scale pipeline: a prompt self-improvement
//! loop that searches for a captioning prompt whose captions are faithful and
//! diverse, a sparse mixture-of-experts head that selects among frame and
//! caption expressions, contrastive training with hand-written gradients, and
//! retrieval metrics.

pub mod csi;
pub mod ecs;
pub mod embedder;
pub mod error;
pub mod gateway;
pub mod model;
pub mod pipeline;
pub mod retrieval;
pub mod scoring;
pub mod trainer;

pub use error::{Error, Result};
