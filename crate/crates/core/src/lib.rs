//! Box-supervised referring video object segmentation.
//!
//! A text-conditioned box proposal generator is trained from box labels only,
//! with a prompt-space triplet loss at the frame level and a video-level
//! triplet loss between attention-pooled prompt features and sentence
//! features. Its boxes prompt a frozen segmenter, and masks are scored with
//! the usual J / F / J&F and P@K / oIoU / mIoU metrics.

pub mod autograd;
pub mod error;
pub mod geometry;
pub mod losses;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod params;
pub mod pipeline;
pub mod rng;
pub mod segmenter;
pub mod synthdata;

pub use error::{Error, Result};
pub use geometry::BoundingBox;
pub use mask::Mask;
