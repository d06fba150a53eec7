//! Generative modeling of stochastic scene layouts from label sets.
//!
//! Two autoregressive conditional VAEs factor a scene layout: one predicts
//! the number of instances per label, the other predicts each bounding box
//! left to right given everything placed so far. The crate provides the
//! numeric core (reverse-mode differentiation over a recorded tape), the
//! probability kernels, the layout data model, a rule-based synthetic
//! dataset generator, COCO panoptic ingestion, training loops, likelihood
//! based evaluation, and SVG rendering.

pub mod bboxvae;
pub mod countvae;
pub mod data;
pub mod dist;
pub mod error;
pub mod eval;
pub mod layout;
pub mod nd;
pub(crate) mod net;
pub mod render;
pub mod sampling;
pub mod train;

pub use error::{Error, Result};
