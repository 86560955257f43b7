//! Patch-wise contrastive supervision for binary lesion segmentation.
//!
//! The crate bundles everything needed to train a small U-Net with a
//! composite objective: pixel-wise BCE plus two supervised contrastive
//! terms computed on pooled penultimate-layer features. One term contrasts
//! lesion-dense against lesion-sparse grid patches, the other contrasts
//! features pooled over inner lesion contours against features pooled over
//! the surrounding background band.
//!
//! Data-parallel loops (per-sample forward/backward, per-patch morphology,
//! per-image metrics) run on rayon when the default `parallel` feature is
//! enabled and fall back to plain iterators otherwise. Results are
//! bit-identical either way.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluator;
pub mod features;
pub mod losses;
pub mod morphology;
pub mod nn;
pub mod par;
pub mod patching;
pub mod trainer;

pub use error::{Error, Result};

/// Binary mask, `H×W`, values in `{0, 1}`.
pub type Mask = ndarray::Array2<u8>;
