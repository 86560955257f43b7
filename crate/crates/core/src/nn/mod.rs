//! Small U-Net with hand-written backward passes, and the Adam optimizer.

mod adam;
pub mod ops;
mod unet;

pub use adam::{Adam, AdamConfig};
pub use ops::FeatureMap;
pub use unet::{BackboneDescriptor, ForwardCache, Gradients, Param, UNet};
