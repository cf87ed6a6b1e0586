//! Minimal CPU neural-network toolkit: feature maps, layers with explicit
//! backward passes, region pooling, and the checkpoint format.

pub mod checkpoint;
pub mod layers;
pub mod param;
pub mod roi_align;
pub mod tensor;

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use layers::{Conv2d, ConvCache, GroupNorm, GroupNormCache, Linear};
pub use param::{Module, Param};
pub use roi_align::{roi_align, roi_align_backward};
pub use tensor::FeatureMap;
