//! The dense decoder-only backbone.

pub mod config;
pub mod decoder;
pub mod rope;

pub use config::ModelConfig;
pub use rope::RopeTable;
pub use decoder::{AttnMasks, BackboneVars, DenseWeights, MaskSource, NoMasks};
