//! Export of trained controllers and the two equivalent inference paths.

pub mod export;
pub mod finalize;
pub mod infer;
mod kernels;

pub use export::{export, overhead_for, overhead_params, Manifest, MoeExport};
pub use infer::{moe_forward, pseudo_moe_forward, MacCount, Routing};
