//! Toy vision transformer with a frozen backbone whose attention can be
//! rectified per head by coalescent projections, plus the plain-prompt
//! baseline and checkpoint I/O.

mod adapter;
mod backbone;
pub mod checkpoint;
mod config;
mod vit;

pub use adapter::{Adapter, AdapterKind, CoalescentProjection, PlainPrompts};
pub use backbone::{BackboneParams, BlockParams};
pub use config::{CpVariant, VitConfig};
pub use vit::{patchify, Forward, VitModel};
