//! Projection-driven analysis of cervical-spine CT volumes.
//!
//! Volumes are reduced to 2D projections, vertebral regions are localised in
//! the projections and fused back into 3D, and per-vertebra slice stacks are
//! built for classification. The crate also carries the metrics used to
//! evaluate each stage.

pub mod aggregate;
pub mod error;
pub mod mask;
pub mod metrics;
pub mod par;
pub mod pipeline;
pub mod project;
pub mod roivoi;
pub mod stacks;
pub mod vertmask;
pub mod volgrid;

pub use error::{Error, Result};
pub use par::Exec;
