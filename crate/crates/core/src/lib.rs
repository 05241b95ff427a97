//! Volumes, edge maps, synthetic phantoms, augmentation and metrics for conditioned
//! implicit shape segmentation.
//!
//! World coordinates are millimetres with the origin at the center of voxel `(0, 0, 0)`;
//! grids are stored x-fastest.

pub mod augment;
pub mod dataset;
pub mod edgemap;
pub mod error;
pub mod metrics;
pub mod seeds;
pub mod synthgen;
pub mod volio;
pub mod volume;

pub use error::{Error, FormatError, Result};
pub use volume::{Dims, Spacing, Volume3, VolumeKind, WorldPoint};
