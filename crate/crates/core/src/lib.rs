//! Topology-guided refinement of 3D tubular-structure probability maps.
//!
//! Superlevel-set persistence on voxel grids, a persistence-based correction
//! loss with a skeleton-aware integrity term, curriculum refinement of a
//! logit field, tubular-structure metrics, and a synthetic vascular-tree
//! phantom for end-to-end checks.

pub mod cubical_ph;
pub mod error;
pub mod io;
pub mod metrics;
pub mod phantom;
pub mod pipeline;
pub mod refine;
pub mod soft_skeleton;
pub mod tib_loss;
pub mod volume;

pub use error::{Error, FormatError, Result};
