//! Offset-based panoptic 3D scene completion on voxel grids.
//!
//! Objects are predicted as a class, a 3D center and a set of K offsets with
//! occupancy scores. Training matches predictions to ground-truth objects and
//! then offsets to ground-truth voxels with the Hungarian method. At inference
//! the rasterized instances are merged into a semantic grid by majority voting
//! within a Manhattan radius.

pub mod autodiff;
pub mod classes;
pub mod cli;
pub mod error;
pub mod fit;
pub mod geom;
pub mod grid;
pub mod losses;
pub mod matching;
pub mod metrics;
pub mod objects;
pub mod panoptic;
pub mod scene;
pub mod scenegen;

pub use error::{Error, Result};
