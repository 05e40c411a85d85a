//! Cascaded organ localization and segmentation for volumetric scans.
//!
//! The pipeline runs in two stages. Stage one localizes the target organ:
//! deeply-supervised fully-convolutional networks predict per-pixel interior
//! probability on slices of the three orthogonal views, the per-view volumes
//! are pooled voxelwise, and a threshold / erode / largest-component / dilate
//! chain turns the pooled map into a candidate bounding box. Stage two
//! segments inside that box: zoomed interior networks are pooled again, and a
//! boundary network drives watershed superpixels whose 39-feature descriptions
//! feed a random-forest classifier that assembles the final mask.
//!
//! Everything is trainable and verifiable at desk scale on synthetic phantom
//! volumes; see the `book/` guide for a chapter-by-chapter walkthrough.

pub mod aggregate;
pub mod crossval;
pub mod error;
pub mod forest;
pub mod fusion;
pub mod io;
pub mod localize;
pub mod hnn;
pub mod metrics;
pub mod phantom;
pub mod regforest;
pub mod superpixel;
pub mod volume;

pub use error::{Error, Result};
pub use volume::{BBox3, BoxSource, HuVolume, Image2, LabelVolume, ProbVolume, ViewPlane, Volume};
