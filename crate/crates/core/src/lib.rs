//! Label fusion and lesion-wise evaluation for multi-model brain tumor
//! segmentations.
//!
//! The crate covers the post-inference half of a segmentation pipeline:
//! reading NIfTI-1 volumes, deriving the T1Gd-T1 subtraction channel, fusing
//! candidate segmentations into a consensus (binary/multi-label STAPLE via EM,
//! or per-class weighted probability averaging with held-out weight fitting),
//! and scoring predictions with lesion-wise Dice and lesion-wise Hausdorff95
//! over the post-treatment glioma label taxonomy (ET, NETC, SNFH, RC plus the
//! composite TC and WT regions).
//!
//! Voxel data is stored in a single fixed linearization: x fastest, then y,
//! then z (`index = x + nx * (y + ny * z)`), matching the NIfTI on-disk
//! order. Every kernel in this crate assumes that layout.

pub mod channels;
pub mod error;
pub mod geometry;
pub mod manifest;
pub mod metrics;
pub mod nifti;
pub mod pipeline;
pub mod regions;
pub mod report;
pub mod staple;
pub mod synth;
pub mod volume;
pub mod weighted;

pub use error::{Error, Result};
pub use geometry::{check_geometry, Geometry};
pub use volume::{LabelEncoding, LabelMap, ProbStack, Volume3D, VoxelData};
