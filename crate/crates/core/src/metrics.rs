//! Lesion-wise segmentation metrics and their supporting kernels:
//! connected components, binary dilation, surface distances and the
//! lesion-matching scorer.

pub mod components;
pub mod distance;
pub mod lesion;
pub mod morphology;

pub use components::{connected_components, ComponentLabels, Connectivity};
pub use distance::{dice, hd95, surface_voxels};
pub use lesion::{
    evaluate_case, lesionwise_scores, CaseMetrics, LesionMatch, MetricConfig, RegionMetrics,
};
pub use morphology::dilate;
