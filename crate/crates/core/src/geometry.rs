//! Voxel-grid geometry: shape, spacing and the voxel-to-world affine.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance (mm) for spacing and affine comparisons between volumes.
pub const GEOMETRY_TOL: f64 = 1e-3;

/// Shape, voxel spacing (mm) and 4x4 voxel-to-world affine of a 3D grid.
///
/// Data linearization is fixed crate-wide: x fastest, then y, then z.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    pub affine: [[f64; 4]; 4],
}

impl Geometry {
    /// Geometry with the given shape and spacing and a diagonal affine.
    pub fn new(shape: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        let affine = [
            [spacing[0], 0.0, 0.0, 0.0],
            [0.0, spacing[1], 0.0, 0.0],
            [0.0, 0.0, spacing[2], 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ];
        Self::with_affine(shape, spacing, affine)
    }

    /// Geometry with an explicit affine. Validates positivity of the shape
    /// and spacing and that the affine's column norms agree with the spacing
    /// within [`GEOMETRY_TOL`].
    pub fn with_affine(
        shape: [usize; 3],
        spacing: [f64; 3],
        affine: [[f64; 4]; 4],
    ) -> Result<Self> {
        if shape.iter().any(|&n| n == 0) {
            return Err(Error::invalid(format!(
                "volume shape must be positive, got {shape:?}"
            )));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::invalid(format!(
                "voxel spacing must be strictly positive, got {spacing:?}"
            )));
        }
        for axis in 0..3 {
            let norm = (0..3)
                .map(|r| affine[r][axis] * affine[r][axis])
                .sum::<f64>()
                .sqrt();
            if (norm - spacing[axis]).abs() > GEOMETRY_TOL {
                return Err(Error::invalid(format!(
                    "spacing {:.6} on axis {axis} is inconsistent with affine column norm {:.6}",
                    spacing[axis], norm
                )));
            }
        }
        Ok(Self {
            shape,
            spacing,
            affine,
        })
    }

    /// Unit-spacing geometry, the common case for tests and phantoms.
    pub fn isotropic(shape: [usize; 3]) -> Self {
        Self::new(shape, [1.0, 1.0, 1.0]).expect("positive shape")
    }

    /// Total voxel count.
    pub fn num_voxels(&self) -> usize {
        self.shape[0] * self.shape[1] * self.shape[2]
    }

    /// Linear index of voxel (x, y, z): x varies fastest.
    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.shape[0] * (y + self.shape[1] * z)
    }

    /// Inverse of [`Geometry::index`].
    #[inline]
    pub fn coords(&self, index: usize) -> [usize; 3] {
        let x = index % self.shape[0];
        let rest = index / self.shape[0];
        [x, rest % self.shape[1], rest / self.shape[1]]
    }

    /// True iff shapes are equal and spacing/affine agree within
    /// [`GEOMETRY_TOL`] elementwise.
    pub fn matches(&self, other: &Geometry) -> bool {
        self.mismatch(other).is_none()
    }

    /// First differing field against `other`, if any, as
    /// (field name, left value, right value).
    pub fn mismatch(&self, other: &Geometry) -> Option<(&'static str, String, String)> {
        if self.shape != other.shape {
            return Some((
                "shape",
                format!("{:?}", self.shape),
                format!("{:?}", other.shape),
            ));
        }
        for axis in 0..3 {
            if (self.spacing[axis] - other.spacing[axis]).abs() > GEOMETRY_TOL {
                return Some((
                    "spacing",
                    format!("{:?}", self.spacing),
                    format!("{:?}", other.spacing),
                ));
            }
        }
        for r in 0..4 {
            for c in 0..4 {
                if (self.affine[r][c] - other.affine[r][c]).abs() > GEOMETRY_TOL {
                    return Some((
                        "affine",
                        format!("{:?}", self.affine),
                        format!("{:?}", other.affine),
                    ));
                }
            }
        }
        None
    }

    /// Error unless `self` and `other` describe the same grid.
    pub fn require_match(&self, other: &Geometry) -> Result<()> {
        match self.mismatch(other) {
            None => Ok(()),
            Some((field, left, right)) => Err(Error::GeometryMismatch { field, left, right }),
        }
    }
}

/// Pure predicate: do two volumes live on the same grid?
///
/// Shapes must be equal; spacings and affines must agree within
/// [`GEOMETRY_TOL`] elementwise. Every multi-volume operation in the crate
/// checks this and fails fast on mismatch.
pub fn check_geometry(a: &crate::volume::Volume3D, b: &crate::volume::Volume3D) -> bool {
    a.geometry().matches(b.geometry())
}
