//! Synthetic phantoms and simulated raters with known ground truth, used to
//! validate fusion and metric code against recoverable parameters.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::Geometry;
use crate::volume::{LabelEncoding, LabelMap};

/// Spherical blob: Euclidean ball in voxel index space.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Blob {
    pub center: [usize; 3],
    pub radius: f64,
    pub label: u8,
}

/// Rater noise model: each foreground voxel is kept with probability
/// `sensitivity`, each background voxel flipped on with probability
/// `1 - specificity`, independently per voxel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RaterModel {
    pub sensitivity: f64,
    pub specificity: f64,
    pub seed: u64,
}

impl RaterModel {
    pub fn new(sensitivity: f64, specificity: f64, seed: u64) -> Result<Self> {
        for (name, v) in [("sensitivity", sensitivity), ("specificity", specificity)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!("{name} {v} outside [0, 1]")));
            }
        }
        Ok(Self {
            sensitivity,
            specificity,
            seed,
        })
    }
}

/// Derive the seed of rater `index` from a base seed (golden-ratio stride,
/// so rater 0 uses the base seed itself).
pub fn rater_seed(base: u64, index: usize) -> u64 {
    base.wrapping_add((index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Paint spherical blobs into a fresh label map; later blobs overwrite
/// earlier ones where they overlap. Spheres are clipped at the volume edge,
/// but centers must lie inside.
pub fn make_phantom(
    shape: [usize; 3],
    spacing: [f64; 3],
    blobs: &[Blob],
    encoding: LabelEncoding,
) -> Result<LabelMap> {
    let geometry = Geometry::new(shape, spacing)?;
    let mut codes = vec![0u8; geometry.num_voxels()];
    for blob in blobs {
        if !encoding.contains_code(blob.label) {
            return Err(Error::UnknownLabelCode { code: blob.label });
        }
        if blob.center.iter().zip(&shape).any(|(&c, &s)| c >= s) {
            return Err(Error::invalid(format!(
                "blob center {:?} outside shape {shape:?}",
                blob.center
            )));
        }
        if !blob.radius.is_finite() || blob.radius < 0.0 {
            return Err(Error::invalid(format!("blob radius {} invalid", blob.radius)));
        }
        let r = blob.radius;
        let r2 = r * r;
        let lo: Vec<usize> = (0..3)
            .map(|a| blob.center[a].saturating_sub(r.ceil() as usize))
            .collect();
        let hi: Vec<usize> = (0..3)
            .map(|a| (blob.center[a] + r.ceil() as usize).min(shape[a] - 1))
            .collect();
        for z in lo[2]..=hi[2] {
            for y in lo[1]..=hi[1] {
                for x in lo[0]..=hi[0] {
                    let d2 = [x, y, z]
                        .iter()
                        .zip(&blob.center)
                        .map(|(&i, &c)| (i as f64 - c as f64).powi(2))
                        .sum::<f64>();
                    if d2 <= r2 {
                        codes[geometry.index(x, y, z)] = blob.label;
                    }
                }
            }
        }
    }
    LabelMap::from_codes(geometry, codes, encoding)
}

/// Corrupt a binary ground truth per the rater model. One draw per voxel in
/// scan order, so output is a pure function of `(gt, model)`.
pub fn simulate_rater(gt: &[bool], model: &RaterModel) -> Vec<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(model.seed);
    gt.iter()
        .map(|&fg| {
            let u: f64 = rng.gen();
            if fg {
                u < model.sensitivity
            } else {
                u < 1.0 - model.specificity
            }
        })
        .collect()
}
