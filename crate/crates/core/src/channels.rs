//! Derived intensity channels: contrast subtraction and z-score scaling.

use crate::error::{Error, Result};
use crate::volume::{LabelMap, Volume3D};

/// Voxelwise `t1gd - t1`, the synthetic contrast-enhancement channel.
///
/// Both inputs must be float-valued and on the same grid. With
/// `clamp_negative` the result floors at zero; by default the sign is kept so
/// no information is lost.
pub fn subtract(t1gd: &Volume3D, t1: &Volume3D, clamp_negative: bool) -> Result<Volume3D> {
    t1gd.geometry().require_match(t1.geometry())?;
    let a = t1gd
        .as_f32()
        .ok_or_else(|| Error::invalid("subtraction requires float inputs; convert first"))?;
    let b = t1
        .as_f32()
        .ok_or_else(|| Error::invalid("subtraction requires float inputs; convert first"))?;
    let out: Vec<f32> = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x - y;
            if clamp_negative && d < 0.0 {
                0.0
            } else {
                d
            }
        })
        .collect();
    Volume3D::from_f32(t1gd.geometry().clone(), out)
}

/// Z-score the volume: `(v - mean) / std` with population (1/N) std.
///
/// Statistics come from the mask's foreground voxels when a mask is given,
/// otherwise from every voxel. The resulting affine rescale is applied to the
/// whole volume. A zero std yields an all-zero volume.
pub fn zscore_normalize(volume: &Volume3D, mask: Option<&LabelMap>) -> Result<Volume3D> {
    let values = volume.to_f32();
    let selected: Vec<f64> = match mask {
        Some(m) => {
            volume.geometry().require_match(m.geometry())?;
            let picked: Vec<f64> = m
                .codes()
                .iter()
                .zip(&values)
                .filter(|(&code, _)| code != 0)
                .map(|(_, &v)| f64::from(v))
                .collect();
            if picked.is_empty() {
                return Err(Error::invalid("normalization mask has no foreground voxels"));
            }
            picked
        }
        None => values.iter().map(|&v| f64::from(v)).collect(),
    };
    let n = selected.len() as f64;
    let mean = selected.iter().sum::<f64>() / n;
    let var = selected.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    let out: Vec<f32> = if std == 0.0 {
        vec![0.0; values.len()]
    } else {
        values
            .iter()
            .map(|&v| ((f64::from(v) - mean) / std) as f32)
            .collect()
    };
    Volume3D::from_f32(volume.geometry().clone(), out)
}
