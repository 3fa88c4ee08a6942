//! Lesion-wise scoring: match prediction components to ground-truth lesions
//! and average per-lesion Dice / HD95 together with false-positive penalties.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::components::{connected_components, Connectivity};
use super::distance::{dice, hd95};
use super::morphology::dilate;
use crate::error::{Error, Result};
use crate::geometry::Geometry;
use crate::regions::{binarize, RegionDefs};
use crate::volume::LabelMap;

/// Knobs of the lesion-wise scorer. Every report embeds the config used so
/// results stay auditable; the defaults target the common reference-scorer
/// settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricConfig {
    /// Neighborhood for components and dilation (6, 18 or 26).
    pub connectivity: Connectivity,
    /// Ground-truth dilation rounds used only for lesion matching.
    pub dilation_iterations: usize,
    /// Lesions and false positives smaller than this are dropped.
    pub min_lesion_voxels: usize,
    /// HD95 charged for missed lesions and false positives, in mm.
    pub fp_hd95_penalty: f64,
    /// Dice charged for false positives.
    pub fp_dice_score: f64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            connectivity: Connectivity::TwentySix,
            dilation_iterations: 3,
            min_lesion_voxels: 50,
            fp_hd95_penalty: 374.0,
            fp_dice_score: 0.0,
        }
    }
}

/// One ground-truth lesion and the prediction components matched to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LesionMatch {
    /// Component id in the dilated ground truth (scan-order numbering).
    pub gt_lesion_id: u32,
    /// Prediction components whose extent touches this lesion's dilated
    /// extent, ascending; empty means the lesion was missed.
    pub pred_component_ids: Vec<u32>,
    pub dice: f64,
    pub hd95: f64,
    /// Undilated lesion volume.
    pub gt_volume_voxels: usize,
    /// Volume of the union of matched prediction components.
    pub pred_volume_voxels: usize,
}

/// Lesion-wise scores of one region: `ld`/`lh95` are means over all scoring
/// units (lesions plus false positives).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionMetrics {
    #[serde(rename = "LD")]
    pub ld: f64,
    #[serde(rename = "LH95")]
    pub lh95: f64,
    pub lesions: Vec<LesionMatch>,
    pub fp_count: usize,
}

/// Per-region lesion-wise scores for one case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub regions: BTreeMap<String, RegionMetrics>,
}

impl CaseMetrics {
    pub fn region(&self, name: &str) -> Option<&RegionMetrics> {
        self.regions.get(name)
    }
}

/// Score one binary region.
///
/// Procedure: dilate the ground truth for matching, label its components,
/// drop lesions whose undilated volume is under `min_lesion_voxels`, then
/// assign every prediction component to each lesion whose dilated extent it
/// touches. Each lesion scores Dice/HD95 between its undilated mask and the
/// union of its assigned components (or `0`/`fp_hd95_penalty` when missed).
/// Unassigned components at or above the size floor each score
/// `fp_dice_score`/`fp_hd95_penalty`; smaller ones are ignored. With no
/// scoring units at all the region scores `(1, 0)`.
pub fn lesionwise_scores(
    gt: &[bool],
    pred: &[bool],
    geometry: &Geometry,
    cfg: &MetricConfig,
) -> Result<RegionMetrics> {
    let n = geometry.num_voxels();
    if gt.len() != n || pred.len() != n {
        return Err(Error::invalid(format!(
            "mask lengths {}/{} do not match {} voxels",
            gt.len(),
            pred.len(),
            n
        )));
    }
    let shape = geometry.shape;
    let dilated = dilate(gt, shape, cfg.dilation_iterations, cfg.connectivity);
    let gt_cc = connected_components(&dilated, shape, cfg.connectivity);
    let mut undilated_volume = vec![0usize; gt_cc.count() + 1];
    for i in 0..n {
        if gt[i] {
            undilated_volume[gt_cc.labels[i] as usize] += 1;
        }
    }
    let survivors: Vec<u32> = (1..=gt_cc.count() as u32)
        .filter(|&id| undilated_volume[id as usize] >= cfg.min_lesion_voxels)
        .collect();
    let mut slot_of = vec![usize::MAX; gt_cc.count() + 1];
    for (slot, &id) in survivors.iter().enumerate() {
        slot_of[id as usize] = slot;
    }

    let pred_cc = connected_components(pred, shape, cfg.connectivity);
    let mut assigned: Vec<Vec<u32>> = vec![Vec::new(); survivors.len()];
    let mut pred_is_assigned = vec![false; pred_cc.count() + 1];
    for i in 0..n {
        let p = pred_cc.labels[i];
        let d = gt_cc.labels[i];
        if p == 0 || d == 0 {
            continue;
        }
        let slot = slot_of[d as usize];
        if slot == usize::MAX {
            continue;
        }
        if !assigned[slot].contains(&p) {
            assigned[slot].push(p);
        }
        pred_is_assigned[p as usize] = true;
    }

    let mut lesions = Vec::with_capacity(survivors.len());
    let mut dices = Vec::new();
    let mut hd95s = Vec::new();
    for (slot, &id) in survivors.iter().enumerate() {
        let lesion_mask: Vec<bool> = (0..n).map(|i| gt[i] && gt_cc.labels[i] == id).collect();
        let mut preds = std::mem::take(&mut assigned[slot]);
        preds.sort_unstable();
        let (dice_value, hd95_value, pred_volume) = if preds.is_empty() {
            (0.0, cfg.fp_hd95_penalty, 0)
        } else {
            let union: Vec<bool> = pred_cc
                .labels
                .iter()
                .map(|l| *l != 0 && preds.binary_search(l).is_ok())
                .collect();
            let volume = union.iter().filter(|&&b| b).count();
            (
                dice(&lesion_mask, &union),
                hd95(&lesion_mask, &union, geometry)?,
                volume,
            )
        };
        dices.push(dice_value);
        hd95s.push(hd95_value);
        lesions.push(LesionMatch {
            gt_lesion_id: id,
            pred_component_ids: preds,
            dice: dice_value,
            hd95: hd95_value,
            gt_volume_voxels: undilated_volume[id as usize],
            pred_volume_voxels: pred_volume,
        });
    }

    let mut fp_count = 0usize;
    for p in 1..=pred_cc.count() {
        if !pred_is_assigned[p] && pred_cc.sizes[p - 1] >= cfg.min_lesion_voxels {
            fp_count += 1;
            dices.push(cfg.fp_dice_score);
            hd95s.push(cfg.fp_hd95_penalty);
        }
    }

    let (ld, lh95) = if dices.is_empty() {
        (1.0, 0.0)
    } else {
        let k = dices.len() as f64;
        (dices.iter().sum::<f64>() / k, hd95s.iter().sum::<f64>() / k)
    };
    Ok(RegionMetrics {
        ld,
        lh95,
        lesions,
        fp_count,
    })
}

/// Score every region (base labels plus composites) of a case.
pub fn evaluate_case(
    gt: &LabelMap,
    pred: &LabelMap,
    cfg: &MetricConfig,
    defs: &RegionDefs,
) -> Result<CaseMetrics> {
    gt.geometry().require_match(pred.geometry())?;
    if gt.encoding() != pred.encoding() {
        return Err(Error::invalid(
            "ground truth and prediction use different label encodings",
        ));
    }
    let mut regions = BTreeMap::new();
    for name in defs.valid_names(gt.encoding()) {
        let g = binarize(gt, &name, defs)?;
        let p = binarize(pred, &name, defs)?;
        regions.insert(name, lesionwise_scores(&g, &p, gt.geometry(), cfg)?);
    }
    Ok(CaseMetrics { regions })
}
