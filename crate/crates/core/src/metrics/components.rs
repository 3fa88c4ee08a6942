//! Connected-component labeling of 3-D binary masks.

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Voxel neighborhood shared by component labeling and dilation.
///
/// Six-connectivity is face adjacency, eighteen adds edges, twenty-six adds
/// corners (the full 3x3x3 shell).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Connectivity {
    Six,
    Eighteen,
    TwentySix,
}

impl Connectivity {
    /// All neighbor offsets of this connectivity.
    pub fn offsets(self) -> Vec<[i64; 3]> {
        let mut out = Vec::new();
        for dz in -1..=1i64 {
            for dy in -1..=1i64 {
                for dx in -1..=1i64 {
                    if dx == 0 && dy == 0 && dz == 0 {
                        continue;
                    }
                    let manhattan = dx.abs() + dy.abs() + dz.abs();
                    let keep = match self {
                        Connectivity::Six => manhattan == 1,
                        Connectivity::Eighteen => manhattan <= 2,
                        Connectivity::TwentySix => true,
                    };
                    if keep {
                        out.push([dx, dy, dz]);
                    }
                }
            }
        }
        out
    }
}

impl TryFrom<u8> for Connectivity {
    type Error = Error;

    fn try_from(value: u8) -> Result<Self, Error> {
        match value {
            6 => Ok(Connectivity::Six),
            18 => Ok(Connectivity::Eighteen),
            26 => Ok(Connectivity::TwentySix),
            other => Err(Error::invalid(format!(
                "connectivity must be 6, 18 or 26, got {other}"
            ))),
        }
    }
}

impl From<Connectivity> for u8 {
    fn from(c: Connectivity) -> u8 {
        match c {
            Connectivity::Six => 6,
            Connectivity::Eighteen => 18,
            Connectivity::TwentySix => 26,
        }
    }
}

/// Labeling result: `labels[i]` is 0 for background, otherwise a component
/// id in `1..=count`, `sizes[id - 1]` its voxel count. Components are
/// numbered by their first voxel in scan order, so the labeling is a pure
/// function of the mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComponentLabels {
    pub labels: Vec<u32>,
    pub sizes: Vec<usize>,
}

impl ComponentLabels {
    pub fn count(&self) -> usize {
        self.sizes.len()
    }
}

fn find(parent: &mut [u32], mut x: u32) -> u32 {
    while parent[x as usize] != x {
        parent[x as usize] = parent[parent[x as usize] as usize];
        x = parent[x as usize];
    }
    x
}

/// Label connected components with a two-pass union-find sweep.
pub fn connected_components(
    mask: &[bool],
    shape: [usize; 3],
    connectivity: Connectivity,
) -> ComponentLabels {
    let [nx, ny, nz] = shape;
    assert_eq!(mask.len(), nx * ny * nz, "mask length must match shape");
    // Only offsets pointing at already-visited voxels matter in pass one.
    let prior: Vec<[i64; 3]> = connectivity
        .offsets()
        .into_iter()
        .filter(|&[dx, dy, dz]| dz < 0 || (dz == 0 && (dy < 0 || (dy == 0 && dx < 0))))
        .collect();

    let mut provisional = vec![0u32; mask.len()];
    let mut parent: Vec<u32> = vec![0];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = x + nx * (y + ny * z);
                if !mask[i] {
                    continue;
                }
                let mut label = 0u32;
                for &[dx, dy, dz] in &prior {
                    let (xx, yy, zz) = (x as i64 + dx, y as i64 + dy, z as i64 + dz);
                    if xx < 0 || yy < 0 || zz < 0 || xx >= nx as i64 || yy >= ny as i64 {
                        continue;
                    }
                    let j = xx as usize + nx * (yy as usize + ny * zz as usize);
                    if provisional[j] == 0 {
                        continue;
                    }
                    let root = find(&mut parent, provisional[j]);
                    if label == 0 {
                        label = root;
                    } else if root != label {
                        let a = find(&mut parent, label);
                        parent[root as usize] = a;
                        label = a;
                    }
                }
                if label == 0 {
                    label = parent.len() as u32;
                    parent.push(label);
                }
                provisional[i] = label;
            }
        }
    }

    // Second pass: collapse to roots and renumber in scan order.
    let mut remap = vec![0u32; parent.len()];
    let mut labels = vec![0u32; mask.len()];
    let mut sizes = Vec::new();
    for i in 0..mask.len() {
        if provisional[i] == 0 {
            continue;
        }
        let root = find(&mut parent, provisional[i]) as usize;
        if remap[root] == 0 {
            sizes.push(0);
            remap[root] = sizes.len() as u32;
        }
        let id = remap[root];
        labels[i] = id;
        sizes[(id - 1) as usize] += 1;
    }
    ComponentLabels { labels, sizes }
}
