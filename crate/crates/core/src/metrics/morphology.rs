//! Binary morphological dilation.

use super::components::Connectivity;

/// Dilate a mask `iterations` times with the structuring element induced by
/// `connectivity`. Growth is tracked through a frontier so each round only
/// visits newly added voxels.
pub fn dilate(
    mask: &[bool],
    shape: [usize; 3],
    iterations: usize,
    connectivity: Connectivity,
) -> Vec<bool> {
    let [nx, ny, nz] = shape;
    assert_eq!(mask.len(), nx * ny * nz, "mask length must match shape");
    let mut current = mask.to_vec();
    if iterations == 0 {
        return current;
    }
    let offsets = connectivity.offsets();
    let mut frontier: Vec<usize> = (0..current.len()).filter(|&i| current[i]).collect();
    for _ in 0..iterations {
        let mut next = Vec::new();
        for &i in &frontier {
            let (x, y, z) = (i % nx, (i / nx) % ny, i / (nx * ny));
            for &[dx, dy, dz] in &offsets {
                let (xx, yy, zz) = (x as i64 + dx, y as i64 + dy, z as i64 + dz);
                if xx < 0 || yy < 0 || zz < 0 {
                    continue;
                }
                let (xx, yy, zz) = (xx as usize, yy as usize, zz as usize);
                if xx >= nx || yy >= ny || zz >= nz {
                    continue;
                }
                let j = xx + nx * (yy + ny * zz);
                if !current[j] {
                    current[j] = true;
                    next.push(j);
                }
            }
        }
        if next.is_empty() {
            break;
        }
        frontier = next;
    }
    current
}
