//! Surface extraction, exact Euclidean distance transform and HD95.
//!
//! Point coordinates are voxel indices scaled by spacing (millimetres);
//! the affine's rotation is irrelevant to distances and is ignored.

use crate::error::{Error, Result};
use crate::geometry::Geometry;

/// Linear indices of mask voxels with at least one face neighbor outside the
/// mask, counting the volume border as outside.
pub fn surface_voxels(mask: &[bool], shape: [usize; 3]) -> Vec<usize> {
    let [nx, ny, nz] = shape;
    assert_eq!(mask.len(), nx * ny * nz, "mask length must match shape");
    let mut out = Vec::new();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = x + nx * (y + ny * z);
                if !mask[i] {
                    continue;
                }
                let exposed = x == 0
                    || y == 0
                    || z == 0
                    || x == nx - 1
                    || y == ny - 1
                    || z == nz - 1
                    || !mask[i - 1]
                    || !mask[i + 1]
                    || !mask[i - nx]
                    || !mask[i + nx]
                    || !mask[i - nx * ny]
                    || !mask[i + nx * ny];
                if exposed {
                    out.push(i);
                }
            }
        }
    }
    out
}

/// Dice overlap `2|A∩B| / (|A|+|B|)`; two empty masks count as identical.
pub fn dice(a: &[bool], b: &[bool]) -> f64 {
    assert_eq!(a.len(), b.len(), "masks must have equal length");
    let mut inter = 0usize;
    let mut na = 0usize;
    let mut nb = 0usize;
    for (&x, &y) in a.iter().zip(b) {
        na += usize::from(x);
        nb += usize::from(y);
        inter += usize::from(x && y);
    }
    if na + nb == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (na + nb) as f64
    }
}

/// Value at percentile `p` (0..=100) of sorted data, interpolating linearly
/// between order statistics.
pub(crate) fn percentile(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of empty data");
    let rank = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (rank - lo as f64)
}

/// Far sentinel for the distance transform. Kept finite so parabola
/// intersections stay well defined; real distances are many orders of
/// magnitude smaller, so it never leaks into results.
const FAR: f64 = 1e30;

/// One-dimensional squared-distance transform (lower envelope of parabolas)
/// with sample pitch `step`. `f` holds input squared distances, `d` the
/// output, `v`/`z` scratch of len n and n+1.
fn dt_1d(f: &[f64], step: f64, d: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    if n == 1 {
        d[0] = f[0];
        return;
    }
    let pos = |i: usize| i as f64 * step;
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        loop {
            let p = v[k];
            let s = ((f[q] + pos(q) * pos(q)) - (f[p] + pos(p) * pos(p)))
                / (2.0 * (pos(q) - pos(p)));
            if s <= z[k] {
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    k = 0;
    for q in 0..n {
        while z[k + 1] < pos(q) {
            k += 1;
        }
        let diff = (q as f64 - v[k] as f64) * step;
        d[q] = diff * diff + f[v[k]];
    }
}

/// Exact squared Euclidean distance (mm^2) from every grid voxel to the
/// nearest seed, via the separable transform run over x, then y, then z.
fn squared_edt(seeds: &[bool], dims: [usize; 3], spacing: [f64; 3]) -> Vec<f64> {
    let [nx, ny, nz] = dims;
    let mut dist: Vec<f64> = seeds.iter().map(|&s| if s { 0.0 } else { FAR }).collect();
    let max_len = nx.max(ny).max(nz);
    let mut f = vec![0.0; max_len];
    let mut d = vec![0.0; max_len];
    let mut v = vec![0usize; max_len];
    let mut z = vec![0.0; max_len + 1];

    let mut run_axis = |dist: &mut [f64], len: usize, step: f64, starts: Vec<usize>, stride: usize| {
        for start in starts {
            for i in 0..len {
                f[i] = dist[start + i * stride];
            }
            dt_1d(&f[..len], step, &mut d[..len], &mut v[..len], &mut z[..=len]);
            for i in 0..len {
                dist[start + i * stride] = d[i];
            }
        }
    };

    let x_rows: Vec<usize> = (0..ny * nz).map(|r| r * nx).collect();
    run_axis(&mut dist, nx, spacing[0], x_rows, 1);
    let y_rows: Vec<usize> = (0..nz)
        .flat_map(|zi| (0..nx).map(move |xi| xi + nx * ny * zi))
        .collect();
    run_axis(&mut dist, ny, spacing[1], y_rows, nx);
    let z_rows: Vec<usize> = (0..ny)
        .flat_map(|yi| (0..nx).map(move |xi| xi + nx * yi))
        .collect();
    run_axis(&mut dist, nz, spacing[2], z_rows, nx * ny);
    dist
}

/// Surface distances from every voxel of `from` (surface indices in the full
/// volume) to the nearest voxel of `to`, computed over the joint bounding box.
fn directed_distances(
    from: &[usize],
    to: &[usize],
    shape: [usize; 3],
    spacing: [f64; 3],
) -> Vec<f64> {
    let [nx, ny] = [shape[0], shape[1]];
    let coords = |i: usize| [i % nx, (i / nx) % ny, i / (nx * ny)];
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    for &i in from.iter().chain(to) {
        let c = coords(i);
        for axis in 0..3 {
            lo[axis] = lo[axis].min(c[axis]);
            hi[axis] = hi[axis].max(c[axis]);
        }
    }
    let dims = [hi[0] - lo[0] + 1, hi[1] - lo[1] + 1, hi[2] - lo[2] + 1];
    let local = |c: [usize; 3]| (c[0] - lo[0]) + dims[0] * ((c[1] - lo[1]) + dims[1] * (c[2] - lo[2]));
    let mut seeds = vec![false; dims[0] * dims[1] * dims[2]];
    for &i in to {
        seeds[local(coords(i))] = true;
    }
    let dist2 = squared_edt(&seeds, dims, spacing);
    from.iter()
        .map(|&i| dist2[local(coords(i))].sqrt())
        .collect()
}

/// 95th-percentile symmetric surface distance in millimetres: the percentile
/// is taken over the concatenated multiset of both directed distance sets.
pub fn hd95(a: &[bool], b: &[bool], geometry: &Geometry) -> Result<f64> {
    let shape = geometry.shape;
    let spacing = geometry.spacing;
    let surf_a = surface_voxels(a, shape);
    let surf_b = surface_voxels(b, shape);
    if surf_a.is_empty() || surf_b.is_empty() {
        return Err(Error::invalid("hd95 requires two nonempty masks"));
    }
    let mut distances = directed_distances(&surf_a, &surf_b, shape, spacing);
    distances.extend(directed_distances(&surf_b, &surf_a, shape, spacing));
    distances.sort_by(|x, y| x.partial_cmp(y).expect("distances are finite"));
    Ok(percentile(&distances, 95.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn geom(shape: [usize; 3], spacing: [f64; 3]) -> Geometry {
        Geometry::new(shape, spacing).unwrap()
    }

    /// All-pairs reference for the same percentile definition.
    fn hd95_bruteforce(a: &[bool], b: &[bool], g: &Geometry) -> f64 {
        let [nx, ny, _] = g.shape;
        let [sx, sy, sz] = g.spacing;
        let coords = |i: usize| [i % nx, (i / nx) % ny, i / (nx * ny)];
        let surf_a = surface_voxels(a, g.shape);
        let surf_b = surface_voxels(b, g.shape);
        let dist = |i: usize, j: usize| {
            let (ci, cj) = (coords(i), coords(j));
            let tx = ((ci[0] as f64 - cj[0] as f64) * sx).powi(2);
            let ty = ((ci[1] as f64 - cj[1] as f64) * sy).powi(2);
            let tz = ((ci[2] as f64 - cj[2] as f64) * sz).powi(2);
            (tx + ty + tz).sqrt()
        };
        let mut all = Vec::new();
        for &i in &surf_a {
            let d = surf_b.iter().map(|&j| dist(i, j)).fold(f64::INFINITY, f64::min);
            all.push(d);
        }
        for &j in &surf_b {
            let d = surf_a.iter().map(|&i| dist(j, i)).fold(f64::INFINITY, f64::min);
            all.push(d);
        }
        all.sort_by(|x, y| x.partial_cmp(y).unwrap());
        percentile(&all, 95.0)
    }

    #[test]
    fn solid_cube_has_26_surface_voxels() {
        let shape = [5, 5, 5];
        let mut mask = vec![false; 125];
        for z in 1..4 {
            for y in 1..4 {
                for x in 1..4 {
                    mask[x + 5 * (y + 5 * z)] = true;
                }
            }
        }
        assert_eq!(surface_voxels(&mask, shape).len(), 26);
    }

    #[test]
    fn single_voxel_is_its_own_surface() {
        let mut mask = vec![false; 27];
        mask[13] = true;
        assert_eq!(surface_voxels(&mask, [3, 3, 3]), vec![13]);
    }

    #[test]
    fn empty_mask_has_empty_surface() {
        assert!(surface_voxels(&vec![false; 8], [2, 2, 2]).is_empty());
    }

    #[test]
    fn border_voxels_are_surface() {
        // A full volume's surface is its border shell.
        let mask = vec![true; 27];
        assert_eq!(surface_voxels(&mask, [3, 3, 3]).len(), 26);
    }

    #[test]
    fn identical_masks_have_zero_hd95() {
        let g = geom([4, 4, 4], [1.0, 1.0, 1.0]);
        let mut mask = vec![false; 64];
        mask[21] = true;
        mask[22] = true;
        assert_eq!(hd95(&mask, &mask, &g).unwrap(), 0.0);
    }

    #[test]
    fn single_voxels_three_apart_score_three() {
        let g = geom([5, 1, 1], [1.0, 1.0, 1.0]);
        let mut a = vec![false; 5];
        let mut b = vec![false; 5];
        a[0] = true;
        b[3] = true;
        assert_eq!(hd95(&a, &b, &g).unwrap(), 3.0);
    }

    #[test]
    fn spacing_scales_distances() {
        let g = geom([5, 1, 1], [2.5, 1.0, 1.0]);
        let mut a = vec![false; 5];
        let mut b = vec![false; 5];
        a[0] = true;
        b[2] = true;
        assert_eq!(hd95(&a, &b, &g).unwrap(), 5.0);
    }

    #[test]
    fn empty_mask_is_an_error() {
        let g = geom([2, 2, 2], [1.0; 3]);
        let some = vec![true; 8];
        let none = vec![false; 8];
        assert!(hd95(&some, &none, &g).is_err());
        assert!(hd95(&none, &some, &g).is_err());
    }

    #[test]
    fn dice_on_shifted_cubes() {
        // 4^3 cubes offset by one voxel along x: intersection 3*4*4 = 48.
        let mut a = vec![false; 512];
        let mut b = vec![false; 512];
        for z in 1..5 {
            for y in 1..5 {
                for x in 1..5 {
                    a[x + 8 * (y + 8 * z)] = true;
                    b[x + 1 + 8 * (y + 8 * z)] = true;
                }
            }
        }
        assert_eq!(dice(&a, &b), 2.0 * 48.0 / 128.0);
        assert_eq!(dice(&a, &a), 1.0);
        assert_eq!(dice(&vec![false; 512], &vec![false; 512]), 1.0);
    }

    #[test]
    fn percentile_interpolates_linearly() {
        let data: Vec<f64> = (0..=20).map(f64::from).collect();
        assert_eq!(percentile(&data, 95.0), 19.0);
        assert_eq!(percentile(&data, 100.0), 20.0);
        assert_eq!(percentile(&data, 0.0), 0.0);
        let data: Vec<f64> = (0..=10).map(f64::from).collect();
        assert_eq!(percentile(&data, 95.0), 9.5);
    }

    #[test]
    fn random_masks_match_bruteforce_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        for trial in 0..40 {
            let shape = [
                rng.gen_range(2..=9),
                rng.gen_range(2..=9),
                rng.gen_range(2..=9),
            ];
            let spacing = [
                rng.gen_range(0.5..3.0),
                rng.gen_range(0.5..3.0),
                rng.gen_range(0.5..3.0),
            ];
            let g = geom(shape, spacing);
            let n = g.num_voxels();
            let mut a: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.25)).collect();
            let mut b: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.25)).collect();
            a[rng.gen_range(0..n)] = true;
            b[rng.gen_range(0..n)] = true;
            let fast = hd95(&a, &b, &g).unwrap();
            let slow = hd95_bruteforce(&a, &b, &g);
            assert!(
                (fast - slow).abs() < 1e-9,
                "trial {trial}: {fast} vs {slow}"
            );
            let swapped = hd95(&b, &a, &g).unwrap();
            assert!((fast - swapped).abs() < 1e-12, "hd95 must be symmetric");
        }
    }
}
