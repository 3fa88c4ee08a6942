//! STAPLE consensus over candidate segmentations, estimated per label with
//! expectation-maximization.
//!
//! Voxels are grouped by their rater-vote pattern (bit j set when rater j
//! voted foreground), which caps the per-iteration work at the number of
//! distinct patterns instead of the voxel count. The default ROI mode skips
//! voxels outside the padded bounding box of all rater foregrounds; those are
//! unanimous background, so folding them into the all-zero pattern's count
//! reproduces the all-voxels result exactly.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Geometry;
use crate::volume::LabelMap;

/// Parameter clamp used inside E-step products so log terms stay finite.
const PROB_CLAMP: f64 = 1e-7;

/// Upper bound on raters per run: one bit per rater in the vote pattern.
pub const MAX_RATERS: usize = 64;

/// Spatially constant prior on foreground probability.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PriorMode {
    /// Fraction of all rater votes that are foreground.
    GlobalPrevalence,
    /// A fixed value, e.g. 0.5 for an uninformative prior.
    Fixed(f64),
}

/// Which voxels enter the EM explicitly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RoiMode {
    AllVoxels,
    /// Bounding box of the union of rater foregrounds, padded by one voxel;
    /// outside voxels are counted analytically. Identical output, much less
    /// work on sparse volumes.
    UnionBoundingBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StapleConfig {
    pub max_iter: usize,
    /// Convergence threshold on the mean absolute posterior change.
    pub tol: f64,
    pub prior: PriorMode,
    pub init_p: f64,
    pub init_q: f64,
    /// Posterior cut used when binarizing the consensus.
    pub threshold: f64,
    pub roi_mode: RoiMode,
}

impl Default for StapleConfig {
    fn default() -> Self {
        Self {
            max_iter: 100,
            tol: 1e-6,
            prior: PriorMode::GlobalPrevalence,
            init_p: 0.99999,
            init_q: 0.99999,
            threshold: 0.5,
            roi_mode: RoiMode::UnionBoundingBox,
        }
    }
}

impl StapleConfig {
    fn validate(&self) -> Result<()> {
        if self.max_iter < 1 {
            return Err(Error::invalid("max_iter must be at least 1"));
        }
        if !(self.tol > 0.0) {
            return Err(Error::invalid("tol must be positive"));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::invalid("threshold must lie strictly between 0 and 1"));
        }
        for (name, v) in [("init_p", self.init_p), ("init_q", self.init_q)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::invalid(format!("{name} must lie strictly between 0 and 1")));
            }
        }
        if let PriorMode::Fixed(g) = self.prior {
            if !(0.0..=1.0).contains(&g) {
                return Err(Error::invalid(format!("fixed prior {g} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Estimated rater quality after EM: sensitivity `p` and specificity `q`
/// per rater, plus the iteration trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RaterPerformance {
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Observed-data log-likelihood after each E-step; non-decreasing.
    pub log_likelihood: Vec<f64>,
}

/// Distinct vote patterns and their voxel counts, plus the pattern of every
/// voxel so posteriors can be scattered back to the full grid.
struct VoteCounts {
    patterns: Vec<u64>,
    counts: Vec<f64>,
    per_voxel: Vec<u64>,
}

fn tally_votes(decisions: &[Vec<bool>], geometry: &Geometry, roi: RoiMode) -> VoteCounts {
    let [nx, ny, nz] = geometry.shape;
    let n = geometry.num_voxels();
    let (lo, hi) = match roi {
        RoiMode::AllVoxels => ([0, 0, 0], [nx, ny, nz]),
        RoiMode::UnionBoundingBox => {
            let mut lo = [usize::MAX; 3];
            let mut hi = [0usize; 3];
            let mut any = false;
            for mask in decisions {
                for (i, &on) in mask.iter().enumerate() {
                    if !on {
                        continue;
                    }
                    any = true;
                    let c = [i % nx, (i / nx) % ny, i / (nx * ny)];
                    for a in 0..3 {
                        lo[a] = lo[a].min(c[a]);
                        hi[a] = hi[a].max(c[a]);
                    }
                }
            }
            if !any {
                ([0, 0, 0], [0, 0, 0])
            } else {
                (
                    [lo[0].saturating_sub(1), lo[1].saturating_sub(1), lo[2].saturating_sub(1)],
                    [(hi[0] + 2).min(nx), (hi[1] + 2).min(ny), (hi[2] + 2).min(nz)],
                )
            }
        }
    };

    let mut per_voxel = vec![0u64; n];
    let mut map: HashMap<u64, u64> = HashMap::new();
    let mut inside = 0u64;
    for z in lo[2]..hi[2] {
        for y in lo[1]..hi[1] {
            for x in lo[0]..hi[0] {
                let i = x + nx * (y + ny * z);
                let mut pat = 0u64;
                for (j, mask) in decisions.iter().enumerate() {
                    pat |= u64::from(mask[i]) << j;
                }
                per_voxel[i] = pat;
                *map.entry(pat).or_insert(0) += 1;
                inside += 1;
            }
        }
    }
    let outside = n as u64 - inside;
    if outside > 0 {
        *map.entry(0).or_insert(0) += outside;
    }
    let mut patterns: Vec<u64> = map.keys().copied().collect();
    patterns.sort_unstable();
    let counts = patterns.iter().map(|p| map[p] as f64).collect();
    VoteCounts {
        patterns,
        counts,
        per_voxel,
    }
}

/// Run binary STAPLE. Returns the per-voxel foreground posterior and the
/// estimated rater performance.
///
/// E-step (log space, parameters clamped): at every voxel,
/// `a = f * prod_j p_j^D (1-p_j)^(1-D)`, `b = (1-f) * prod_j q_j^(1-D)
/// (1-q_j)^D`, `W = a / (a + b)`. M-step: `p_j = sum(W*D) / sum(W)`,
/// `q_j = sum((1-W)(1-D)) / sum(1-W)`. Iterates until the mean absolute
/// change in `W` drops below `tol` or `max_iter` is reached.
pub fn staple_binary(
    decisions: &[Vec<bool>],
    geometry: &Geometry,
    cfg: &StapleConfig,
) -> Result<(Vec<f64>, RaterPerformance)> {
    cfg.validate()?;
    let raters = decisions.len();
    if raters == 0 {
        return Err(Error::invalid("staple requires at least one rater"));
    }
    if raters > MAX_RATERS {
        return Err(Error::invalid(format!(
            "staple supports at most {MAX_RATERS} raters, got {raters}"
        )));
    }
    let n = geometry.num_voxels();
    for (j, d) in decisions.iter().enumerate() {
        if d.len() != n {
            return Err(Error::invalid(format!(
                "rater {j} mask has {} voxels, geometry has {n}",
                d.len()
            )));
        }
    }

    let votes = tally_votes(decisions, geometry, cfg.roi_mode);
    let k = votes.patterns.len();
    if k == 1 && votes.patterns[0] == 0 {
        // No rater voted anywhere; the consensus is trivially empty.
        let perf = RaterPerformance {
            p: vec![cfg.init_p; raters],
            q: vec![cfg.init_q; raters],
            iterations: 1,
            converged: true,
            log_likelihood: Vec::new(),
        };
        return Ok((vec![0.0; n], perf));
    }

    let total_votes: f64 = votes
        .patterns
        .iter()
        .zip(&votes.counts)
        .map(|(pat, c)| f64::from(pat.count_ones()) * c)
        .sum();
    let prior = match cfg.prior {
        PriorMode::GlobalPrevalence => total_votes / (n as f64 * raters as f64),
        PriorMode::Fixed(g) => g,
    }
    .clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    let (log_f, log_1f) = (prior.ln(), (1.0 - prior).ln());

    let mut p = vec![cfg.init_p; raters];
    let mut q = vec![cfg.init_q; raters];
    let mut w = vec![0.0f64; k];
    let mut w_prev = vec![0.0f64; k];
    let mut log_likelihood = Vec::new();
    let mut iterations = 0;
    let mut converged = false;
    let mut degenerate = false;

    for iter in 1..=cfg.max_iter {
        iterations = iter;
        let clamp = |v: f64| v.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        let lp: Vec<f64> = p.iter().map(|&v| clamp(v).ln()).collect();
        let l1p: Vec<f64> = p.iter().map(|&v| (1.0 - clamp(v)).ln()).collect();
        let lq: Vec<f64> = q.iter().map(|&v| clamp(v).ln()).collect();
        let l1q: Vec<f64> = q.iter().map(|&v| (1.0 - clamp(v)).ln()).collect();

        let mut ll = 0.0;
        for ki in 0..k {
            let pat = votes.patterns[ki];
            let mut log_a = log_f;
            let mut log_b = log_1f;
            for j in 0..raters {
                if pat >> j & 1 == 1 {
                    log_a += lp[j];
                    log_b += l1q[j];
                } else {
                    log_a += l1p[j];
                    log_b += lq[j];
                }
            }
            let m = log_a.max(log_b);
            let ea = (log_a - m).exp();
            let eb = (log_b - m).exp();
            w[ki] = ea / (ea + eb);
            ll += votes.counts[ki] * (m + (ea + eb).ln());
        }
        log_likelihood.push(ll);

        if iter > 1 {
            let delta: f64 = w
                .iter()
                .zip(&w_prev)
                .zip(&votes.counts)
                .map(|((a, b), c)| c * (a - b).abs())
                .sum::<f64>()
                / n as f64;
            if delta < cfg.tol {
                converged = true;
                break;
            }
        }
        w_prev.copy_from_slice(&w);
        if iter == cfg.max_iter {
            break;
        }

        let sum_w: f64 = w.iter().zip(&votes.counts).map(|(wv, c)| wv * c).sum();
        let sum_1w: f64 = n as f64 - sum_w;
        for j in 0..raters {
            let mut votes_w = 0.0;
            let mut silent_1w = 0.0;
            for ki in 0..k {
                if votes.patterns[ki] >> j & 1 == 1 {
                    votes_w += votes.counts[ki] * w[ki];
                } else {
                    silent_1w += votes.counts[ki] * (1.0 - w[ki]);
                }
            }
            // A vanished denominator would divide by zero; keep the previous
            // estimate and report the run as not converged.
            if sum_w > 0.0 {
                p[j] = votes_w / sum_w;
            } else {
                degenerate = true;
            }
            if sum_1w > 0.0 {
                q[j] = silent_1w / sum_1w;
            } else {
                degenerate = true;
            }
        }
    }

    let posterior: Vec<f64> = votes
        .per_voxel
        .iter()
        .map(|pat| {
            let ki = votes.patterns.binary_search(pat).expect("pattern was counted");
            w[ki]
        })
        .collect();
    let perf = RaterPerformance {
        p,
        q,
        iterations,
        converged: converged && !degenerate,
        log_likelihood,
    };
    Ok((posterior, perf))
}

/// Pick a label per voxel: among classes whose posterior exceeds the
/// threshold, the highest posterior wins and ties go to the lowest code.
fn assign_labels(posteriors: &[Vec<f64>], codes: &[u8], threshold: f64, n: usize) -> Vec<u8> {
    let mut out = vec![0u8; n];
    for i in 0..n {
        let mut best_code = 0u8;
        let mut best_w = threshold;
        for (ci, &code) in codes.iter().enumerate() {
            let wv = posteriors[ci][i];
            if wv > best_w {
                best_w = wv;
                best_code = code;
            }
        }
        out[i] = best_code;
    }
    out
}

/// Multi-label consensus: binary STAPLE per foreground label (in parallel),
/// then per-voxel label assignment via [`assign_labels`] semantics.
pub fn staple_multilabel(
    raters: &[LabelMap],
    cfg: &StapleConfig,
) -> Result<(LabelMap, BTreeMap<String, RaterPerformance>)> {
    let first = raters
        .first()
        .ok_or_else(|| Error::invalid("staple requires at least one rater"))?;
    for r in &raters[1..] {
        first.geometry().require_match(r.geometry())?;
        if r.encoding() != first.encoding() {
            return Err(Error::invalid("raters use different label encodings"));
        }
    }
    let encoding = first.encoding();
    let codes = encoding.codes();
    let runs: Vec<(u8, (Vec<f64>, RaterPerformance))> = codes
        .par_iter()
        .map(|&code| {
            let masks: Vec<Vec<bool>> = raters.iter().map(|r| r.mask_of_code(code)).collect();
            staple_binary(&masks, first.geometry(), cfg).map(|out| (code, out))
        })
        .collect::<Result<_>>()?;

    let mut posteriors = Vec::with_capacity(codes.len());
    let mut perf = BTreeMap::new();
    for (code, (posterior, rp)) in runs {
        let name = encoding
            .region_of(code)
            .map(|r| r.name().to_string())
            .unwrap_or_else(|| format!("label-{code}"));
        posteriors.push(posterior);
        perf.insert(name, rp);
    }
    let labels = assign_labels(&posteriors, &codes, cfg.threshold, first.geometry().num_voxels());
    let consensus = LabelMap::from_codes(first.geometry().clone(), labels, encoding.clone())?;
    Ok((consensus, perf))
}
