//! Per-class weighted averaging of model probability stacks, with weights
//! fitted on a held-out set by derivative-free search.
//!
//! Every class has its own weight vector over models, so the weighted sum is
//! renormalized voxelwise before the argmax. Weight fitting always evaluates
//! the simplex corners (each corner is one model on its own), which pins the
//! fitted ensemble at or above the best single model under the objective.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::ser::SerializeMap;
use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::metrics::{dice, evaluate_case, MetricConfig};
use crate::regions::{binarize, RegionDefs};
use crate::volume::{LabelEncoding, LabelMap, ProbStack};

/// Allowed drift of each per-class weight vector's sum from 1.
pub const WEIGHT_SUM_TOL: f64 = 1e-9;

/// One weight vector per class (background included), each on the
/// probability simplex over models. Class order follows the encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    class_names: Vec<String>,
    rows: Vec<Vec<f64>>,
}

impl WeightMatrix {
    pub fn new(class_names: Vec<String>, rows: Vec<Vec<f64>>) -> Result<Self> {
        if class_names.is_empty() {
            return Err(Error::invalid("weight matrix needs at least one class"));
        }
        if rows.len() != class_names.len() {
            return Err(Error::invalid(format!(
                "weight matrix has {} rows for {} classes",
                rows.len(),
                class_names.len()
            )));
        }
        let models = rows[0].len();
        if models == 0 {
            return Err(Error::invalid("weight matrix needs at least one model"));
        }
        for (name, row) in class_names.iter().zip(&rows) {
            if row.len() != models {
                return Err(Error::invalid(format!(
                    "class {name} has {} weights, expected {models}",
                    row.len()
                )));
            }
            let mut sum = 0.0;
            for &v in row {
                if !v.is_finite() || v < 0.0 {
                    return Err(Error::invalid(format!(
                        "class {name} has invalid weight {v}"
                    )));
                }
                sum += v;
            }
            if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
                return Err(Error::invalid(format!(
                    "class {name} weights sum to {sum}, expected 1"
                )));
            }
        }
        Ok(Self { class_names, rows })
    }

    pub fn uniform(class_names: Vec<String>, models: usize) -> Result<Self> {
        if models == 0 {
            return Err(Error::invalid("weight matrix needs at least one model"));
        }
        let row = vec![1.0 / models as f64; models];
        let rows = vec![row; class_names.len()];
        Self::new(class_names, rows)
    }

    /// All classes weighted entirely on model `model`.
    pub fn corner(class_names: Vec<String>, models: usize, model: usize) -> Result<Self> {
        if model >= models {
            return Err(Error::invalid(format!(
                "corner model {model} out of range for {models} models"
            )));
        }
        let mut row = vec![0.0; models];
        row[model] = 1.0;
        let rows = vec![row; class_names.len()];
        Self::new(class_names, rows)
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.rows.len()
    }

    pub fn num_models(&self) -> usize {
        self.rows[0].len()
    }

    pub fn row(&self, class: usize) -> &[f64] {
        &self.rows[class]
    }

    /// Parse the JSON map form, `{class name: [weights]}`. Rows are ordered
    /// by the encoding, so the file may list classes in any order.
    pub fn from_json_str(text: &str, encoding: &LabelEncoding) -> Result<Self> {
        let map: BTreeMap<String, Vec<f64>> = serde_json::from_str(text)
            .map_err(|e| Error::invalid(format!("weight matrix JSON: {e}")))?;
        let names = encoding.class_names();
        for key in map.keys() {
            if !names.contains(key) {
                return Err(Error::invalid(format!(
                    "weight matrix has unknown class {key:?}; expected {names:?}"
                )));
            }
        }
        let rows = names
            .iter()
            .map(|name| {
                map.get(name).cloned().ok_or_else(|| {
                    Error::invalid(format!("weight matrix is missing class {name:?}"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(names, rows)
    }

    pub fn to_json_string(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("weight matrix serializes");
        text.push('\n');
        text
    }
}

impl Serialize for WeightMatrix {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let mut map = serializer.serialize_map(Some(self.class_names.len()))?;
        for (name, row) in self.class_names.iter().zip(&self.rows) {
            map.serialize_entry(name, row)?;
        }
        map.end()
    }
}

/// Output of [`fuse_weighted`]: the renormalized stack, its argmax labels,
/// and how many voxels had to fall back to background because the weighted
/// sum vanished across every class.
#[derive(Debug, Clone)]
pub struct FusedResult {
    pub stack: ProbStack,
    pub labels: LabelMap,
    pub zero_sum_voxels: usize,
}

/// Weighted average of the stacks, per class, renormalized voxelwise.
/// Argmax ties go to the lowest class code.
pub fn fuse_weighted(stacks: &[ProbStack], w: &WeightMatrix) -> Result<FusedResult> {
    let first = stacks
        .first()
        .ok_or_else(|| Error::invalid("weighted fusion requires at least one stack"))?;
    for s in &stacks[1..] {
        first.geometry().require_match(s.geometry())?;
        if s.encoding() != first.encoding() {
            return Err(Error::invalid("stacks use different label encodings"));
        }
    }
    if w.num_models() != stacks.len() {
        return Err(Error::invalid(format!(
            "weight matrix covers {} models, got {} stacks",
            w.num_models(),
            stacks.len()
        )));
    }
    let names = first.encoding().class_names();
    if w.class_names() != names.as_slice() {
        return Err(Error::invalid(format!(
            "weight matrix classes {:?} do not match encoding classes {names:?}",
            w.class_names()
        )));
    }

    let classes = first.num_classes();
    let n = first.geometry().num_voxels();
    let mut fused = vec![vec![0.0f32; n]; classes];
    let mut acc = vec![0.0f64; classes];
    let mut zero_sum_voxels = 0usize;
    for i in 0..n {
        let mut total = 0.0f64;
        for (c, slot) in acc.iter_mut().enumerate() {
            let mut v = 0.0f64;
            for (j, stack) in stacks.iter().enumerate() {
                v += w.rows[c][j] * f64::from(stack.channel(c)[i]);
            }
            *slot = v;
            total += v;
        }
        if total <= 0.0 {
            zero_sum_voxels += 1;
            fused[0][i] = 1.0;
        } else {
            for c in 0..classes {
                fused[c][i] = (acc[c] / total) as f32;
            }
        }
    }
    let stack = ProbStack::new(first.geometry().clone(), fused, first.encoding().clone())?;
    let labels = stack.argmax_labels();
    Ok(FusedResult {
        stack,
        labels,
        zero_sum_voxels,
    })
}

/// One-hot stack for a hard labeling; `argmax_labels` inverts it exactly.
pub fn labelmap_to_probstack(lm: &LabelMap) -> ProbStack {
    let encoding = lm.encoding();
    let n = lm.geometry().num_voxels();
    let mut channels = vec![vec![0.0f32; n]; encoding.num_classes()];
    for (i, &code) in lm.codes().iter().enumerate() {
        let class = encoding.class_for_code(code).expect("label codes are valid");
        channels[class][i] = 1.0;
    }
    ProbStack::new(lm.geometry().clone(), channels, encoding.clone())
        .expect("one-hot channels satisfy the simplex")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    /// Mean lesion-wise Dice per region, averaged over regions.
    MeanLesionwiseDice,
    /// Mean plain Dice over regions; much cheaper, useful for smoke runs.
    MeanPlainDice,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Optimizer {
    CoordinateSearch,
    DirichletRandomSearch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub objective: Objective,
    pub optimizer: Optimizer,
    pub restarts: usize,
    /// Target number of candidate evaluations. The corner and uniform
    /// baselines always run, even when this is smaller.
    pub budget: usize,
    /// Shrinking step sizes for the coordinate search.
    pub steps: Vec<f64>,
    pub seed: u64,
    /// When false the background row is pinned to uniform weights.
    pub fit_background: bool,
    pub metric: MetricConfig,
    pub regions: RegionDefs,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            objective: Objective::MeanLesionwiseDice,
            optimizer: Optimizer::CoordinateSearch,
            restarts: 1,
            budget: 64,
            steps: vec![0.25, 0.1, 0.05, 0.02],
            seed: 0,
            fit_background: true,
            metric: MetricConfig::default(),
            regions: RegionDefs::default(),
        }
    }
}

impl FitConfig {
    fn validate(&self) -> Result<()> {
        if self.restarts < 1 {
            return Err(Error::invalid("restarts must be at least 1"));
        }
        if self.budget < self.restarts {
            return Err(Error::invalid(format!(
                "budget {} is below restarts {}",
                self.budget, self.restarts
            )));
        }
        if self.optimizer == Optimizer::CoordinateSearch
            && (self.steps.is_empty() || self.steps.iter().any(|s| !(*s > 0.0)))
        {
            return Err(Error::invalid(
                "coordinate search needs a nonempty schedule of positive steps",
            ));
        }
        Ok(())
    }
}

/// A held-out case: one probability stack per model plus ground truth.
#[derive(Debug, Clone)]
pub struct HeldOutCase {
    pub stacks: Vec<ProbStack>,
    pub gt: LabelMap,
}

/// Search audit: one best-so-far entry per candidate evaluation, plus any
/// cases that had to be excluded from the objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitTrace {
    pub evaluations: usize,
    pub best_so_far: Vec<f64>,
    pub warnings: Vec<String>,
}

/// Mean objective of `w` over the held-out cases. Cases whose evaluation
/// fails are excluded and reported in the second element.
pub fn evaluate_objective(
    cases: &[HeldOutCase],
    w: &WeightMatrix,
    cfg: &FitConfig,
) -> Result<(f64, Vec<String>)> {
    let scored: Vec<std::result::Result<f64, String>> = cases
        .par_iter()
        .enumerate()
        .map(|(idx, case)| score_case(case, w, cfg).map_err(|e| format!("case {idx} excluded: {e}")))
        .collect();
    let mut total = 0.0;
    let mut kept = 0usize;
    let mut warnings = Vec::new();
    for r in scored {
        match r {
            Ok(v) => {
                total += v;
                kept += 1;
            }
            Err(msg) => warnings.push(msg),
        }
    }
    if kept == 0 {
        return Err(Error::invalid("objective evaluation failed on every held-out case"));
    }
    Ok((total / kept as f64, warnings))
}

fn score_case(case: &HeldOutCase, w: &WeightMatrix, cfg: &FitConfig) -> Result<f64> {
    let fused = fuse_weighted(&case.stacks, w)?;
    match cfg.objective {
        Objective::MeanPlainDice => {
            let names = cfg.regions.valid_names(case.gt.encoding());
            let mut total = 0.0;
            for name in &names {
                let g = binarize(&case.gt, name, &cfg.regions)?;
                let p = binarize(&fused.labels, name, &cfg.regions)?;
                total += dice(&g, &p);
            }
            Ok(total / names.len() as f64)
        }
        Objective::MeanLesionwiseDice => {
            let metrics = evaluate_case(&case.gt, &fused.labels, &cfg.metric, &cfg.regions)?;
            let count = metrics.regions.len();
            let total: f64 = metrics.regions.values().map(|r| r.ld).sum();
            Ok(total / count as f64)
        }
    }
}

struct Search<'a> {
    cases: &'a [HeldOutCase],
    cfg: &'a FitConfig,
    evaluations: usize,
    best_val: f64,
    best_w: WeightMatrix,
    trace: Vec<f64>,
    warnings: BTreeSet<String>,
}

impl Search<'_> {
    fn eval(&mut self, w: &WeightMatrix) -> Result<f64> {
        let (val, warnings) = evaluate_objective(self.cases, w, self.cfg)?;
        self.evaluations += 1;
        self.warnings.extend(warnings);
        if val > self.best_val {
            self.best_val = val;
            self.best_w = w.clone();
        }
        self.trace.push(self.best_val);
        Ok(val)
    }

    fn exhausted(&self) -> bool {
        self.evaluations >= self.cfg.budget
    }
}

fn pin_background(mut w: WeightMatrix, cfg: &FitConfig) -> WeightMatrix {
    if !cfg.fit_background {
        let models = w.num_models();
        w.rows[0] = vec![1.0 / models as f64; models];
    }
    w
}

/// Move one weight by `delta` (clipped at zero) and renormalize the row.
/// Returns `None` when the move leaves the simplex unreachable.
fn perturb(w: &WeightMatrix, class: usize, model: usize, delta: f64) -> Option<WeightMatrix> {
    let mut rows = w.rows.clone();
    let row = &mut rows[class];
    row[model] = (row[model] + delta).max(0.0);
    let sum: f64 = row.iter().sum();
    if sum <= 0.0 {
        return None;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
    Some(WeightMatrix {
        class_names: w.class_names.clone(),
        rows,
    })
}

fn random_matrix(
    names: &[String],
    models: usize,
    rng: &mut ChaCha8Rng,
    cfg: &FitConfig,
) -> WeightMatrix {
    let rows: Vec<Vec<f64>> = names
        .iter()
        .map(|_| {
            let mut row: Vec<f64> = (0..models)
                .map(|_| -(1.0 - rng.gen::<f64>()).ln())
                .collect();
            let sum: f64 = row.iter().sum();
            if sum <= 0.0 {
                return vec![1.0 / models as f64; models];
            }
            for v in &mut row {
                *v /= sum;
            }
            row
        })
        .collect();
    pin_background(
        WeightMatrix {
            class_names: names.to_vec(),
            rows,
        },
        cfg,
    )
}

/// Fit per-class weights by maximizing the mean objective over the held-out
/// cases. All simplex corners and the uniform point are always evaluated;
/// the configured optimizer then spends the remaining budget. Deterministic
/// under a fixed seed.
pub fn fit_weights(cases: &[HeldOutCase], cfg: &FitConfig) -> Result<(WeightMatrix, FitTrace)> {
    cfg.validate()?;
    if cases.is_empty() {
        return Err(Error::invalid("weight fitting needs at least one held-out case"));
    }
    let models = cases[0].stacks.len();
    if models == 0 {
        return Err(Error::invalid("weight fitting needs at least one model"));
    }
    let encoding = cases[0].gt.encoding().clone();
    for (idx, case) in cases.iter().enumerate() {
        if case.stacks.len() != models {
            return Err(Error::invalid(format!(
                "case {idx} has {} stacks, expected {models}",
                case.stacks.len()
            )));
        }
        for s in &case.stacks {
            case.gt.geometry().require_match(s.geometry())?;
            if s.encoding() != &encoding {
                return Err(Error::invalid(format!(
                    "case {idx} mixes label encodings"
                )));
            }
        }
        if case.gt.encoding() != &encoding {
            return Err(Error::invalid(format!("case {idx} mixes label encodings")));
        }
    }

    let names = encoding.class_names();
    let mut search = Search {
        cases,
        cfg,
        evaluations: 0,
        best_val: f64::NEG_INFINITY,
        best_w: WeightMatrix::uniform(names.clone(), models)?,
        trace: Vec::new(),
        warnings: BTreeSet::new(),
    };

    for k in 0..models {
        let corner = pin_background(WeightMatrix::corner(names.clone(), models, k)?, cfg);
        search.eval(&corner)?;
    }
    let uniform = WeightMatrix::uniform(names.clone(), models)?;
    let uniform_val = search.eval(&uniform)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    match cfg.optimizer {
        Optimizer::CoordinateSearch => {
            'restarts: for restart in 0..cfg.restarts {
                if search.exhausted() {
                    break;
                }
                let (mut current, mut current_val) = if restart == 0 {
                    (uniform.clone(), uniform_val)
                } else {
                    let start = random_matrix(&names, models, &mut rng, cfg);
                    let val = search.eval(&start)?;
                    (start, val)
                };
                'steps: for &step in &cfg.steps {
                    loop {
                        let mut improved = false;
                        for class in 0..names.len() {
                            if class == 0 && !cfg.fit_background {
                                continue;
                            }
                            for model in 0..models {
                                for sign in [1.0, -1.0] {
                                    if search.exhausted() {
                                        break 'restarts;
                                    }
                                    let Some(candidate) =
                                        perturb(&current, class, model, sign * step)
                                    else {
                                        continue;
                                    };
                                    if candidate == current {
                                        continue;
                                    }
                                    let val = search.eval(&candidate)?;
                                    if val > current_val {
                                        current = candidate;
                                        current_val = val;
                                        improved = true;
                                    }
                                }
                            }
                        }
                        if !improved {
                            continue 'steps;
                        }
                    }
                }
            }
        }
        Optimizer::DirichletRandomSearch => {
            while !search.exhausted() {
                let candidate = random_matrix(&names, models, &mut rng, cfg);
                search.eval(&candidate)?;
            }
        }
    }

    let trace = FitTrace {
        evaluations: search.evaluations,
        best_so_far: search.trace,
        warnings: search.warnings.into_iter().collect(),
    };
    Ok((search.best_w, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Geometry;
    use crate::synth::{make_phantom, Blob};
    use crate::volume::BaseRegion;

    fn two_class_encoding() -> LabelEncoding {
        LabelEncoding::new(&[(1, BaseRegion::Et)]).unwrap()
    }

    fn stack_1v(encoding: &LabelEncoding, probs: &[f32]) -> ProbStack {
        let g = Geometry::isotropic([1, 1, 1]);
        let channels = probs.iter().map(|&p| vec![p]).collect();
        ProbStack::new(g, channels, encoding.clone()).unwrap()
    }

    #[test]
    fn weight_matrix_validation() {
        let names = vec!["background".to_string(), "ET".to_string()];
        assert!(WeightMatrix::new(names.clone(), vec![vec![0.5, 0.5], vec![1.0, 0.0]]).is_ok());
        assert!(WeightMatrix::new(names.clone(), vec![vec![0.6, 0.5], vec![1.0, 0.0]]).is_err());
        assert!(WeightMatrix::new(names.clone(), vec![vec![-0.1, 1.1], vec![1.0, 0.0]]).is_err());
        assert!(WeightMatrix::new(names, vec![vec![0.5, 0.5]]).is_err());
    }

    #[test]
    fn weight_matrix_json_round_trip() {
        let encoding = LabelEncoding::default();
        let w = WeightMatrix::uniform(encoding.class_names(), 3).unwrap();
        let text = w.to_json_string();
        let parsed = WeightMatrix::from_json_str(&text, &encoding).unwrap();
        assert_eq!(parsed, w);
        let err = WeightMatrix::from_json_str("{\"nope\": [1.0]}", &encoding).unwrap_err();
        assert!(err.to_string().contains("nope"));
    }

    #[test]
    fn fusion_weighted_average_example() {
        // (0.8, 0.2) and (0.4, 0.6) under half/half weights give 0.6/0.4,
        // already normalized.
        let encoding = two_class_encoding();
        let a = stack_1v(&encoding, &[0.8, 0.2]);
        let b = stack_1v(&encoding, &[0.4, 0.6]);
        let w = WeightMatrix::uniform(encoding.class_names(), 2).unwrap();
        let fused = fuse_weighted(&[a, b], &w).unwrap();
        assert!((fused.stack.channel(0)[0] - 0.6).abs() < 1e-6);
        assert!((fused.stack.channel(1)[0] - 0.4).abs() < 1e-6);
        assert_eq!(fused.labels.codes(), [0]);
        assert_eq!(fused.zero_sum_voxels, 0);
    }

    #[test]
    fn one_hot_weights_select_that_model() {
        let encoding = LabelEncoding::default();
        let phantom = make_phantom(
            [8, 8, 8],
            [1.0; 3],
            &[Blob { center: [4, 4, 4], radius: 2.0, label: 3 }],
            encoding.clone(),
        )
        .unwrap();
        let chosen = labelmap_to_probstack(&phantom);
        let other = labelmap_to_probstack(&LabelMap::background(phantom.geometry().clone()));
        let w = WeightMatrix::corner(encoding.class_names(), 2, 0).unwrap();
        let fused = fuse_weighted(&[chosen, other], &w).unwrap();
        assert_eq!(fused.labels.codes(), phantom.codes());
    }

    #[test]
    fn identical_stacks_fuse_to_themselves() {
        let encoding = two_class_encoding();
        let shared = stack_1v(&encoding, &[0.3, 0.7]);
        let w = WeightMatrix::new(
            encoding.class_names(),
            vec![vec![0.9, 0.1], vec![0.2, 0.8]],
        )
        .unwrap();
        let fused = fuse_weighted(&[shared.clone(), shared.clone()], &w).unwrap();
        for c in 0..2 {
            assert!((fused.stack.channel(c)[0] - shared.channel(c)[0]).abs() < 1e-6);
        }
    }

    #[test]
    fn vanished_weighted_sum_falls_back_to_background() {
        // Class 0 trusts only model A (which puts mass on class 1) and class
        // 1 trusts only model B (mass on class 0), so the sums cancel.
        let encoding = two_class_encoding();
        let a = stack_1v(&encoding, &[0.0, 1.0]);
        let b = stack_1v(&encoding, &[1.0, 0.0]);
        let w = WeightMatrix::new(
            encoding.class_names(),
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
        )
        .unwrap();
        let fused = fuse_weighted(&[a, b], &w).unwrap();
        assert_eq!(fused.zero_sum_voxels, 1);
        assert_eq!(fused.labels.codes(), [0]);
        assert_eq!(fused.stack.channel(0)[0], 1.0);
        assert_eq!(fused.stack.channel(1)[0], 0.0);
    }

    #[test]
    fn model_permutation_is_equivariant() {
        let encoding = two_class_encoding();
        let a = stack_1v(&encoding, &[0.8, 0.2]);
        let b = stack_1v(&encoding, &[0.1, 0.9]);
        let w = WeightMatrix::new(
            encoding.class_names(),
            vec![vec![0.7, 0.3], vec![0.4, 0.6]],
        )
        .unwrap();
        let w_swapped = WeightMatrix::new(
            encoding.class_names(),
            vec![vec![0.3, 0.7], vec![0.6, 0.4]],
        )
        .unwrap();
        let fused = fuse_weighted(&[a.clone(), b.clone()], &w).unwrap();
        let swapped = fuse_weighted(&[b, a], &w_swapped).unwrap();
        for c in 0..2 {
            assert!((fused.stack.channel(c)[0] - swapped.stack.channel(c)[0]).abs() < 1e-12);
        }
    }

    #[test]
    fn one_hot_round_trip() {
        let encoding = LabelEncoding::default();
        let phantom = make_phantom(
            [6, 6, 6],
            [1.0; 3],
            &[Blob { center: [3, 3, 3], radius: 2.0, label: 2 }],
            encoding,
        )
        .unwrap();
        let stack = labelmap_to_probstack(&phantom);
        assert_eq!(stack.argmax_labels().codes(), phantom.codes());
        let empty = LabelMap::background(phantom.geometry().clone());
        let empty_stack = labelmap_to_probstack(&empty);
        assert!(empty_stack.channel(0).iter().all(|&v| v == 1.0));
    }

    fn planted_cases(cases: usize) -> Vec<HeldOutCase> {
        let encoding = LabelEncoding::default();
        (0..cases)
            .map(|i| {
                let gt = make_phantom(
                    [12, 12, 12],
                    [1.0; 3],
                    &[
                        Blob { center: [4 + i, 4, 4], radius: 2.5, label: 3 },
                        Blob { center: [8, 8, 8], radius: 2.0, label: 2 },
                    ],
                    encoding.clone(),
                )
                .unwrap();
                let junk = labelmap_to_probstack(&LabelMap::background(gt.geometry().clone()));
                let good = labelmap_to_probstack(&gt);
                HeldOutCase { stacks: vec![junk, good], gt }
            })
            .collect()
    }

    fn quick_fit_cfg() -> FitConfig {
        FitConfig {
            objective: Objective::MeanPlainDice,
            budget: 16,
            steps: vec![0.25, 0.1],
            ..FitConfig::default()
        }
    }

    #[test]
    fn fitting_finds_the_planted_model() {
        let cases = planted_cases(2);
        let cfg = quick_fit_cfg();
        let (w, trace) = fit_weights(&cases, &cfg).unwrap();
        for class in 1..w.num_classes() {
            assert!(w.row(class)[1] >= 0.9, "class {class} row {:?}", w.row(class));
        }
        let (corner_best, _) = (0..2)
            .map(|k| {
                let corner =
                    WeightMatrix::corner(w.class_names().to_vec(), 2, k).unwrap();
                evaluate_objective(&cases, &corner, &cfg).unwrap()
            })
            .fold((f64::NEG_INFINITY, Vec::new()), |acc, v| {
                if v.0 > acc.0 { v } else { acc }
            });
        assert!(trace.best_so_far.last().unwrap() >= &(corner_best - 1e-9));
        assert!(trace.warnings.is_empty());
    }

    #[test]
    fn fit_is_deterministic_and_trace_monotone() {
        let cases = planted_cases(1);
        let cfg = FitConfig {
            optimizer: Optimizer::DirichletRandomSearch,
            budget: 10,
            seed: 42,
            ..quick_fit_cfg()
        };
        let (w1, t1) = fit_weights(&cases, &cfg).unwrap();
        let (w2, t2) = fit_weights(&cases, &cfg).unwrap();
        assert_eq!(w1, w2);
        assert_eq!(t1, t2);
        for pair in t1.best_so_far.windows(2) {
            assert!(pair[1] >= pair[0]);
        }
        assert_eq!(t1.best_so_far.len(), t1.evaluations);
    }

    #[test]
    fn single_model_gets_weight_one() {
        let cases: Vec<HeldOutCase> = planted_cases(1)
            .into_iter()
            .map(|mut c| {
                c.stacks.truncate(1);
                c
            })
            .collect();
        let (w, _) = fit_weights(&cases, &quick_fit_cfg()).unwrap();
        for class in 0..w.num_classes() {
            assert_eq!(w.row(class), [1.0]);
        }
    }

    #[test]
    fn identical_models_fuse_identically_whatever_the_weights() {
        let encoding = LabelEncoding::default();
        let gt = make_phantom(
            [10, 10, 10],
            [1.0; 3],
            &[Blob { center: [5, 5, 5], radius: 3.0, label: 1 }],
            encoding,
        )
        .unwrap();
        let stack = labelmap_to_probstack(&gt);
        let cases = vec![HeldOutCase {
            stacks: vec![stack.clone(), stack.clone()],
            gt: gt.clone(),
        }];
        let (w, _) = fit_weights(&cases, &quick_fit_cfg()).unwrap();
        let fused = fuse_weighted(&[stack.clone(), stack], &w).unwrap();
        assert_eq!(fused.labels.codes(), gt.codes());
    }

    #[test]
    fn pinned_background_row_stays_uniform() {
        let cases = planted_cases(1);
        let cfg = FitConfig {
            fit_background: false,
            ..quick_fit_cfg()
        };
        let (w, _) = fit_weights(&cases, &cfg).unwrap();
        assert_eq!(w.row(0), [0.5, 0.5]);
    }

    #[test]
    fn budget_below_restarts_is_rejected() {
        let cases = planted_cases(1);
        let cfg = FitConfig {
            budget: 0,
            ..quick_fit_cfg()
        };
        assert!(fit_weights(&cases, &cfg).is_err());
    }
}
