//! End-to-end runs over a case manifest: stage sequencing, atomic artifact
//! writes, and a deterministic structured run log.
//!
//! Stages never mutate input files; every output is written to a temp file
//! in the destination directory and renamed into place. Nothing in the log
//! or the artifacts depends on wall-clock time, so identical inputs produce
//! byte-identical outputs.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channels::subtract;
use crate::error::{Error, Result};
use crate::manifest::{check_files_exist, load_manifest, CaseManifest};
use crate::metrics::{evaluate_case, CaseMetrics, MetricConfig};
use crate::nifti;
use crate::regions::RegionDefs;
use crate::report::{aggregate, render, AggregateReport, MetricKind, ReportFormat, ReportRow};
use crate::staple::{staple_multilabel, StapleConfig};
use crate::volume::{LabelEncoding, LabelMap, ProbStack};
use crate::weighted::{fuse_weighted, labelmap_to_probstack, WeightMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Subtract,
    FuseStaple,
    FuseWeighted,
    Eval,
    Report,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Subtract => "subtract",
            Stage::FuseStaple => "fuse-staple",
            Stage::FuseWeighted => "fuse-weighted",
            Stage::Eval => "eval",
            Stage::Report => "report",
        }
    }
}

/// Every knob of a run in one JSON document, so the log can echo it all.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub stages: Vec<Stage>,
    pub encoding: LabelEncoding,
    pub staple: StapleConfig,
    pub metric: MetricConfig,
    pub regions: RegionDefs,
    pub report_metric: MetricKind,
    pub report_format: ReportFormat,
    /// Weight-matrix JSON path; required by the fuse-weighted stage.
    pub weights: Option<PathBuf>,
    /// Clamp negative subtraction values to zero.
    pub clamp_negative: bool,
    /// Bounded case-level parallelism; `None` uses the global default.
    pub workers: Option<usize>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            stages: vec![Stage::Subtract, Stage::FuseStaple, Stage::Eval, Stage::Report],
            encoding: LabelEncoding::default(),
            staple: StapleConfig::default(),
            metric: MetricConfig::default(),
            regions: RegionDefs::default(),
            report_metric: MetricKind::Ld,
            report_format: ReportFormat::Json,
            weights: None,
            clamp_negative: false,
            workers: None,
        }
    }
}

/// One log line: which stage ran, for which case, what it wrote. Artifact
/// paths are relative to the output directory so the log itself stays
/// byte-identical across runs regardless of where outputs land.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageNote {
    pub stage: Stage,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub case: Option<String>,
    pub artifacts: Vec<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

/// The run log written to `pipeline_log.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub config: PipelineConfig,
    pub cases: Vec<String>,
    pub notes: Vec<StageNote>,
    pub errors: BTreeMap<String, String>,
}

#[derive(Debug)]
pub struct PipelineSummary {
    pub log: RunLog,
    /// 0 when every case completed; otherwise the worst error class seen.
    pub exit_code: i32,
}

/// Write bytes via a sibling temp file and an atomic rename.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(path, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

fn to_pretty_json<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::invalid(format!("serialization failed: {e}")))?;
    text.push('\n');
    Ok(text.into_bytes())
}

/// Read a prediction as hard labels: 4-D stacks are argmaxed, 3-D volumes
/// are decoded as label maps.
pub fn read_prediction_labels(path: &Path, encoding: &LabelEncoding) -> Result<LabelMap> {
    if nifti::read_rank(path)? == 4 {
        Ok(nifti::read_probstack(path, encoding.clone())?.argmax_labels())
    } else {
        nifti::read_labelmap(path, encoding.clone())
    }
}

/// Read a prediction as a probability stack: 3-D label maps become one-hot.
pub fn read_prediction_stack(path: &Path, encoding: &LabelEncoding) -> Result<ProbStack> {
    if nifti::read_rank(path)? == 4 {
        nifti::read_probstack(path, encoding.clone())
    } else {
        Ok(labelmap_to_probstack(&nifti::read_labelmap(path, encoding.clone())?))
    }
}

/// Per-case products of the fusion stages, consumed by eval.
#[derive(Default)]
struct CaseState {
    staple: Option<LabelMap>,
    weighted: Option<LabelMap>,
}

struct CaseOutput {
    notes: Vec<StageNote>,
    metrics: BTreeMap<String, CaseMetrics>,
}

fn note(stage: Stage, case: &CaseManifest, artifacts: Vec<PathBuf>, detail: Option<String>) -> StageNote {
    StageNote {
        stage,
        case: Some(case.id.clone()),
        artifacts,
        detail,
    }
}

fn run_case(
    case: &CaseManifest,
    cfg: &PipelineConfig,
    weights: Option<&WeightMatrix>,
    out_dir: &Path,
) -> Result<CaseOutput> {
    let rel_dir = PathBuf::from(&case.id);
    let case_dir = out_dir.join(&rel_dir);
    fs::create_dir_all(&case_dir).map_err(|e| Error::io(&case_dir, e))?;
    let mut state = CaseState::default();
    let mut notes = Vec::new();
    let mut metrics = BTreeMap::new();

    for &stage in &cfg.stages {
        match stage {
            Stage::Subtract => {
                let t1gd = nifti::read_nifti(case.image("t1gd")?)?;
                let t1 = nifti::read_nifti(case.image("t1")?)?;
                let diff = subtract(&t1gd, &t1, cfg.clamp_negative)?;
                let rel = rel_dir.join("t1gd_minus_t1.nii.gz");
                nifti::write_nifti(out_dir.join(&rel), &diff)?;
                notes.push(note(stage, case, vec![rel], None));
            }
            Stage::FuseStaple => {
                let maps = case
                    .predictions
                    .values()
                    .map(|p| read_prediction_labels(p, &cfg.encoding))
                    .collect::<Result<Vec<_>>>()?;
                let (consensus, perf) = staple_multilabel(&maps, &cfg.staple)?;
                let rel = rel_dir.join("consensus_staple.nii.gz");
                nifti::write_nifti(out_dir.join(&rel), consensus.volume())?;
                let rel_perf = rel_dir.join("staple_performance.json");
                write_atomic(out_dir.join(&rel_perf), &to_pretty_json(&perf)?)?;
                let iters: Vec<String> = perf
                    .iter()
                    .map(|(name, rp)| format!("{name}:{}", rp.iterations))
                    .collect();
                state.staple = Some(consensus);
                notes.push(note(
                    stage,
                    case,
                    vec![rel, rel_perf],
                    Some(format!("iterations {}", iters.join(" "))),
                ));
            }
            Stage::FuseWeighted => {
                let w = weights.ok_or_else(|| {
                    Error::invalid("fuse-weighted stage requires a weights file in the config")
                })?;
                let stacks = case
                    .predictions
                    .values()
                    .map(|p| read_prediction_stack(p, &cfg.encoding))
                    .collect::<Result<Vec<_>>>()?;
                let fused = fuse_weighted(&stacks, w)?;
                let rel = rel_dir.join("consensus_weighted.nii.gz");
                nifti::write_nifti(out_dir.join(&rel), fused.labels.volume())?;
                let detail = (fused.zero_sum_voxels > 0)
                    .then(|| format!("zero-sum voxels {}", fused.zero_sum_voxels));
                state.weighted = Some(fused.labels);
                notes.push(note(stage, case, vec![rel], detail));
            }
            Stage::Eval => {
                let gt = nifti::read_labelmap(case.gt_path()?, cfg.encoding.clone())?;
                let mut methods: Vec<(String, LabelMap)> = Vec::new();
                for (name, path) in &case.predictions {
                    let labels = read_prediction_labels(path, &cfg.encoding)?;
                    methods.push((format!("model:{name}"), labels));
                }
                if let Some(staple) = state.staple.clone() {
                    methods.push(("staple".to_string(), staple));
                }
                if let Some(weighted) = state.weighted.clone() {
                    methods.push(("weighted".to_string(), weighted));
                }
                for (name, labels) in methods {
                    let scores = evaluate_case(&gt, &labels, &cfg.metric, &cfg.regions)?;
                    metrics.insert(name, scores);
                }
                let rel = rel_dir.join("metrics.json");
                let doc = CaseMetricsFile {
                    case: case.id.clone(),
                    config: cfg.metric.clone(),
                    methods: metrics.clone(),
                };
                write_atomic(out_dir.join(&rel), &to_pretty_json(&doc)?)?;
                notes.push(note(stage, case, vec![rel], None));
            }
            Stage::Report => {} // cohort-level, handled after the case loop
        }
    }

    Ok(CaseOutput { notes, metrics })
}

/// Per-case metrics document written by the eval stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseMetricsFile {
    pub case: String,
    pub config: MetricConfig,
    pub methods: BTreeMap<String, CaseMetrics>,
}

fn report_extension(format: ReportFormat) -> &'static str {
    match format {
        ReportFormat::Csv => "csv",
        ReportFormat::Markdown => "md",
        ReportFormat::Json => "json",
    }
}

fn build_report(
    outputs: &[CaseOutput],
    cfg: &PipelineConfig,
    out_dir: &Path,
) -> Result<StageNote> {
    let scored: Vec<&CaseOutput> = outputs.iter().filter(|o| !o.metrics.is_empty()).collect();
    if scored.is_empty() {
        return Err(Error::invalid(
            "report stage found no case metrics; run eval in the same invocation",
        ));
    }
    let mut per_method: BTreeMap<&String, Vec<CaseMetrics>> = BTreeMap::new();
    for output in &scored {
        for (method, m) in &output.metrics {
            per_method.entry(method).or_default().push(m.clone());
        }
    }
    let case_count = scored.len();
    let mut rows = Vec::new();
    for (method, cases) in per_method {
        if cases.len() != case_count {
            return Err(Error::invalid(format!(
                "method {method} was scored on {} of {case_count} cases",
                cases.len()
            )));
        }
        let means = aggregate(&cases, cfg.report_metric)?;
        rows.push(ReportRow {
            method: method.clone(),
            means,
        });
    }
    let report = AggregateReport {
        metric: cfg.report_metric,
        case_count,
        config: cfg.metric.clone(),
        rows,
    };
    let text = render(&report, cfg.report_format)?;
    let rel = PathBuf::from(format!("report.{}", report_extension(cfg.report_format)));
    write_atomic(out_dir.join(&rel), text.as_bytes())?;
    Ok(StageNote {
        stage: Stage::Report,
        case: None,
        artifacts: vec![rel],
        detail: Some(format!("{} methods, {case_count} cases", report.rows.len())),
    })
}

/// Execute the configured stages over every case in the manifest.
///
/// Case failures do not abort the run: completed cases keep their artifacts
/// and the failure lands in the log's error ledger and the exit code.
pub fn run_pipeline(
    manifest_path: &Path,
    cfg: &PipelineConfig,
    out_dir: &Path,
) -> Result<PipelineSummary> {
    let cases = load_manifest(manifest_path)?;
    let case_ids: Vec<String> = cases.iter().map(|c| c.id.clone()).collect();
    if cfg.stages.is_empty() {
        return Ok(PipelineSummary {
            log: RunLog {
                config: cfg.clone(),
                cases: case_ids,
                notes: Vec::new(),
                errors: BTreeMap::new(),
            },
            exit_code: 0,
        });
    }
    check_files_exist(&cases)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let weights = match (&cfg.weights, cfg.stages.contains(&Stage::FuseWeighted)) {
        (Some(path), _) => {
            if !path.exists() {
                return Err(Error::MissingFile {
                    path: path.clone(),
                    context: "weights file from pipeline config".to_string(),
                });
            }
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            Some(WeightMatrix::from_json_str(&text, &cfg.encoding)?)
        }
        (None, true) => {
            return Err(Error::invalid(
                "fuse-weighted stage requires a weights file in the config",
            ))
        }
        (None, false) => None,
    };

    let run_all = || {
        cases
            .par_iter()
            .map(|case| {
                run_case(case, cfg, weights.as_ref(), out_dir)
                    .map_err(|e| (case.id.clone(), e))
            })
            .collect::<Vec<_>>()
    };
    let results = match cfg.workers {
        Some(workers) => rayon::ThreadPoolBuilder::new()
            .num_threads(workers.max(1))
            .build()
            .map_err(|e| Error::invalid(format!("worker pool: {e}")))?
            .install(run_all),
        None => run_all(),
    };

    let mut outputs = Vec::new();
    let mut errors = BTreeMap::new();
    let mut exit_code = 0;
    for result in results {
        match result {
            Ok(output) => outputs.push(output),
            Err((id, e)) => {
                exit_code = match (exit_code, e.exit_code()) {
                    (1, _) | (_, 1) => 1,
                    _ => 2,
                };
                errors.insert(id, e.to_string());
            }
        }
    }

    let mut notes: Vec<StageNote> = outputs.iter().flat_map(|o| o.notes.clone()).collect();
    if cfg.stages.contains(&Stage::Report) {
        match build_report(&outputs, cfg, out_dir) {
            Ok(n) => notes.push(n),
            Err(e) => {
                exit_code = match (exit_code, e.exit_code()) {
                    (1, _) | (_, 1) => 1,
                    _ => 2,
                };
                errors.insert("<report>".to_string(), e.to_string());
            }
        }
    }

    let log = RunLog {
        config: cfg.clone(),
        cases: case_ids,
        notes,
        errors,
    };
    write_atomic(out_dir.join("pipeline_log.json"), &to_pretty_json(&log)?)?;
    Ok(PipelineSummary { log, exit_code })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{make_phantom, simulate_rater, Blob, RaterModel};
    use crate::volume::Volume3D;

    /// Two-case synthetic workspace: modality images, three noisy rater
    /// predictions per case, and ground truth, all on disk.
    fn synth_workspace(dir: &Path) -> PathBuf {
        let encoding = LabelEncoding::default();
        let mut cases = Vec::new();
        for (ci, case_id) in ["case-a", "case-b"].iter().enumerate() {
            let case_dir = dir.join(case_id);
            fs::create_dir_all(&case_dir).unwrap();
            let gt = make_phantom(
                [14, 14, 14],
                [1.0; 3],
                &[
                    Blob { center: [5 + ci, 5, 5], radius: 3.0, label: 3 },
                    Blob { center: [9, 9, 9], radius: 2.5, label: 2 },
                ],
                encoding.clone(),
            )
            .unwrap();
            let gt_path = case_dir.join("gt.nii.gz");
            nifti::write_nifti(&gt_path, gt.volume()).unwrap();

            let g = gt.geometry().clone();
            let n = g.num_voxels();
            let t1: Vec<f32> = (0..n).map(|i| (i % 17) as f32).collect();
            let t1gd: Vec<f32> = t1.iter().map(|v| v + 1.5).collect();
            let t1_path = case_dir.join("t1.nii.gz");
            let t1gd_path = case_dir.join("t1gd.nii.gz");
            nifti::write_nifti(&t1_path, &Volume3D::from_f32(g.clone(), t1).unwrap()).unwrap();
            nifti::write_nifti(&t1gd_path, &Volume3D::from_f32(g.clone(), t1gd).unwrap()).unwrap();

            let mut predictions = BTreeMap::new();
            for r in 0..3u64 {
                let mut codes = vec![0u8; n];
                for &code in &encoding.codes() {
                    let mask = gt.mask_of_code(code);
                    let model = RaterModel::new(0.92, 0.99, 900 + 10 * ci as u64 + r).unwrap();
                    for (i, on) in simulate_rater(&mask, &model).into_iter().enumerate() {
                        if on && codes[i] == 0 {
                            codes[i] = code;
                        }
                    }
                }
                let pred = LabelMap::from_codes(g.clone(), codes, encoding.clone()).unwrap();
                let path = case_dir.join(format!("pred_{r}.nii.gz"));
                nifti::write_nifti(&path, pred.volume()).unwrap();
                predictions.insert(format!("net{r}"), path);
            }

            let mut images = BTreeMap::new();
            images.insert("t1".to_string(), t1_path);
            images.insert("t1gd".to_string(), t1gd_path);
            cases.push(CaseManifest {
                id: case_id.to_string(),
                images,
                predictions,
                gt: Some(gt_path),
            });
        }
        let manifest_path = dir.join("manifest.json");
        fs::write(&manifest_path, serde_json::to_string_pretty(&cases).unwrap()).unwrap();
        manifest_path
    }

    #[test]
    fn full_run_produces_consensus_metrics_and_report() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = synth_workspace(dir.path());
        let out = dir.path().join("out");
        let cfg = PipelineConfig {
            stages: vec![Stage::Subtract, Stage::FuseStaple, Stage::Eval, Stage::Report],
            ..PipelineConfig::default()
        };
        let summary = run_pipeline(&manifest, &cfg, &out).unwrap();
        assert_eq!(summary.exit_code, 0, "errors: {:?}", summary.log.errors);
        for case in ["case-a", "case-b"] {
            assert!(out.join(case).join("t1gd_minus_t1.nii.gz").exists());
            assert!(out.join(case).join("consensus_staple.nii.gz").exists());
            assert!(out.join(case).join("metrics.json").exists());
        }
        assert!(out.join("report.json").exists());
        assert!(out.join("pipeline_log.json").exists());
        let report: AggregateReport =
            serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
        assert_eq!(report.case_count, 2);
        // model:net0..2 plus the staple consensus
        assert_eq!(report.rows.len(), 4);
        assert!(report.rows.iter().any(|r| r.method == "staple"));
    }

    #[test]
    fn reruns_are_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = synth_workspace(dir.path());
        let cfg = PipelineConfig::default();
        let read_all = |out: &Path| {
            let mut files: Vec<(String, Vec<u8>)> = walk(out)
                .into_iter()
                .map(|p| {
                    let rel = p.strip_prefix(out).unwrap().to_string_lossy().into_owned();
                    (rel, fs::read(&p).unwrap())
                })
                .collect();
            files.sort();
            files
        };
        let out1 = dir.path().join("out1");
        let out2 = dir.path().join("out2");
        run_pipeline(&manifest, &cfg, &out1).unwrap();
        run_pipeline(&manifest, &cfg, &out2).unwrap();
        let a = read_all(&out1);
        let b = read_all(&out2);
        assert_eq!(a.len(), b.len());
        for ((name_a, bytes_a), (name_b, bytes_b)) in a.iter().zip(&b) {
            assert_eq!(name_a, name_b);
            assert_eq!(bytes_a, bytes_b, "{name_a} differs between runs");
        }
    }

    fn walk(dir: &Path) -> Vec<PathBuf> {
        let mut out = Vec::new();
        let mut stack = vec![dir.to_path_buf()];
        while let Some(d) = stack.pop() {
            for entry in fs::read_dir(&d).unwrap() {
                let p = entry.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    out.push(p);
                }
            }
        }
        out
    }

    #[test]
    fn empty_stage_list_is_a_no_op() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = synth_workspace(dir.path());
        let out = dir.path().join("out");
        let cfg = PipelineConfig {
            stages: Vec::new(),
            ..PipelineConfig::default()
        };
        let summary = run_pipeline(&manifest, &cfg, &out).unwrap();
        assert_eq!(summary.exit_code, 0);
        assert!(!out.exists());
    }

    #[test]
    fn missing_referenced_file_fails_with_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = synth_workspace(dir.path());
        let victim = dir.path().join("case-a").join("pred_1.nii.gz");
        fs::remove_file(&victim).unwrap();
        let out = dir.path().join("out");
        let err = run_pipeline(&manifest, &PipelineConfig::default(), &out).unwrap_err();
        assert!(err.to_string().contains("pred_1.nii.gz"));
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn case_failures_fill_the_error_ledger_and_spare_other_cases() {
        let dir = tempfile::tempdir().unwrap();
        let manifest_path = synth_workspace(dir.path());
        // Strip case-b's gt so eval fails for it only.
        let mut cases: Vec<CaseManifest> =
            serde_json::from_str(&fs::read_to_string(&manifest_path).unwrap()).unwrap();
        cases[1].gt = None;
        fs::write(&manifest_path, serde_json::to_string_pretty(&cases).unwrap()).unwrap();
        let out = dir.path().join("out");
        let cfg = PipelineConfig {
            stages: vec![Stage::FuseStaple, Stage::Eval],
            ..PipelineConfig::default()
        };
        let summary = run_pipeline(&manifest_path, &cfg, &out).unwrap();
        assert_eq!(summary.exit_code, 2);
        assert!(summary.log.errors.contains_key("case-b"));
        assert!(out.join("case-a").join("metrics.json").exists());
    }

    #[test]
    fn weighted_stage_requires_and_uses_weights() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = synth_workspace(dir.path());
        let out = dir.path().join("out");
        let cfg = PipelineConfig {
            stages: vec![Stage::FuseWeighted, Stage::Eval, Stage::Report],
            ..PipelineConfig::default()
        };
        assert!(run_pipeline(&manifest, &cfg, &out).is_err());

        let encoding = LabelEncoding::default();
        let w = WeightMatrix::uniform(encoding.class_names(), 3).unwrap();
        let w_path = dir.path().join("weights.json");
        fs::write(&w_path, w.to_json_string()).unwrap();
        let cfg = PipelineConfig {
            weights: Some(w_path),
            ..cfg
        };
        let summary = run_pipeline(&manifest, &cfg, &out).unwrap();
        assert_eq!(summary.exit_code, 0, "errors: {:?}", summary.log.errors);
        assert!(out.join("case-a").join("consensus_weighted.nii.gz").exists());
        let report: AggregateReport =
            serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
        assert!(report.rows.iter().any(|r| r.method == "weighted"));
    }

    #[test]
    fn config_round_trips_through_json() {
        let cfg = PipelineConfig::default();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back: PipelineConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }
}
