//! `segfuse`: fuse candidate tumor segmentations, derive channels, and score
//! results lesion-wise, from the command line.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use segfuse::manifest::{self, CaseManifest};
use segfuse::metrics::{evaluate_case, MetricConfig};
use segfuse::pipeline::{
    self, read_prediction_labels, read_prediction_stack, write_atomic, CaseMetricsFile,
    PipelineConfig,
};
use segfuse::regions::RegionDefs;
use segfuse::report::{aggregate, render, AggregateReport, MetricKind, ReportFormat, ReportRow};
use segfuse::staple::{staple_multilabel, StapleConfig};
use segfuse::synth::{make_phantom, rater_seed, simulate_rater, Blob, RaterModel};
use segfuse::weighted::{fit_weights, fuse_weighted, FitConfig, FitTrace, HeldOutCase, WeightMatrix};
use segfuse::{channels, nifti, Error, LabelEncoding, LabelMap, Result, Volume3D};

#[derive(Parser)]
#[command(
    name = "segfuse",
    version,
    about = "Consensus fusion and lesion-wise scoring for tumor segmentations"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Voxelwise contrast subtraction (post minus pre), written as float32.
    Subtract(SubtractArgs),
    /// Fuse candidate segmentations into a consensus.
    Fuse {
        #[command(subcommand)]
        method: FuseCmd,
    },
    /// Fit per-class ensemble weights on a held-out manifest.
    FitWeights(FitWeightsArgs),
    /// Score a prediction against ground truth, lesion-wise.
    Eval(EvalArgs),
    /// Generate a synthetic phantom corpus with noisy raters.
    Simulate(SimulateArgs),
    /// Aggregate per-case metric files into one table.
    Report(ReportArgs),
    /// Run configured stages over a case manifest.
    Pipeline(PipelineArgs),
    /// Show the label codes and region definitions in effect.
    Regions(RegionsArgs),
    /// Dump every default configuration as one JSON document.
    PrintConfig,
}

#[derive(Args)]
struct SubtractArgs {
    /// Post-contrast volume (minuend).
    #[arg(long)]
    t1gd: PathBuf,
    /// Pre-contrast volume (subtrahend).
    #[arg(long)]
    t1: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Floor negative differences at zero.
    #[arg(long)]
    clamp_negative: bool,
}

#[derive(Subcommand)]
enum FuseCmd {
    /// Expectation-maximization consensus with per-rater performance.
    Staple(FuseStapleArgs),
    /// Per-class weighted probability averaging.
    Weighted(FuseWeightedArgs),
}

#[derive(Args)]
struct FuseStapleArgs {
    /// Candidate segmentations (label maps or probability stacks).
    #[arg(long, num_args = 1.., required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Where to write the estimated rater performance JSON.
    #[arg(long)]
    perf_out: Option<PathBuf>,
    /// StapleConfig JSON; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct FuseWeightedArgs {
    /// Model outputs (probability stacks or label maps), weight order.
    #[arg(long, num_args = 1.., required = true)]
    inputs: Vec<PathBuf>,
    /// Weight-matrix JSON, {class name: [weights]}.
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also write the fused probability stack.
    #[arg(long)]
    stack_out: Option<PathBuf>,
}

#[derive(Args)]
struct FitWeightsArgs {
    /// Held-out manifest: cases with model predictions and ground truth.
    #[arg(long)]
    manifest: PathBuf,
    /// Output path for the fitted weight-matrix JSON.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the seed in the fit config.
    #[arg(long)]
    seed: Option<u64>,
    /// FitConfig JSON; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Where to write the search trace JSON.
    #[arg(long)]
    trace_out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    pred: PathBuf,
    /// Output JSON path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// MetricConfig JSON; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Method key recorded in the output document.
    #[arg(long, default_value = "pred")]
    method_name: String,
    /// Case id recorded in the output document; prediction stem when omitted.
    #[arg(long)]
    case: Option<String>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Volume shape, e.g. 32,32,32.
    #[arg(long, value_parser = parse_shape)]
    shape: [usize; 3],
    /// Scenario JSON: blobs, rater qualities, case count.
    #[arg(long)]
    raters: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Per-case metric JSON files produced by eval or the pipeline.
    #[arg(long, num_args = 1.., required = true)]
    cases: Vec<PathBuf>,
    #[arg(long, default_value = "LD")]
    metric: MetricKind,
    #[arg(long, default_value = "markdown")]
    format: ReportFormat,
    /// Output path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// PipelineConfig JSON; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct RegionsArgs {
    /// Print the region algebra (the default and only action).
    #[arg(long)]
    show: bool,
}

fn parse_shape(s: &str) -> std::result::Result<[usize; 3], String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(format!("expected X,Y,Z, got {s:?}"));
    }
    let mut shape = [0usize; 3];
    for (slot, part) in shape.iter_mut().zip(parts) {
        *slot = part
            .trim()
            .parse::<usize>()
            .map_err(|e| format!("bad extent {part:?}: {e}"))?;
        if *slot == 0 {
            return Err("extents must be positive".to_string());
        }
    }
    Ok(shape)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Subtract(args) => cmd_subtract(args),
        Cmd::Fuse { method } => match method {
            FuseCmd::Staple(args) => cmd_fuse_staple(args),
            FuseCmd::Weighted(args) => cmd_fuse_weighted(args),
        },
        Cmd::FitWeights(args) => cmd_fit_weights(args),
        Cmd::Eval(args) => cmd_eval(args),
        Cmd::Simulate(args) => cmd_simulate(args),
        Cmd::Report(args) => cmd_report(args),
        Cmd::Pipeline(args) => cmd_pipeline(args),
        Cmd::Regions(args) => cmd_regions(args),
        Cmd::PrintConfig => cmd_print_config(),
    }
}

/// Load a JSON config file, or the type's defaults when no path is given.
fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&text).map_err(|e| Error::Json {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })
        }
    }
}

fn to_float(volume: Volume3D) -> Result<Volume3D> {
    if volume.is_float() {
        Ok(volume)
    } else {
        let values = volume.to_f32();
        Volume3D::from_f32(volume.geometry().clone(), values)
    }
}

fn pretty_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::InvalidInput(format!("serialization failed: {e}")))?;
    text.push('\n');
    Ok(text.into_bytes())
}

fn cmd_subtract(args: SubtractArgs) -> Result<()> {
    let t1gd = to_float(nifti::read_nifti(&args.t1gd)?)?;
    let t1 = to_float(nifti::read_nifti(&args.t1)?)?;
    let diff = channels::subtract(&t1gd, &t1, args.clamp_negative)?;
    nifti::write_nifti(&args.out, &diff)?;
    println!("wrote {}", args.out.display());
    Ok(())
}

fn cmd_fuse_staple(args: FuseStapleArgs) -> Result<()> {
    let cfg: StapleConfig = load_config(args.config.as_deref())?;
    let encoding = LabelEncoding::default();
    let maps = args
        .inputs
        .iter()
        .map(|p| read_prediction_labels(p, &encoding))
        .collect::<Result<Vec<_>>>()?;
    let (consensus, perf) = staple_multilabel(&maps, &cfg)?;
    nifti::write_nifti(&args.out, consensus.volume())?;
    if let Some(perf_out) = &args.perf_out {
        write_atomic(perf_out, &pretty_bytes(&perf)?)?;
    }
    for (region, rp) in &perf {
        println!(
            "{region}: iterations {} converged {}",
            rp.iterations, rp.converged
        );
    }
    println!("wrote {}", args.out.display());
    Ok(())
}

fn cmd_fuse_weighted(args: FuseWeightedArgs) -> Result<()> {
    let encoding = LabelEncoding::default();
    let text = fs::read_to_string(&args.weights).map_err(|e| Error::io(&args.weights, e))?;
    let w = WeightMatrix::from_json_str(&text, &encoding)?;
    let stacks = args
        .inputs
        .iter()
        .map(|p| read_prediction_stack(p, &encoding))
        .collect::<Result<Vec<_>>>()?;
    let fused = fuse_weighted(&stacks, &w)?;
    nifti::write_nifti(&args.out, fused.labels.volume())?;
    if let Some(stack_out) = &args.stack_out {
        nifti::write_probstack(stack_out, &fused.stack)?;
    }
    if fused.zero_sum_voxels > 0 {
        eprintln!(
            "note: {} voxels had zero weighted mass and fell back to background",
            fused.zero_sum_voxels
        );
    }
    println!("wrote {}", args.out.display());
    Ok(())
}

/// Search trace plus the model order the weight columns refer to.
#[derive(Serialize)]
struct TraceFile {
    models: Vec<String>,
    #[serde(flatten)]
    trace: FitTrace,
}

fn cmd_fit_weights(args: FitWeightsArgs) -> Result<()> {
    let mut cfg: FitConfig = load_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let cases = manifest::load_manifest(&args.manifest)?;
    manifest::check_files_exist(&cases)?;
    let encoding = LabelEncoding::default();
    let model_names: Vec<String> = cases[0].model_names().iter().map(|s| s.to_string()).collect();
    if model_names.is_empty() {
        return Err(Error::InvalidInput(format!(
            "case {} lists no predictions",
            cases[0].id
        )));
    }
    let mut held_out = Vec::new();
    for case in &cases {
        let names: Vec<String> = case.model_names().iter().map(|s| s.to_string()).collect();
        if names != model_names {
            return Err(Error::InvalidInput(format!(
                "case {} has models {names:?}, expected {model_names:?}",
                case.id
            )));
        }
        let stacks = case
            .predictions
            .values()
            .map(|p| read_prediction_stack(p, &encoding))
            .collect::<Result<Vec<_>>>()?;
        let gt = nifti::read_labelmap(case.gt_path()?, encoding.clone())?;
        held_out.push(HeldOutCase { stacks, gt });
    }
    let (w, trace) = fit_weights(&held_out, &cfg)?;
    write_atomic(&args.out, w.to_json_string().as_bytes())?;
    if let Some(trace_out) = &args.trace_out {
        let doc = TraceFile {
            models: model_names.clone(),
            trace: trace.clone(),
        };
        write_atomic(trace_out, &pretty_bytes(&doc)?)?;
    }
    for warning in &trace.warnings {
        eprintln!("warning: {warning}");
    }
    println!(
        "models {:?}: best objective {:.4} after {} evaluations",
        model_names,
        trace.best_so_far.last().copied().unwrap_or(f64::NAN),
        trace.evaluations
    );
    println!("wrote {}", args.out.display());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let cfg: MetricConfig = load_config(args.config.as_deref())?;
    let encoding = LabelEncoding::default();
    let defs = RegionDefs::default();
    let gt = nifti::read_labelmap(&args.gt, encoding.clone())?;
    let pred = read_prediction_labels(&args.pred, &encoding)?;
    let scores = evaluate_case(&gt, &pred, &cfg, &defs)?;
    let case = args.case.unwrap_or_else(|| {
        let stem = args
            .pred
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "case".to_string());
        stem.strip_suffix(".nii").unwrap_or(&stem).to_string()
    });
    let mut methods = BTreeMap::new();
    methods.insert(args.method_name, scores);
    let doc = CaseMetricsFile {
        case,
        config: cfg,
        methods,
    };
    let bytes = pretty_bytes(&doc)?;
    match &args.out {
        Some(path) => {
            write_atomic(path, &bytes)?;
            println!("wrote {}", path.display());
        }
        None => print!("{}", String::from_utf8_lossy(&bytes)),
    }
    Ok(())
}

/// Scenario file for `simulate`.
#[derive(Deserialize)]
struct SimSpec {
    blobs: Vec<Blob>,
    raters: Vec<SimRater>,
    #[serde(default = "default_cases")]
    cases: usize,
    #[serde(default = "default_spacing")]
    spacing: [f64; 3],
}

#[derive(Deserialize)]
struct SimRater {
    sensitivity: f64,
    specificity: f64,
}

fn default_cases() -> usize {
    2
}

fn default_spacing() -> [f64; 3] {
    [1.0; 3]
}

fn cmd_simulate(args: SimulateArgs) -> Result<()> {
    let text = fs::read_to_string(&args.raters).map_err(|e| Error::io(&args.raters, e))?;
    let spec: SimSpec = serde_json::from_str(&text).map_err(|e| Error::Json {
        path: args.raters.clone(),
        reason: e.to_string(),
    })?;
    if spec.blobs.is_empty() || spec.raters.is_empty() || spec.cases == 0 {
        return Err(Error::InvalidInput(
            "scenario needs at least one blob, one rater and one case".to_string(),
        ));
    }
    fs::create_dir_all(&args.out_dir).map_err(|e| Error::io(&args.out_dir, e))?;
    let root = fs::canonicalize(&args.out_dir).map_err(|e| Error::io(&args.out_dir, e))?;
    let encoding = LabelEncoding::default();
    let mut cases = Vec::new();
    for ci in 0..spec.cases {
        let id = format!("case-{ci:03}");
        let case_dir = root.join(&id);
        fs::create_dir_all(&case_dir).map_err(|e| Error::io(&case_dir, e))?;
        // Alternate a one-voxel shift so cases are not carbon copies.
        let blobs: Vec<Blob> = spec
            .blobs
            .iter()
            .map(|b| {
                let mut blob = *b;
                blob.center[0] += ci % 2;
                blob
            })
            .collect();
        let gt = make_phantom(args.shape, spec.spacing, &blobs, encoding.clone())?;
        let gt_path = case_dir.join("gt.nii.gz");
        nifti::write_nifti(&gt_path, gt.volume())?;

        let mut predictions = BTreeMap::new();
        for (ri, rater) in spec.raters.iter().enumerate() {
            let seed = rater_seed(args.seed, ci * spec.raters.len() + ri);
            let model = RaterModel::new(rater.sensitivity, rater.specificity, seed)?;
            let n = gt.geometry().num_voxels();
            let mut codes = vec![0u8; n];
            for &code in &encoding.codes() {
                let noisy = simulate_rater(&gt.mask_of_code(code), &model);
                for (i, on) in noisy.into_iter().enumerate() {
                    if on && codes[i] == 0 {
                        codes[i] = code;
                    }
                }
            }
            let rater_map = LabelMap::from_codes(gt.geometry().clone(), codes, encoding.clone())?;
            let path = case_dir.join(format!("rater_{ri}.nii.gz"));
            nifti::write_nifti(&path, rater_map.volume())?;
            predictions.insert(format!("rater-{ri}"), path);
        }
        cases.push(CaseManifest {
            id,
            images: BTreeMap::new(),
            predictions,
            gt: Some(gt_path),
        });
    }
    let manifest_path = root.join("manifest.json");
    write_atomic(&manifest_path, &pretty_bytes(&cases)?)?;
    println!(
        "wrote {} cases and {}",
        spec.cases,
        manifest_path.display()
    );
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Result<()> {
    let mut docs = Vec::new();
    for path in &args.cases {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let doc: CaseMetricsFile = serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        docs.push(doc);
    }
    let first = docs
        .first()
        .ok_or_else(|| Error::InvalidInput("no case files given".to_string()))?;
    let config = first.config.clone();
    for doc in &docs {
        if doc.config != config {
            return Err(Error::InvalidInput(format!(
                "case {} was scored under a different metric config",
                doc.case
            )));
        }
    }
    let mut per_method: BTreeMap<String, Vec<_>> = BTreeMap::new();
    for doc in &docs {
        for (method, metrics) in &doc.methods {
            per_method
                .entry(method.clone())
                .or_default()
                .push(metrics.clone());
        }
    }
    let mut rows = Vec::new();
    for (method, cases) in per_method {
        if cases.len() != docs.len() {
            return Err(Error::InvalidInput(format!(
                "method {method} appears in {} of {} case files",
                cases.len(),
                docs.len()
            )));
        }
        let means = aggregate(&cases, args.metric)?;
        rows.push(ReportRow { method, means });
    }
    let report = AggregateReport {
        metric: args.metric,
        case_count: docs.len(),
        config,
        rows,
    };
    let text = render(&report, args.format)?;
    match &args.out {
        Some(path) => {
            write_atomic(path, text.as_bytes())?;
            println!("wrote {}", path.display());
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn cmd_pipeline(args: PipelineArgs) -> Result<()> {
    let cfg: PipelineConfig = load_config(args.config.as_deref())?;
    let summary = pipeline::run_pipeline(&args.manifest, &cfg, &args.out_dir)?;
    for note in &summary.log.notes {
        let case = note.case.as_deref().unwrap_or("<cohort>");
        let files: Vec<String> = note
            .artifacts
            .iter()
            .map(|p| p.display().to_string())
            .collect();
        println!("{} {case}: {}", note.stage.name(), files.join(" "));
    }
    for (case, message) in &summary.log.errors {
        eprintln!("error in {case}: {message}");
    }
    if summary.exit_code != 0 {
        // Completed cases keep their artifacts; report the partial failure.
        std::process::exit(summary.exit_code);
    }
    Ok(())
}

fn cmd_regions(_args: RegionsArgs) -> Result<()> {
    let encoding = LabelEncoding::default();
    let defs = RegionDefs::default();
    println!("label codes:");
    for code in encoding.codes() {
        let name = encoding
            .region_of(code)
            .map(|r| r.name())
            .unwrap_or("<unknown>");
        println!("  {code} = {name}");
    }
    println!("evaluation regions:");
    for line in defs.describe(&encoding) {
        println!("  {line}");
    }
    Ok(())
}

fn cmd_print_config() -> Result<()> {
    #[derive(Serialize)]
    struct AllDefaults {
        pipeline: PipelineConfig,
        fit: FitConfig,
        modalities: Vec<&'static str>,
    }
    let doc = AllDefaults {
        pipeline: PipelineConfig::default(),
        fit: FitConfig::default(),
        modalities: manifest::MODALITY_KEYS.to_vec(),
    };
    print!("{}", String::from_utf8_lossy(&pretty_bytes(&doc)?));
    Ok(())
}
