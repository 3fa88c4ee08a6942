//! End-to-end tests driving the compiled `segfuse` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use segfuse::{nifti, Geometry, Volume3D};

fn segfuse(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_segfuse"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary should launch")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn assert_success(out: &Output) {
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        stdout(out),
        stderr(out)
    );
}

/// Write the scenario file and build a small corpus under `dir`.
fn simulate_corpus(dir: &Path, cases: usize) -> PathBuf {
    let scenario = dir.join("scenario.json");
    fs::write(
        &scenario,
        format!(
            r#"{{
              "blobs": [
                {{"center": [7, 7, 7], "radius": 3.5, "label": 3}},
                {{"center": [13, 11, 8], "radius": 2.5, "label": 2}}
              ],
              "raters": [
                {{"sensitivity": 0.95, "specificity": 0.995}},
                {{"sensitivity": 0.88, "specificity": 0.99}},
                {{"sensitivity": 0.85, "specificity": 0.995}}
              ],
              "cases": {cases}
            }}"#
        ),
    )
    .unwrap();
    let corpus = dir.join("corpus");
    let out = segfuse(
        &[
            "simulate",
            "--shape",
            "20,20,20",
            "--raters",
            scenario.to_str().unwrap(),
            "--seed",
            "11",
            "--out-dir",
            corpus.to_str().unwrap(),
        ],
        dir,
    );
    assert_success(&out);
    corpus.join("manifest.json")
}

#[test]
fn print_config_emits_valid_json() {
    let dir = tempfile::tempdir().unwrap();
    let out = segfuse(&["print-config"], dir.path());
    assert_success(&out);
    let doc: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert!(doc.get("pipeline").is_some());
    assert!(doc.get("fit").is_some());
    assert_eq!(doc["pipeline"]["staple"]["max_iter"], 100);
}

#[test]
fn regions_prints_codes_and_composites() {
    let dir = tempfile::tempdir().unwrap();
    let out = segfuse(&["regions", "--show"], dir.path());
    assert_success(&out);
    let text = stdout(&out);
    assert!(text.contains("3 = ET"));
    assert!(text.contains("TC = union(ET, NETC)"));
    assert!(text.contains("WT = union(ET, NETC, SNFH)"));
}

#[test]
fn subtract_round_trips_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let geometry = Geometry::new([4, 3, 2], [1.0, 1.0, 1.0]).unwrap();
    let n = geometry.num_voxels();
    let post: Vec<f32> = (0..n).map(|i| i as f32 * 0.5).collect();
    let pre: Vec<f32> = (0..n).map(|i| 3.0 - i as f32).collect();
    let post_path = dir.path().join("post.nii.gz");
    let pre_path = dir.path().join("pre.nii.gz");
    nifti::write_nifti(
        &post_path,
        &Volume3D::from_f32(geometry.clone(), post.clone()).unwrap(),
    )
    .unwrap();
    nifti::write_nifti(
        &pre_path,
        &Volume3D::from_f32(geometry, pre.clone()).unwrap(),
    )
    .unwrap();

    let diff_path = dir.path().join("diff.nii.gz");
    let out = segfuse(
        &[
            "subtract",
            "--t1gd",
            post_path.to_str().unwrap(),
            "--t1",
            pre_path.to_str().unwrap(),
            "--out",
            diff_path.to_str().unwrap(),
        ],
        dir.path(),
    );
    assert_success(&out);
    let diff = nifti::read_nifti(&diff_path).unwrap();
    let got = diff.to_f32();
    for i in 0..n {
        assert_eq!(got[i], post[i] - pre[i]);
    }
}

#[test]
fn pipeline_runs_and_reruns_byte_identically() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = simulate_corpus(dir.path(), 2);
    let cfg = dir.path().join("pipeline.json");
    fs::write(
        &cfg,
        r#"{"stages": ["fuse-staple", "eval", "report"], "report_format": "csv"}"#,
    )
    .unwrap();

    for run in ["run1", "run2"] {
        let out = segfuse(
            &[
                "pipeline",
                "--manifest",
                manifest.to_str().unwrap(),
                "--config",
                cfg.to_str().unwrap(),
                "--out-dir",
                dir.path().join(run).to_str().unwrap(),
            ],
            dir.path(),
        );
        assert_success(&out);
    }

    for file in ["report.csv", "pipeline_log.json", "case-000/metrics.json"] {
        let a = fs::read(dir.path().join("run1").join(file)).unwrap();
        let b = fs::read(dir.path().join("run2").join(file)).unwrap();
        assert_eq!(a, b, "{file} differs between identical runs");
    }

    let report = fs::read_to_string(dir.path().join("run1/report.csv")).unwrap();
    assert!(report.contains("method,ET,NETC,RC,SNFH,TC,WT"));
    assert!(report.contains("staple"));
    assert!(report.contains("model:rater-0"));
}

#[test]
fn standalone_staple_fuses_rater_maps() {
    let dir = tempfile::tempdir().unwrap();
    simulate_corpus(dir.path(), 1);
    let case = dir.path().join("corpus/case-000");
    let consensus = dir.path().join("consensus.nii.gz");
    let perf = dir.path().join("perf.json");
    let out = segfuse(
        &[
            "fuse",
            "staple",
            "--inputs",
            case.join("rater_0.nii.gz").to_str().unwrap(),
            case.join("rater_1.nii.gz").to_str().unwrap(),
            case.join("rater_2.nii.gz").to_str().unwrap(),
            "--out",
            consensus.to_str().unwrap(),
            "--perf-out",
            perf.to_str().unwrap(),
        ],
        dir.path(),
    );
    assert_success(&out);
    assert!(consensus.exists());
    let doc: serde_json::Value = serde_json::from_str(&fs::read_to_string(&perf).unwrap()).unwrap();
    let et = doc.get("ET").expect("performance for ET");
    assert_eq!(et["p"].as_array().unwrap().len(), 3);
}

#[test]
fn eval_scores_ground_truth_against_itself_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    simulate_corpus(dir.path(), 1);
    let gt = dir.path().join("corpus/case-000/gt.nii.gz");
    let out = segfuse(
        &[
            "eval",
            "--gt",
            gt.to_str().unwrap(),
            "--pred",
            gt.to_str().unwrap(),
            "--method-name",
            "self",
        ],
        dir.path(),
    );
    assert_success(&out);
    let doc: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(doc["case"], "gt");
    let regions = &doc["methods"]["self"]["regions"];
    assert_eq!(regions["ET"]["LD"], 1.0);
    assert_eq!(regions["WT"]["LH95"], 0.0);
}

#[test]
fn fit_weights_writes_a_row_stochastic_matrix() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = simulate_corpus(dir.path(), 2);
    let cfg = dir.path().join("fit.json");
    fs::write(&cfg, r#"{"budget": 8, "steps": [0.25], "restarts": 1}"#).unwrap();
    let w_path = dir.path().join("w.json");
    let trace_path = dir.path().join("trace.json");
    let out = segfuse(
        &[
            "fit-weights",
            "--manifest",
            manifest.to_str().unwrap(),
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            w_path.to_str().unwrap(),
            "--trace-out",
            trace_path.to_str().unwrap(),
        ],
        dir.path(),
    );
    assert_success(&out);

    let w: serde_json::Value = serde_json::from_str(&fs::read_to_string(&w_path).unwrap()).unwrap();
    for (class, row) in w.as_object().unwrap() {
        let row: Vec<f64> = row
            .as_array()
            .unwrap()
            .iter()
            .map(|v| v.as_f64().unwrap())
            .collect();
        assert_eq!(row.len(), 3, "{class} row width");
        let sum: f64 = row.iter().sum();
        assert!((sum - 1.0).abs() < 1e-9, "{class} row sums to {sum}");
        assert!(row.iter().all(|&v| v >= 0.0));
    }

    let trace: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&trace_path).unwrap()).unwrap();
    assert_eq!(
        trace["models"],
        serde_json::json!(["rater-0", "rater-1", "rater-2"])
    );
    assert!(trace["evaluations"].as_u64().unwrap() >= 8);
}

#[test]
fn missing_manifest_reports_the_path_and_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = segfuse(
        &[
            "pipeline",
            "--manifest",
            "no-such-manifest.json",
            "--out-dir",
            dir.path().join("out").to_str().unwrap(),
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("no-such-manifest.json"));
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = segfuse(&["fuse", "staple", "--out", "x.nii.gz"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}
