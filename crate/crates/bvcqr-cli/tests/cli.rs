//! End-to-end tests of the `bvcqr` binary: exit codes, artifact layout,
//! determinism, and the conformability guards. Fits here are intentionally
//! tiny; statistical quality is covered by the library and acceptance suites.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bvcqr(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bvcqr"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_slice(&read(path)).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

/// Manifest comparison modulo the one legitimately varying field.
fn manifests_equal_ignoring_wall_clock(a: &Path, b: &Path) -> bool {
    let parse = |p: &Path| -> serde_json::Value {
        let mut v: serde_json::Value = serde_json::from_slice(&read(p)).expect("valid manifest");
        v.as_object_mut().unwrap().remove("wall_clock_seconds");
        v
    };
    parse(a) == parse(b)
}

/// A small but quantizable scenario: 12 subjects, 3 chemicals, one covariate.
fn small_scenario_json() -> serde_json::Value {
    serde_json::json!({
        "n_subjects": 12,
        "n_chemicals": 3,
        "exposure_cov": [1.0, 0.3, 0.0, 0.3, 1.0, 0.3, 0.0, 0.3, 1.0],
        "theta1_true": [0.8, 0.0, 0.0],
        "theta2_true": [0.0, 0.5, 0.0],
        "scale1": 1.0,
        "scale2": 1.0,
        "ages_months": [12.0, 24.0, 36.0],
        "beta_true": [0.7],
        "covariates": [{"kind": "standard_normal"}],
        "d_true": [0.09, 0.0, 0.04],
        "noise_sd": 0.5,
        "seed": 0
    })
}

fn write_small_scenario(dir: &Path) -> PathBuf {
    let path = dir.join("scenario.json");
    std::fs::write(&path, serde_json::to_string_pretty(&small_scenario_json()).unwrap()).unwrap();
    path
}

/// Simulate + a deliberately short fit; returns (sim_dir, fit_dir). Short
/// chains may or may not clear the reliability gates, so both exit 0 and
/// exit 3 are in-contract here.
fn simulate_and_fit(root: &Path) -> (PathBuf, PathBuf) {
    let scenario = write_small_scenario(root);
    let out = bvcqr(
        &["simulate", "--scenario-config", scenario.to_str().unwrap(), "--seed", "3", "sim"],
        root,
    );
    assert!(out.status.success(), "simulate failed: {}", stderr_of(&out));
    let out = bvcqr(
        &[
            "fit",
            "sim/panel.csv",
            "fit",
            "--seed",
            "5",
            "--iterations",
            "150",
            "--warmup",
            "75",
            "--chains",
            "2",
            "--no-detect-filter",
        ],
        root,
    );
    let code = out.status.code();
    assert!(
        matches!(code, Some(0) | Some(3)),
        "fit exited {code:?}: {}",
        stderr_of(&out)
    );
    // The exit code must agree with the self-reported verdict either way.
    let diagnostics = read_json(&root.join("fit/diagnostics.json"));
    let reliable = diagnostics["reliable"].as_bool().unwrap();
    assert_eq!(code == Some(0), reliable, "exit code disagrees with diagnostics");
    if code == Some(3) {
        assert!(stderr_of(&out).contains("unreliable"));
    }
    (root.join("sim"), root.join("fit"))
}

#[test]
fn simulate_writes_deterministic_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    for dir in ["a", "b"] {
        let out = bvcqr(&["simulate", "--scenario", "1", "--seed", "7", dir], root);
        assert!(out.status.success(), "{}", stderr_of(&out));
    }
    assert_eq!(read(&root.join("a/panel.csv")), read(&root.join("b/panel.csv")));
    assert_eq!(read(&root.join("a/truth.json")), read(&root.join("b/truth.json")));
    assert!(manifests_equal_ignoring_wall_clock(
        &root.join("a/manifest.json"),
        &root.join("b/manifest.json")
    ));
    // n=100 subjects x 3 visits plus a header line.
    let panel = String::from_utf8(read(&root.join("a/panel.csv"))).unwrap();
    assert_eq!(panel.lines().count(), 301);
}

#[test]
fn simulate_rejects_unknown_scenario_listing_valid_ids() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bvcqr(&["simulate", "--scenario", "3", "--seed", "7", "x"], tmp.path());
    assert_eq!(out.status.code(), Some(1));
    let msg = stderr_of(&out);
    assert!(msg.contains('1') && msg.contains('2'), "ids not listed: {msg}");
}

#[test]
fn simulate_requires_a_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bvcqr(&["simulate", "--scenario", "1", "x"], tmp.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_of(&out).contains("--seed"));
}

#[test]
fn fit_writes_every_artifact_and_reruns_bit_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let (_, fit_dir) = simulate_and_fit(root);
    for name in ["draws.csv", "effects.csv", "diagnostics.json", "preprocess.json", "manifest.json"] {
        assert!(fit_dir.join(name).exists(), "missing {name}");
    }
    // 2 levels x 3 chemicals plus a header.
    let effects = String::from_utf8(read(&fit_dir.join("effects.csv"))).unwrap();
    assert_eq!(effects.lines().count(), 7);

    let out = bvcqr(
        &[
            "fit",
            "sim/panel.csv",
            "fit2",
            "--seed",
            "5",
            "--iterations",
            "150",
            "--warmup",
            "75",
            "--chains",
            "2",
            "--no-detect-filter",
        ],
        root,
    );
    assert!(matches!(out.status.code(), Some(0) | Some(3)));
    assert_eq!(read(&fit_dir.join("draws.csv")), read(&root.join("fit2/draws.csv")));
    assert_eq!(read(&fit_dir.join("effects.csv")), read(&root.join("fit2/effects.csv")));
    assert!(manifests_equal_ignoring_wall_clock(
        &fit_dir.join("manifest.json"),
        &root.join("fit2/manifest.json")
    ));
}

#[test]
fn fit_optional_artifacts_appear_on_request() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let scenario = write_small_scenario(root);
    let out = bvcqr(
        &["simulate", "--scenario-config", scenario.to_str().unwrap(), "--seed", "3", "sim"],
        root,
    );
    assert!(out.status.success());
    let out = bvcqr(
        &[
            "fit",
            "sim/panel.csv",
            "fit",
            "--seed",
            "5",
            "--iterations",
            "120",
            "--warmup",
            "60",
            "--chains",
            "2",
            "--no-detect-filter",
            "--design-audit",
            "--debug-terms",
        ],
        root,
    );
    assert!(matches!(out.status.code(), Some(0) | Some(3)));
    assert!(root.join("fit/design_audit.csv").exists());
    let terms = read_json(&root.join("fit/debug_terms.json"));
    assert_eq!(terms.as_array().map(Vec::len), Some(2), "one entry per chain");
}

#[test]
fn fit_flags_override_config_file_and_are_echoed() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let scenario = write_small_scenario(root);
    let out = bvcqr(
        &["simulate", "--scenario-config", scenario.to_str().unwrap(), "--seed", "3", "sim"],
        root,
    );
    assert!(out.status.success());
    std::fs::write(
        root.join("fit.toml"),
        "[sampler]\niterations = 300\nwarmup = 150\nchains = 2\n\n[preprocess]\ndetect_filter = false\n",
    )
    .unwrap();
    let out = bvcqr(
        &[
            "fit",
            "sim/panel.csv",
            "fit",
            "--config",
            "fit.toml",
            "--seed",
            "9",
            "--iterations",
            "140",
            "--warmup",
            "70",
            "--no-horseshoe",
        ],
        root,
    );
    assert!(matches!(out.status.code(), Some(0) | Some(3)), "{}", stderr_of(&out));
    let manifest = read_json(&root.join("fit/manifest.json"));
    let sampler = &manifest["config"]["sampler"];
    assert_eq!(sampler["iterations"], 140, "flag beats file");
    assert_eq!(sampler["warmup"], 70);
    assert_eq!(sampler["chains"], 2, "file beats default");
    assert_eq!(sampler["seed"], 9);
    assert_eq!(manifest["config"]["hyper"]["theta_prior"]["type"], "fixed");
    assert_eq!(manifest["seed"], 9);
}

#[test]
fn fit_rejects_unknown_config_keys() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    std::fs::write(root.join("panel.csv"), "subject_id,age,y\n").unwrap();
    std::fs::write(root.join("bad.toml"), "[sampler]\niteratons = 300\n").unwrap();
    let out = bvcqr(&["fit", "panel.csv", "fit", "--config", "bad.toml"], root);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_of(&out).contains("iteratons"), "{}", stderr_of(&out));
}

#[test]
fn fit_reports_schema_problems_with_column_context() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    std::fs::write(
        root.join("panel.csv"),
        "subject_id,age,y,chemA\ns01,12,0.5,not_a_number\n",
    )
    .unwrap();
    let out = bvcqr(&["fit", "panel.csv", "fit", "--seed", "1"], root);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_of(&out).contains("chemA"), "{}", stderr_of(&out));
}

#[test]
fn eval_scores_a_fit_and_guards_conformability() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let (sim_dir, fit_dir) = simulate_and_fit(root);
    let out = bvcqr(
        &[
            "eval",
            "--fit",
            fit_dir.to_str().unwrap(),
            "--truth",
            sim_dir.join("truth.json").to_str().unwrap(),
            "ev",
        ],
        root,
    );
    assert!(out.status.success(), "{}", stderr_of(&out));
    let heval = read_json(&root.join("ev/heval.json"));
    assert!(heval["level1"]["rmse"].is_f64());
    assert!(root.join("ev/manifest.json").exists());

    // A truth generated from a different seed is a different panel.
    let scenario = root.join("scenario.json");
    let out = bvcqr(
        &["simulate", "--scenario-config", scenario.to_str().unwrap(), "--seed", "4", "sim4"],
        root,
    );
    assert!(out.status.success());
    let out = bvcqr(
        &[
            "eval",
            "--fit",
            fit_dir.to_str().unwrap(),
            "--truth",
            root.join("sim4/truth.json").to_str().unwrap(),
            "ev_bad",
        ],
        root,
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_of(&out).contains("SHA-256"), "{}", stderr_of(&out));
}

#[test]
fn eval_requires_a_fit_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    std::fs::create_dir(root.join("empty")).unwrap();
    std::fs::write(root.join("truth.json"), "{}").unwrap();
    let out = bvcqr(
        &["eval", "--fit", "empty", "--truth", "truth.json", "ev"],
        root,
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_of(&out).contains("manifest"), "{}", stderr_of(&out));
}

/// One end-to-end pass of the study driver under `--quick`. Quick chains are
/// a smoke budget, not a validated one, so both verdicts are legal; what must
/// hold is the artifact contract: full table, report, per-run directories
/// with manifests, and failures (if any) both printed and recorded.
#[test]
fn reproduce_quick_writes_the_full_study_layout() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let out = bvcqr(&["reproduce", "--seed", "7", "--quick", "study"], root);
    let code = out.status.code();
    assert!(matches!(code, Some(0) | Some(3)), "reproduce exited {code:?}: {}", stderr_of(&out));

    let report = read_json(&root.join("study/report.json"));
    assert_eq!(report["quick"], true);
    assert_eq!(report["table"].as_array().map(Vec::len), Some(8), "2 scenarios x 2 priors x 2 levels");
    let failures = report["failures"].as_array().unwrap();
    assert_eq!(code == Some(0), failures.is_empty() && report["pass"] == true);
    let stdout = String::from_utf8_lossy(&out.stdout);
    for f in failures {
        assert!(stdout.contains(f.as_str().unwrap()), "failure not printed: {f}");
    }

    let table = String::from_utf8_lossy(&read(&root.join("study/table.csv"))).into_owned();
    assert_eq!(table.lines().count(), 9, "header plus eight rows");
    for run in ["s1_hs", "s1_wide", "s2_hs", "s2_wide"] {
        for file in ["panel.csv", "truth.json", "effects.csv", "diagnostics.json", "heval.json", "manifest.json"] {
            assert!(root.join("study").join(run).join(file).exists(), "{run}/{file} missing");
        }
    }
    assert!(root.join("study/manifest.json").exists());
}
